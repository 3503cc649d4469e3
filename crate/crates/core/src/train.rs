//! Mini-batch training loop with per-step metric rows and checkpointing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::Container;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::net::{forward_on_tape, param_names_for, CnnicConfig, CnnicModel};
use crate::optim::{adam_step, AdamState, OptimConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Mode;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CSV_HEADER: &str = "step,lr,train_loss,train_acc,test_acc";

/// Latest observed training statistics (carried into checkpoints).
#[derive(Debug, Clone, Copy)]
pub struct RunningMetrics {
    pub last_train_loss: f64,
    pub last_train_acc: f64,
    pub last_test_acc: f64,
}

impl Default for RunningMetrics {
    fn default() -> Self {
        RunningMetrics {
            last_train_loss: f64::NAN,
            last_train_acc: f64::NAN,
            last_test_acc: f64::NAN,
        }
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainingState<T: Scalar> {
    pub model: CnnicModel<T>,
    pub adam: AdamState<T>,
    /// Completed optimizer steps.
    pub step: u64,
    /// Run seed; batching and dropout streams are pure functions of
    /// (seed, epoch/step), so no extra generator state is stored.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    /// Optional hard cap on total optimizer steps.
    pub max_steps: Option<u64>,
    /// Probe-evaluation cadence in steps; between evaluations the last
    /// test accuracy is carried forward in the metric rows.
    pub eval_every: u64,
    /// Checkpoint cadence in steps (0 = final checkpoint only).
    pub checkpoint_every: u64,
    /// When set, metrics.csv and checkpoint.bin are written here.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 1,
            batch_size: 50,
            seed: 42,
            optim: OptimConfig::default(),
            max_steps: None,
            eval_every: 25,
            checkpoint_every: 200,
            out_dir: None,
        }
    }
}

/// One metrics CSV row. Train loss/accuracy are measured on the step's own
/// mini-batch (dropout active); test accuracy on the held-out probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.lr, self.train_loss, self.train_acc, self.test_acc
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub state: TrainingState<T>,
    pub metrics: RunningMetrics,
    pub rows: Vec<MetricRow>,
}

/// Train a freshly initialized model.
pub fn train<T: Scalar>(
    config: CnnicConfig,
    opts: &TrainOptions,
    data: &Dataset<T>,
    probe: Option<&Dataset<T>>,
) -> Result<TrainOutcome<T>> {
    opts.optim.validate()?;
    let model = CnnicModel::init(config, opts.seed)?;
    let params: Vec<&Tensor<T>> = model.named_params().into_iter().map(|(_, t)| t).collect();
    let adam = AdamState::new(&params, opts.optim.clone());
    let state = TrainingState {
        model,
        adam,
        step: 0,
        seed: opts.seed,
    };
    run_loop(state, opts, data, probe)
}

/// Continue a run from a loaded [`TrainingState`]. Step numbering, batch
/// order and dropout masks line up with the original run, so resuming
/// reproduces it exactly.
pub fn resume<T: Scalar>(
    state: TrainingState<T>,
    opts: &TrainOptions,
    data: &Dataset<T>,
    probe: Option<&Dataset<T>>,
) -> Result<TrainOutcome<T>> {
    opts.optim.validate()?;
    run_loop(state, opts, data, probe)
}

fn run_loop<T: Scalar>(
    mut state: TrainingState<T>,
    opts: &TrainOptions,
    data: &Dataset<T>,
    probe: Option<&Dataset<T>>,
) -> Result<TrainOutcome<T>> {
    let config = state.model.config.clone();
    config.validate()?;
    if data.image_size() != config.image_size {
        return Err(Error::Config(format!(
            "training images are {}x{}, config expects {}",
            data.image_size(),
            data.image_size(),
            config.image_size
        )));
    }
    if opts.eval_every == 0 {
        return Err(Error::Config("eval_every must be >= 1".into()));
    }
    let steps_per_epoch = data.len().div_ceil(opts.batch_size) as u64;
    let mut total_steps = opts.epochs.saturating_mul(steps_per_epoch);
    if let Some(cap) = opts.max_steps {
        total_steps = total_steps.min(cap);
    }

    let names: Vec<String> = state.model.param_names();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();

    let mut csv = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
            writeln!(w, "{CSV_HEADER}")?;
            w.flush()?;
            Some(w)
        }
        None => None,
    };
    let ckpt_path = opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));

    let mut rows = Vec::new();
    let mut running = RunningMetrics::default();
    let mut batch_plan: Option<(u64, Vec<Vec<usize>>)> = None;

    for step0 in state.step..total_steps {
        let epoch = step0 / steps_per_epoch;
        if batch_plan.as_ref().map(|(e, _)| *e) != Some(epoch) {
            batch_plan = Some((epoch, data.batches(opts.batch_size, state.seed, epoch)?));
        }
        let batch_idx = (step0 % steps_per_epoch) as usize;
        let indices = &batch_plan.as_ref().unwrap().1[batch_idx];
        let (images, labels) = data.gather(indices)?;
        let label_idx: Vec<usize> = labels.iter().map(|&y| y as usize).collect();

        let lr = state.adam.current_lr();
        let mut tape = crate::autograd::Tape::new();
        let fwd = forward_on_tape(&mut tape, &state.model, &images, Mode::Train, state.seed, step0)?;
        let (loss_id, probs) = if config.softmax_per_patch {
            let loss = tape.nll_from_probs(fwd.combined, &label_idx)?;
            (loss, tape.value(fwd.combined).clone())
        } else {
            tape.softmax_cross_entropy(fwd.combined, &label_idx)?
        };
        let loss = tape.value(loss_id).item().to_f64();
        if !loss.is_finite() {
            return Err(non_finite_abort(
                format!("training loss at step {}", step0 + 1),
                ckpt_path.as_deref(),
            ));
        }

        let mut grads_by_id = tape.backward(loss_id)?;
        let grads: Vec<Tensor<T>> = fwd
            .params
            .iter()
            .map(|&id| {
                let shape = tape.value(id).shape().to_vec();
                grads_by_id.take_or_zeros(id, &shape)
            })
            .collect();
        drop(tape);

        let mut params = state.model.flat_mut();
        adam_step(&mut params, &grads, &name_refs, &mut state.adam).map_err(|e| match e {
            Error::NonFinite(msg) => {
                non_finite_abort(format!("{msg} at step {}", step0 + 1), ckpt_path.as_deref())
            }
            other => other,
        })?;
        state.step = step0 + 1;

        let correct = probs
            .argmax_rows()
            .iter()
            .zip(labels.iter())
            .filter(|(p, y)| **p == **y as usize)
            .count();
        running.last_train_loss = loss;
        running.last_train_acc = correct as f64 / labels.len() as f64;

        if let Some(probe_data) = probe {
            if state.step == 1 || state.step.is_multiple_of(opts.eval_every) {
                let report = evaluate(&state.model, probe_data, 100)?;
                running.last_test_acc = 1.0 - report.error_rate();
            }
        }

        let row = MetricRow {
            step: state.step,
            lr,
            train_loss: running.last_train_loss,
            train_acc: running.last_train_acc,
            test_acc: running.last_test_acc,
        };
        if let Some(w) = csv.as_mut() {
            writeln!(w, "{}", row.csv_line())?;
            w.flush()?;
        }
        rows.push(row);

        if let Some(path) = &ckpt_path {
            if opts.checkpoint_every > 0 && state.step.is_multiple_of(opts.checkpoint_every) {
                save_checkpoint(path, &state, &running)?;
            }
        }
    }

    if let Some(path) = &ckpt_path {
        save_checkpoint(path, &state, &running)?;
    }
    Ok(TrainOutcome {
        state,
        metrics: running,
        rows,
    })
}

fn non_finite_abort(what: String, ckpt: Option<&Path>) -> Error {
    match ckpt {
        Some(path) if path.exists() => Error::NonFinite(format!(
            "{what}; last good checkpoint retained at {}",
            path.display()
        )),
        _ => Error::NonFinite(what),
    }
}

/// Serialize model parameters, optimizer moments and run metadata.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    state: &TrainingState<T>,
    metrics: &RunningMetrics,
) -> Result<()> {
    let mut c = Container::new();
    for (k, v) in state.model.config.to_kv() {
        c.set(&format!("model.{k}"), v);
    }
    let o = &state.adam.config;
    c.set("optim.base_lr", o.base_lr);
    c.set("optim.beta1", o.beta1);
    c.set("optim.beta2", o.beta2);
    c.set("optim.epsilon", o.epsilon);
    c.set("optim.decay_rate", o.decay_rate);
    c.set("optim.decay_every", o.decay_every);
    c.set("run.step", state.step);
    c.set("run.seed", state.seed);
    c.set("run.last_train_loss", metrics.last_train_loss);
    c.set("run.last_train_acc", metrics.last_train_acc);
    c.set("run.last_test_acc", metrics.last_test_acc);
    for (name, tensor) in state.model.named_params() {
        c.push_tensor(&format!("param.{name}"), tensor);
    }
    for (i, name) in state.model.param_names().iter().enumerate() {
        c.push_tensor(&format!("adam.m.{name}"), &state.adam.m[i]);
        c.push_tensor(&format!("adam.v.{name}"), &state.adam.v[i]);
    }
    c.save(path)
}

/// Load a [`TrainingState`] saved by [`save_checkpoint`]. The element type
/// must match the stored precision.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(TrainingState<T>, RunningMetrics)> {
    let c = Container::load(path)?;
    load_state(&c)
}

/// Decode a training state from an already-loaded container.
pub fn load_state<T: Scalar>(c: &Container) -> Result<(TrainingState<T>, RunningMetrics)> {
    let model_kv: std::collections::BTreeMap<String, String> = c
        .config
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix("model.")
                .map(|key| (key.to_string(), v.clone()))
        })
        .collect();
    let config = CnnicConfig::from_kv(&model_kv)?;
    let names = param_names_for(&config)?;
    let tensors = names
        .iter()
        .map(|n| c.tensor::<T>(&format!("param.{n}")))
        .collect::<Result<Vec<_>>>()?;
    let model = CnnicModel::from_flat(config, &tensors)?;

    let optim = OptimConfig {
        base_lr: c.get_parsed("optim.base_lr")?,
        beta1: c.get_parsed("optim.beta1")?,
        beta2: c.get_parsed("optim.beta2")?,
        epsilon: c.get_parsed("optim.epsilon")?,
        decay_rate: c.get_parsed("optim.decay_rate")?,
        decay_every: c.get_parsed("optim.decay_every")?,
    };
    let m = names
        .iter()
        .map(|n| c.tensor::<T>(&format!("adam.m.{n}")))
        .collect::<Result<Vec<_>>>()?;
    let v = names
        .iter()
        .map(|n| c.tensor::<T>(&format!("adam.v.{n}")))
        .collect::<Result<Vec<_>>>()?;
    let step = c.get_parsed("run.step")?;
    let adam = AdamState {
        m,
        v,
        step,
        config: optim,
    };
    Ok((
        TrainingState {
            model,
            adam,
            step,
            seed: c.get_parsed("run.seed")?,
        },
        RunningMetrics {
            last_train_loss: c.get_parsed("run.last_train_loss")?,
            last_train_acc: c.get_parsed("run.last_train_acc")?,
            last_test_acc: c.get_parsed("run.last_test_acc")?,
        },
    ))
}
