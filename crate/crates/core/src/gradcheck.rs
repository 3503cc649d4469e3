//! Finite-difference verification of tape gradients.
//!
//! A [`CheckCase`] owns a set of input tensors and a builder that records a
//! scalar loss on a tape. The harness computes analytic gradients with one
//! backward pass and compares them entry-by-entry against central finite
//! differences obtained by re-evaluating the loss, an independent route
//! through the same builder. Checks always run at `f64`.

use crate::autograd::{Tape, ValueId};
use crate::error::{Error, Result};
use crate::net::{forward_from_ids, CnnicConfig, CnnicModel};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::Mode;

type Builder = dyn Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId> + Send + Sync;

/// A differentiable scalar function of named input tensors.
pub struct CheckCase {
    pub name: String,
    pub input_names: Vec<String>,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Builder>,
}

/// Comparison result for one input tensor of one case.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub case: String,
    pub tensor: String,
    pub worst_rel: f64,
    pub checked_entries: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    /// Central-difference step h.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Entries sampled per tensor (small tensors are checked exhaustively).
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            step: 1e-3,
            tolerance: 1e-4,
            max_entries: 24,
            seed: 0x5eed,
        }
    }
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Evaluate the case's loss for a given assignment of its inputs.
pub fn loss_value(case: &CheckCase, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = (case.build)(&mut tape, &ids)?;
    Ok(tape.value(loss).item())
}

/// One forward + backward pass; returns a gradient per input tensor
/// (zeros when the input does not reach the loss).
pub fn analytic_gradients(case: &CheckCase) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = (case.build)(&mut tape, &ids)?;
    let mut grads = tape.backward(loss)?;
    Ok(ids
        .iter()
        .zip(case.inputs.iter())
        .map(|(&id, t)| grads.take_or_zeros(id, t.shape()))
        .collect())
}

/// Compare supplied analytic gradients against central differences.
pub fn finite_difference_check(
    case: &CheckCase,
    analytic: &[Tensor<f64>],
    settings: &GradCheckSettings,
) -> Result<Vec<CheckOutcome>> {
    if analytic.len() != case.inputs.len() {
        return Err(Error::Config(format!(
            "gradcheck '{}': {} gradients for {} inputs",
            case.name,
            analytic.len(),
            case.inputs.len()
        )));
    }
    let h = settings.step;
    let mut outcomes = Vec::new();
    let mut work = case.inputs.to_vec();
    for ti in 0..case.inputs.len() {
        let len = case.inputs[ti].len();
        let entries = sample_entries(len, settings.max_entries, settings.seed, ti as u64);
        let mut worst = 0.0f64;
        for &e in &entries {
            let original = work[ti].data()[e];
            work[ti].data_mut()[e] = original + h;
            let plus = loss_value(case, &work)?;
            work[ti].data_mut()[e] = original - h;
            let minus = loss_value(case, &work)?;
            work[ti].data_mut()[e] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = relative_error(analytic[ti].data()[e], numeric);
            if rel > worst {
                worst = rel;
            }
        }
        outcomes.push(CheckOutcome {
            case: case.name.clone(),
            tensor: case.input_names[ti].clone(),
            worst_rel: worst,
            checked_entries: entries.len(),
            pass: worst < settings.tolerance,
        });
    }
    Ok(outcomes)
}

/// Analytic gradients followed by the finite-difference comparison.
pub fn run_case(case: &CheckCase, settings: &GradCheckSettings) -> Result<Vec<CheckOutcome>> {
    let analytic = analytic_gradients(case)?;
    finite_difference_check(case, &analytic, settings)
}

fn sample_entries(len: usize, max: usize, seed: u64, tensor_idx: u64) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut rng = SplitMix64::stream(seed, &[0x9c, tensor_idx]);
    let mut picked = vec![0, len - 1];
    while picked.len() < max {
        let e = rng.next_below(len as u64) as usize;
        if !picked.contains(&e) {
            picked.push(e);
        }
    }
    picked.sort_unstable();
    picked
}

fn randn(shape: &[usize], rng: &mut SplitMix64, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.next_normal() * scale)
}

/// Normal draw kept away from zero, for inputs that feed a ReLU kink or a
/// logarithm directly.
fn randn_offset(shape: &[usize], rng: &mut SplitMix64, scale: f64, margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.next_normal() * scale;
        v + margin * v.signum()
    })
}

/// Isolated checks for every layer type the network uses.
pub fn layer_cases(seed: u64) -> Vec<CheckCase> {
    let mut rng = SplitMix64::stream(seed, &[0xca5e]);
    let mut cases: Vec<CheckCase> = Vec::new();

    {
        let coeffs = randn(&[2, 3, 4, 3], &mut rng, 1.0);
        cases.push(CheckCase {
            name: "conv2d_relu".into(),
            input_names: vec!["x".into(), "w".into(), "b".into()],
            inputs: vec![
                randn(&[2, 2, 6, 5], &mut rng, 0.8),
                randn(&[3, 2, 3, 3], &mut rng, 0.5),
                randn_offset(&[3], &mut rng, 0.4, 0.1),
            ],
            build: Box::new(move |tape, ids| {
                let y = tape.conv2d_relu(ids[0], ids[1], ids[2], 1, true)?;
                tape.weighted_sum(y, coeffs.clone())
            }),
        });
    }
    {
        let coeffs = randn(&[1, 2, 3, 3], &mut rng, 1.0);
        cases.push(CheckCase {
            name: "conv2d_linear_stride2".into(),
            input_names: vec!["x".into(), "w".into(), "b".into()],
            inputs: vec![
                randn(&[1, 1, 7, 7], &mut rng, 0.8),
                randn(&[2, 1, 3, 3], &mut rng, 0.5),
                randn(&[2], &mut rng, 0.4),
            ],
            build: Box::new(move |tape, ids| {
                let y = tape.conv2d_relu(ids[0], ids[1], ids[2], 2, false)?;
                tape.weighted_sum(y, coeffs.clone())
            }),
        });
    }
    {
        let coeffs = randn(&[2, 3, 2, 2], &mut rng, 1.0);
        cases.push(CheckCase {
            name: "avg_pool_2x2".into(),
            input_names: vec!["x".into()],
            inputs: vec![randn(&[2, 3, 4, 4], &mut rng, 1.0)],
            build: Box::new(move |tape, ids| {
                let y = tape.avg_pool_2x2(ids[0])?;
                tape.weighted_sum(y, coeffs.clone())
            }),
        });
    }
    {
        let coeffs = randn(&[3, 4], &mut rng, 1.0);
        cases.push(CheckCase {
            name: "dense".into(),
            input_names: vec!["x".into(), "w".into(), "b".into()],
            inputs: vec![
                randn(&[3, 5], &mut rng, 1.0),
                randn(&[5, 4], &mut rng, 0.6),
                randn(&[4], &mut rng, 0.5),
            ],
            build: Box::new(move |tape, ids| {
                let y = tape.dense(ids[0], ids[1], ids[2])?;
                tape.weighted_sum(y, coeffs.clone())
            }),
        });
    }
    {
        let coeffs = randn(&[4, 7], &mut rng, 1.0);
        cases.push(CheckCase {
            name: "relu".into(),
            input_names: vec!["x".into()],
            // Entries are kept away from the kink so h = 1e-3 cannot cross it.
            inputs: vec![randn_offset(&[4, 7], &mut rng, 1.0, 0.05)],
            build: Box::new(move |tape, ids| {
                let y = tape.relu(ids[0]);
                tape.weighted_sum(y, coeffs.clone())
            }),
        });
    }
    {
        let coeffs = randn(&[5, 6], &mut rng, 1.0);
        cases.push(CheckCase {
            name: "dropout_train".into(),
            input_names: vec!["x".into()],
            inputs: vec![randn(&[5, 6], &mut rng, 1.0)],
            build: Box::new(move |tape, ids| {
                let key = crate::autograd::DropoutKey::new(7, 3, 11);
                let y = tape.dropout(ids[0], 0.4, Mode::Train, key)?;
                tape.weighted_sum(y, coeffs.clone())
            }),
        });
    }
    {
        cases.push(CheckCase {
            name: "softmax_cross_entropy".into(),
            input_names: vec!["logits".into()],
            inputs: vec![randn(&[3, 7], &mut rng, 2.0)],
            build: Box::new(|tape, ids| {
                let (loss, _) = tape.softmax_cross_entropy(ids[0], &[2, 0, 6])?;
                Ok(loss)
            }),
        });
    }
    {
        cases.push(CheckCase {
            name: "softmax_then_nll".into(),
            input_names: vec!["logits".into()],
            inputs: vec![randn(&[2, 5], &mut rng, 1.5)],
            build: Box::new(|tape, ids| {
                let probs = tape.softmax_rows(ids[0])?;
                tape.nll_from_probs(probs, &[1, 4])
            }),
        });
    }
    {
        let coeffs = randn(&[3, 6], &mut rng, 1.0);
        cases.push(CheckCase {
            name: "softmax_rows".into(),
            input_names: vec!["x".into()],
            inputs: vec![randn(&[3, 6], &mut rng, 1.5)],
            build: Box::new(move |tape, ids| {
                let y = tape.softmax_rows(ids[0])?;
                tape.weighted_sum(y, coeffs.clone())
            }),
        });
    }
    {
        let coeffs = randn(&[2, 4, 1, 4, 4], &mut rng, 1.0);
        cases.push(CheckCase {
            name: "extract_patches".into(),
            input_names: vec!["images".into()],
            inputs: vec![randn(&[2, 1, 6, 6], &mut rng, 1.0)],
            build: Box::new(move |tape, ids| {
                let y = tape.extract_patches(ids[0], 4, 2)?;
                tape.weighted_sum(y, coeffs.clone())
            }),
        });
    }
    {
        let coeffs = randn(&[3, 2], &mut rng, 1.0);
        cases.push(CheckCase {
            name: "mean_axis".into(),
            input_names: vec!["x".into()],
            inputs: vec![randn(&[3, 4, 2], &mut rng, 1.0)],
            build: Box::new(move |tape, ids| {
                let y = tape.mean_axis(ids[0], 1)?;
                tape.weighted_sum(y, coeffs.clone())
            }),
        });
    }
    {
        let coeffs = randn(&[3, 4], &mut rng, 1.0);
        cases.push(CheckCase {
            name: "reshape_add_scale".into(),
            input_names: vec!["a".into(), "b".into()],
            inputs: vec![randn(&[2, 6], &mut rng, 1.0), randn(&[2, 6], &mut rng, 1.0)],
            build: Box::new(move |tape, ids| {
                let a = tape.reshape(ids[0], &[3, 4])?;
                let b = tape.reshape(ids[1], &[3, 4])?;
                let s = tape.add(a, b)?;
                let s = tape.scale(s, 0.7);
                tape.weighted_sum(s, coeffs.clone())
            }),
        });
    }
    cases
}

/// The full composite (patch extraction, every kernel network, GAP, loss)
/// as one check case whose inputs are the model's parameter tensors in
/// `named_params` order. Images and labels are fixed, drawn from `seed`;
/// dropout runs in train mode with masks keyed by the same seed, so they
/// are constant across the finite-difference evaluations.
///
/// The weights are bounded uniform draws with bias 0.5, scaled per layer so
/// every pre-activation provably stays inside (0.1, 0.9): a two-sided
/// difference and the subgradient genuinely disagree at a ReLU kink, so the
/// check point must keep every unit strictly active across the whole
/// finite-difference neighborhood.
pub fn composite_case(config: &CnnicConfig, seed: u64, batch: usize) -> Result<CheckCase> {
    config.validate()?;
    let mut model: CnnicModel<f64> = CnnicModel::init(config.clone(), seed)?;
    let mut rng = SplitMix64::stream(seed, &[0xc0]);
    bounded_activation_weights(&mut model, &mut rng);

    let s = config.image_size;
    let images = Tensor::from_fn(&[batch, 1, s, s], |_| rng.next_f64());
    let labels: Vec<usize> = (0..batch)
        .map(|_| rng.next_below(config.num_classes as u64) as usize)
        .collect();

    let cfg = config.clone();
    let input_names = model.param_names();
    let inputs = model.to_flat();
    Ok(CheckCase {
        name: "cnnic_composite".into(),
        input_names,
        inputs,
        build: Box::new(move |tape, ids| {
            let images_id = tape.leaf(images.clone());
            let fwd = forward_from_ids(tape, &cfg, ids, images_id, Mode::Train, seed, 0)?;
            if cfg.softmax_per_patch {
                tape.nll_from_probs(fwd.combined, &labels)
            } else {
                let (loss, _) = tape.softmax_cross_entropy(fwd.combined, &labels)?;
                Ok(loss)
            }
        }),
    })
}

/// Overwrite a model's parameters so that |w·x| ≤ 0.4 holds layer by layer
/// (weights uniform in ±0.4/(fan_in·input_bound), biases 0.5). Inputs are
/// pixels in [0,1]; each layer's output bound feeds the next layer's scale,
/// with the 1/(1−p) dropout inflation included.
fn bounded_activation_weights(model: &mut CnnicModel<f64>, rng: &mut SplitMix64) {
    let inflate = 1.0 / (1.0 - model.config.dropout_p);
    for kernel in &mut model.kernels {
        let mut bound = 1.0; // patches are raw pixels
        for conv in &mut kernel.convs {
            let fan: usize = conv.weight.shape()[1..].iter().product();
            let scale = 0.4 / (fan as f64 * bound);
            conv.weight = Tensor::from_fn(conv.weight.shape(), |_| (2.0 * rng.next_f64() - 1.0) * scale);
            conv.bias = Tensor::filled(conv.bias.shape(), 0.5);
            bound = 0.9 * inflate; // relu ≤ 0.9, pooling is a mean, dropout scales
        }
        for layer in [&mut kernel.fc, &mut kernel.out] {
            let fan = layer.weight.shape()[0];
            let scale = 0.4 / (fan as f64 * bound);
            layer.weight = Tensor::from_fn(layer.weight.shape(), |_| (2.0 * rng.next_f64() - 1.0) * scale);
            layer.bias = Tensor::filled(layer.bias.shape(), 0.5);
            bound = 0.9 * inflate;
        }
    }
}

/// Every isolated layer case plus the composite for `config`, checked at
/// the given settings. The composite contributes one outcome per parameter
/// tensor.
pub fn full_report(
    config: &CnnicConfig,
    settings: &GradCheckSettings,
) -> Result<Vec<CheckOutcome>> {
    let mut outcomes = Vec::new();
    for case in layer_cases(settings.seed) {
        outcomes.extend(run_case(&case, settings)?);
    }
    let composite = composite_case(config, settings.seed, 2)?;
    outcomes.extend(run_case(&composite, settings)?);
    Ok(outcomes)
}
