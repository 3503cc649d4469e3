//! Subcommand implementations, generic over the run precision.

use std::path::Path;

use cnnic::checkpoint::Container;
use cnnic::data::{Dataset, Split};
use cnnic::error::{Error, Result};
use cnnic::gradcheck::{full_report, GradCheckSettings};
use cnnic::metrics::{
    ambiguity_decomposition, evaluate, members_from_logit_map, one_hot, overfitting_index,
    EvalReport,
};
use cnnic::net::{cnnic_forward, count_parameters};
use cnnic::scalar::Scalar;
use cnnic::train::{load_state, train, TrainOptions, TrainingState};
use cnnic::{Mode, Tensor};

use crate::config::RunConfig;

fn load_train_split<T: Scalar>(config: &RunConfig) -> Result<Dataset<T>> {
    let paths = config.data_paths()?;
    let data = cnnic_data::load_split::<T>(&paths.train_images, &paths.train_labels, Split::Train)?;
    match config.subset {
        Some(n) => data.subset(n.min(data.len())),
        None => Ok(data),
    }
}

fn load_test_split<T: Scalar>(config: &RunConfig) -> Result<Dataset<T>> {
    let paths = config.data_paths()?;
    cnnic_data::load_split::<T>(&paths.test_images, &paths.test_labels, Split::Test)
}

pub fn run_train<T: Scalar>(config: &RunConfig) -> Result<()> {
    config.model.validate()?;
    let data = load_train_split::<T>(config)?;
    let probe = if config.probe_size > 0 {
        let test = load_test_split::<T>(config)?;
        Some(test.subset(config.probe_size.min(test.len()))?)
    } else {
        None
    };
    println!(
        "training: {} images, batch {}, {} epoch(s){}, seed {}",
        data.len(),
        config.batch_size,
        config.epochs,
        config
            .max_steps
            .map(|s| format!(", max {s} steps"))
            .unwrap_or_default(),
        config.seed
    );
    let opts = TrainOptions {
        epochs: config.epochs,
        batch_size: config.batch_size,
        seed: config.seed,
        optim: config.optim.clone(),
        max_steps: config.max_steps,
        eval_every: config.eval_every,
        checkpoint_every: config.checkpoint_every,
        out_dir: Some(config.out_dir.clone()),
    };
    let outcome = train(config.model.clone(), &opts, &data, probe.as_ref())?;
    match outcome.rows.last() {
        Some(last) => println!(
            "done: step {} lr {} train_loss {:.6} train_acc {:.4} test_acc {:.4}",
            last.step, last.lr, last.train_loss, last.train_acc, last.test_acc
        ),
        None => println!("done: no steps taken (epochs or max_steps was 0)"),
    }
    println!(
        "wrote {} and {}",
        config.out_dir.join(cnnic::train::METRICS_FILE).display(),
        config.out_dir.join(cnnic::train::CHECKPOINT_FILE).display()
    );
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Container> {
    Container::load(path)
}

fn report_block(split: &str, report: &EvalReport) -> String {
    format!(
        "{split}: {} / {} wrong, error rate {:.4}%",
        report.error_count,
        report.sample_count,
        report.error_rate() * 100.0
    )
}

pub fn run_eval<T: Scalar>(container: &Container, config: &RunConfig) -> Result<()> {
    let (state, _): (TrainingState<T>, _) = load_state(container)?;
    let train_data = load_train_split::<T>(config)?;
    let test_data = load_test_split::<T>(config)?;

    let train_report = evaluate(&state.model, &train_data, 100)?;
    let test_report = evaluate(&state.model, &test_data, 100)?;
    println!("{}", report_block("train", &train_report));
    println!("{}", report_block("test", &test_report));

    let o = overfitting_index(
        train_report.error_count,
        train_report.sample_count,
        test_report.error_count,
        test_report.sample_count,
    )?;
    // (adding 0.0 keeps a zero index from printing as "-0")
    println!("overfitting index O (train minus test): {o}");
    println!("test-minus-train: {}", -o + 0.0);

    std::fs::create_dir_all(&config.out_dir)?;
    let path = config.out_dir.join("eval_report.json");
    std::fs::write(&path, eval_json(&train_report, &test_report, o))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn confusion_json(report: &EvalReport) -> String {
    let rows: Vec<String> = report
        .confusion
        .iter()
        .map(|row| {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            format!("[{}]", cells.join(","))
        })
        .collect();
    format!("[{}]", rows.join(","))
}

fn eval_json(train: &EvalReport, test: &EvalReport, o: f64) -> String {
    let split = |r: &EvalReport| {
        format!(
            "{{\"error_count\":{},\"sample_count\":{},\"error_rate\":{},\"confusion\":{}}}",
            r.error_count,
            r.sample_count,
            r.error_rate(),
            confusion_json(r)
        )
    };
    format!(
        "{{\"train\":{},\"test\":{},\"overfitting_index\":{},\"test_minus_train\":{}}}\n",
        split(train),
        split(test),
        o,
        -o + 0.0
    )
}

pub fn run_count_params(config: &RunConfig) -> Result<()> {
    let (total, per_layer) = count_parameters(&config.model)?;
    let width = per_layer.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    println!(
        "{} preset, patch {}, {} kernel(s):",
        config.model.preset.name(),
        config.model.patch_size,
        config.model.num_kernels
    );
    for (name, count) in &per_layer {
        println!("  {name:width$}  {count:>9}");
    }
    println!("  {:width$}  {total:>9}", "total");
    Ok(())
}

pub fn run_gradcheck(config: &RunConfig, seed: u64) -> Result<()> {
    let settings = GradCheckSettings {
        seed,
        ..GradCheckSettings::default()
    };
    println!(
        "finite differences at step {} against tape gradients, tolerance {} (f64)",
        settings.step, settings.tolerance
    );
    let outcomes = full_report(&config.model, &settings)?;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for o in &outcomes {
        println!(
            "  {:<20} {:<22} rel {:>9.3e}  ({:>3} entries)  {}",
            o.case,
            o.tensor,
            o.worst_rel,
            o.checked_entries,
            if o.pass { "pass" } else { "FAIL" }
        );
        worst = worst.max(o.worst_rel);
        failures += usize::from(!o.pass);
    }
    println!("worst relative error: {worst:.3e}");
    if failures > 0 {
        return Err(Error::NonFinite(format!(
            "{failures} gradient check(s) exceeded tolerance"
        )));
    }
    println!("all {} checks passed", outcomes.len());
    Ok(())
}

pub fn run_ambiguity<T: Scalar>(container: &Container, config: &RunConfig) -> Result<()> {
    let (state, _): (TrainingState<T>, _) = load_state(container)?;
    let test = load_test_split::<T>(config)?;
    let take = config.subset.unwrap_or(256).min(test.len());
    let data = test.subset(take)?;
    let classes = state.model.config.num_classes;

    // Per-member softmaxed outputs accumulated over evaluation batches.
    let mut members: Vec<Vec<T>> = Vec::new();
    let mut targets: Vec<T> = Vec::new();
    let mut start = 0;
    while start < data.len() {
        let end = (start + 100).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = data.gather(&idx)?;
        let out = cnnic_forward(&state.model, &images, Mode::Infer, 0, 0)?;
        let batch_members = members_from_logit_map(&out.logit_map)?;
        if members.is_empty() {
            members = vec![Vec::new(); batch_members.len()];
        }
        for (acc, m) in members.iter_mut().zip(batch_members.iter()) {
            acc.extend_from_slice(m.data());
        }
        targets.extend_from_slice(one_hot::<T>(&labels, classes)?.data());
        start = end;
    }
    let member_tensors: Vec<Tensor<T>> = members
        .into_iter()
        .map(|d| Tensor::new(vec![data.len(), classes], d))
        .collect::<Result<_>>()?;
    let targets = Tensor::new(vec![data.len(), classes], targets)?;
    let (e, e_bar, a_bar) = ambiguity_decomposition(&member_tensors, &targets)?;
    let residual = e - (e_bar - a_bar);

    println!(
        "quadratic-loss decomposition over {} members ({} kernel(s) x {} positions), {} samples:",
        member_tensors.len(),
        state.model.config.num_kernels,
        member_tensors.len() / state.model.config.num_kernels,
        data.len()
    );
    println!("  ensemble error      E  = {e}");
    println!("  mean member error   E* = {e_bar}");
    println!("  mean ambiguity      A* = {a_bar}");
    println!("  identity residual E - (E* - A*) = {residual:e}");

    std::fs::create_dir_all(&config.out_dir)?;
    let path = config.out_dir.join("ambiguity.json");
    std::fs::write(
        &path,
        format!(
            "{{\"loss\":\"quadratic\",\"members\":{},\"samples\":{},\"ensemble_mse\":{e},\"mean_member_mse\":{e_bar},\"mean_ambiguity\":{a_bar},\"identity_residual\":{residual}}}\n",
            member_tensors.len(),
            data.len()
        ),
    )?;
    println!("wrote {}", path.display());
    Ok(())
}
