use std::path::{Path, PathBuf};

use decorr_core::data::{Batches, Dataset};
use decorr_core::decorrelation::correlation_matrix;
use decorr_core::model::{Checkpoint, Model, ModelSpec};
use decorr_core::train::{evaluate, train_with, write_metrics_csv, write_steps_csv, MetricsRecord, Split, TrainConfig, TrainReport};
use decorr_core::{Precision, Scalar, Tensor};

use crate::config::Resolved;
use crate::datasets::{fit_spec, load_splits};
use crate::error::CliError;
use crate::feature_dump::FeatureDump;
use crate::output::{csv_bytes, mean_std, write_atomic};
use crate::pgm::encode_pgm;

pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SNAPSHOT_FILE: &str = "resolved_config.toml";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const CORR_REPORT_FILE: &str = "corr_report.csv";
pub const EVAL_FILE: &str = "eval.csv";

macro_rules! dispatch {
    ($precision:expr, $f:ident($($arg:expr),* $(,)?)) => {
        match $precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn log(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn fmt_stages(pairs: &[(usize, f64)]) -> String {
    pairs
        .iter()
        .map(|(s, v)| format!("s{s}={v:.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// One training run inside an experiment.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub report: TrainReport,
}

fn train_one<T: Scalar>(
    spec: &ModelSpec,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    quiet: bool,
) -> Result<(TrainReport, Vec<u8>), CliError> {
    let model = Model::<T>::build(spec, cfg.seed)?;
    let report = train_with(&model, train_set, test_set, cfg, |r| {
        log(
            quiet,
            format!(
                "epoch {:>3} {:<5} acc {:.4} softmax {:.4} total {:.4} corr [{}]",
                r.epoch,
                r.split,
                r.accuracy,
                r.softmax_loss,
                r.total_loss,
                fmt_stages(&r.mean_abs_corr_per_stage)
            ),
        )
    })?;
    Ok((report, model.checkpoint().to_bytes()))
}

fn run_experiment(
    r: &Resolved,
    train_set: &Dataset,
    test_set: &Dataset,
    quiet: bool,
) -> Result<Vec<RunOutcome>, CliError> {
    let spec = fit_spec(&r.spec, train_set)?;
    write_atomic(&r.out.join(SNAPSHOT_FILE), r.config.to_toml_string().as_bytes())?;
    let mut runs = Vec::with_capacity(r.repeats);
    for k in 0..r.repeats {
        let seed = r.train.seed.wrapping_add(k as u64);
        let cfg = TrainConfig {
            seed,
            ..r.train.clone()
        };
        let dir = if r.repeats == 1 {
            r.out.clone()
        } else {
            r.out.join(format!("repeat_{k}"))
        };
        log(quiet, format!("run {} of {}: seed {seed}, lambda {}", k + 1, r.repeats, cfg.lambda));
        let (report, ckpt) = dispatch!(cfg.precision, train_one(&spec, train_set, test_set, &cfg, quiet))?;
        let mut metrics = Vec::new();
        write_metrics_csv(&mut metrics, &report.records)?;
        let mut steps = Vec::new();
        write_steps_csv(&mut steps, &report.steps)?;
        write_atomic(&dir.join(METRICS_FILE), &metrics)?;
        write_atomic(&dir.join(STEPS_FILE), &steps)?;
        write_atomic(&dir.join(CHECKPOINT_FILE), &ckpt)?;
        runs.push(RunOutcome { seed, dir, report });
    }
    if r.repeats > 1 {
        let (header, row) = summary_row(&r.train.tap_stages, &runs);
        let mut full_header = vec!["repeats".to_string()];
        full_header.extend(header);
        let mut full_row = vec![r.repeats.to_string()];
        full_row.extend(row);
        write_atomic(&r.out.join(SUMMARY_FILE), &csv_bytes(&full_header, &[full_row])?)?;
    }
    Ok(runs)
}

/// Mean and standard deviation of final test metrics across runs.
fn summary_row(taps: &[usize], runs: &[RunOutcome]) -> (Vec<String>, Vec<String>) {
    let mut taps = taps.to_vec();
    taps.sort_unstable();
    let finals: Vec<&MetricsRecord> = runs.iter().map(|r| r.report.final_test()).collect();
    let mut header = Vec::new();
    let mut row = Vec::new();
    let mut push = |name: String, values: Vec<f64>| {
        let (m, s) = mean_std(&values);
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_std"));
        row.push(m.to_string());
        row.push(s.to_string());
    };
    push("accuracy".into(), finals.iter().map(|f| f.accuracy).collect());
    push("softmax_loss".into(), finals.iter().map(|f| f.softmax_loss).collect());
    for &s in &taps {
        push(
            format!("meanabscorr_stage_{s}"),
            finals.iter().map(|f| f.mean_abs_corr(s).unwrap_or(f64::NAN)).collect(),
        );
    }
    (header, row)
}

pub fn cmd_train(r: &Resolved, quiet: bool) -> Result<Vec<RunOutcome>, CliError> {
    let (train_set, test_set) = load_splits(&r.config.dataset, r.data_root.as_deref())?;
    let runs = run_experiment(r, &train_set, &test_set, quiet)?;
    for run in &runs {
        let f = run.report.final_test();
        println!(
            "seed {}: test accuracy {:.4}, mean |corr| [{}] -> {}",
            run.seed,
            f.accuracy,
            fmt_stages(&f.mean_abs_corr_per_stage),
            run.dir.display()
        );
    }
    Ok(runs)
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub lambda: f64,
    pub runs: Vec<RunOutcome>,
}

impl SweepEntry {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.report.final_test().accuracy).collect()
    }
}

pub fn lambda_dir_name(lambda: f64) -> String {
    format!("lambda_{lambda}")
}

pub fn cmd_lambda_sweep(r: &Resolved, lambdas: &[f64], quiet: bool) -> Result<Vec<SweepEntry>, CliError> {
    if lambdas.len() < 2 {
        return Err(CliError::Config("a sweep needs at least two lambda values".into()));
    }
    for (i, a) in lambdas.iter().enumerate() {
        if !(a.is_finite() && *a >= 0.0) {
            return Err(CliError::Config(format!("lambda {a} must be finite and >= 0")));
        }
        if lambdas[..i].contains(a) {
            return Err(CliError::Config(format!("lambda {a} appears more than once")));
        }
    }
    let mut subs = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut sub = r.clone();
        sub.train.lambda = lambda;
        sub.train.validate()?;
        sub.config.train.lambda = Some(lambda);
        sub.out = r.out.join(lambda_dir_name(lambda));
        sub.config.out_dir = Some(sub.out.clone());
        subs.push(sub);
    }
    let (train_set, test_set) = load_splits(&r.config.dataset, r.data_root.as_deref())?;
    let mut entries = Vec::with_capacity(lambdas.len());
    for sub in &subs {
        log(quiet, format!("lambda {}", sub.train.lambda));
        let runs = run_experiment(sub, &train_set, &test_set, quiet)?;
        entries.push(SweepEntry {
            lambda: sub.train.lambda,
            runs,
        });
    }

    let mut header = vec!["lambda".to_string(), "repeats".to_string()];
    let mut rows = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        let (h, vals) = summary_row(&r.train.tap_stages, &e.runs);
        if i == 0 {
            header.extend(h);
        }
        let mut row = vec![e.lambda.to_string(), e.runs.len().to_string()];
        row.extend(vals);
        rows.push(row);
    }
    write_atomic(&r.out.join(SWEEP_FILE), &csv_bytes(&header, &rows)?)?;
    for e in &entries {
        let (m, s) = mean_std(&e.accuracies());
        println!("lambda {:<8} accuracy {m:.4} +- {s:.4}", e.lambda);
    }
    Ok(entries)
}

fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64, checkpoint: Option<&Path>) -> Result<Model<T>, CliError> {
    let model = Model::<T>::build(spec, seed)?;
    if let Some(path) = checkpoint {
        let ckpt = Checkpoint::read(path).map_err(|e| match e {
            decorr_core::Error::Io(source) => CliError::io(path, source),
            other => CliError::from(other),
        })?;
        model.load_checkpoint(&ckpt).map_err(|e| match e {
            decorr_core::Error::DigestMismatch => CliError::Config(format!(
                "{} was saved for a different model or dataset shape",
                path.display()
            )),
            other => other.into(),
        })?;
    }
    Ok(model)
}

fn check_stages(spec: &ModelSpec, stages: &[usize]) -> Result<(), CliError> {
    match stages.iter().find(|&&s| s >= spec.num_stages()) {
        Some(s) => Err(CliError::Config(format!(
            "stage {s} does not exist; {} has {} stages",
            spec.name,
            spec.num_stages()
        ))),
        None => Ok(()),
    }
}

/// Per-stage correlation statistics over a dataset split.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrRow {
    pub stage: usize,
    pub channels: usize,
    pub mean_abs_corr: f64,
    pub mfd_loss: f64,
    /// Channels with zero variance in every batch.
    pub zero_variance_channels: usize,
}

fn corr_rows<T: Scalar>(
    spec: &ModelSpec,
    seed: u64,
    checkpoint: Option<&Path>,
    data: &Dataset,
    stages: &[usize],
    batch_size: usize,
) -> Result<Vec<CorrRow>, CliError> {
    let model = build_model::<T>(spec, seed, checkpoint)?;
    let shapes = model.stage_shapes().to_vec();
    let mut sums: Vec<(f64, f64, usize, Vec<bool>)> = stages
        .iter()
        .map(|&s| (0.0, 0.0, 0, vec![true; shapes[s].channels]))
        .collect();
    for batch in Batches::<T>::eval(data, batch_size.min(data.len()))? {
        if batch.labels.len() < 2 {
            continue;
        }
        let (_, taps) = model.predict(&batch.images, stages)?;
        for (slot, (_, acts)) in sums.iter_mut().zip(&taps) {
            let f = correlation_matrix(acts)?;
            slot.0 += f.mean_abs_offdiag();
            slot.1 += f.mfd_loss();
            slot.2 += 1;
            let dead = f.zero_variance_channels();
            for (c, flag) in slot.3.iter_mut().enumerate() {
                *flag &= dead.contains(&c);
            }
        }
    }
    Ok(stages
        .iter()
        .zip(sums)
        .map(|(&stage, (corr, mfd, n, dead))| {
            let n = n.max(1) as f64;
            CorrRow {
                stage,
                channels: shapes[stage].channels,
                mean_abs_corr: corr / n,
                mfd_loss: mfd / n,
                zero_variance_channels: dead.iter().filter(|&&d| d).count(),
            }
        })
        .collect())
}

pub fn cmd_corr_report(
    r: &Resolved,
    checkpoint: Option<&Path>,
    stages: &[usize],
    split: Split,
) -> Result<Vec<CorrRow>, CliError> {
    let (train_set, test_set) = load_splits(&r.config.dataset, r.data_root.as_deref())?;
    let spec = fit_spec(&r.spec, &train_set)?;
    let stages: Vec<usize> = if stages.is_empty() {
        (0..spec.num_stages()).collect()
    } else {
        let mut s = stages.to_vec();
        s.sort_unstable();
        s.dedup();
        s
    };
    check_stages(&spec, &stages)?;
    let data = match split {
        Split::Train => &train_set,
        Split::Test => &test_set,
    };
    let rows = dispatch!(
        r.train.precision,
        corr_rows(&spec, r.train.seed, checkpoint, data, &stages, r.train.eval_batch_size)
    )?;
    let header: Vec<String> = ["stage", "channels", "mean_abs_corr", "mfd_loss", "zero_variance_channels"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            vec![
                row.stage.to_string(),
                row.channels.to_string(),
                row.mean_abs_corr.to_string(),
                row.mfd_loss.to_string(),
                row.zero_variance_channels.to_string(),
            ]
        })
        .collect();
    write_atomic(&r.out.join(CORR_REPORT_FILE), &csv_bytes(&header, &table)?)?;
    println!("{:>5} {:>8} {:>13} {:>10} {:>13}", "stage", "channels", "mean |corr|", "mfd", "zero-var");
    for row in &rows {
        println!(
            "{:>5} {:>8} {:>13.6} {:>10.6} {:>13}",
            row.stage, row.channels, row.mean_abs_corr, row.mfd_loss, row.zero_variance_channels
        );
    }
    Ok(rows)
}

fn stage_activations<T: Scalar>(
    spec: &ModelSpec,
    seed: u64,
    checkpoint: Option<&Path>,
    images: &Tensor<f32>,
    stage: usize,
) -> Result<Tensor<f32>, CliError> {
    let model = build_model::<T>(spec, seed, checkpoint)?;
    let (_, taps) = model.predict(&images.cast::<T>(), &[stage])?;
    Ok(taps[0].1.cast::<f32>())
}

pub fn feature_dump_name(stage: usize) -> String {
    format!("features_stage{stage}.bin")
}

/// Dumps stage activations of the first `samples` test images, plus one PGM
/// per sample and channel when `pgm` is set.
pub fn cmd_dump_features(
    r: &Resolved,
    checkpoint: Option<&Path>,
    stage: usize,
    samples: usize,
    pgm: bool,
) -> Result<PathBuf, CliError> {
    let (train_set, test_set) = load_splits(&r.config.dataset, r.data_root.as_deref())?;
    let spec = fit_spec(&r.spec, &train_set)?;
    check_stages(&spec, &[stage])?;
    if samples == 0 || samples > test_set.len() {
        return Err(CliError::Config(format!(
            "sample count {samples} must be between 1 and the test set size {}",
            test_set.len()
        )));
    }
    let subset = test_set.take(samples);
    let acts = dispatch!(
        r.train.precision,
        stage_activations(&spec, r.train.seed, checkpoint, subset.images(), stage)
    )?;
    let dump = FeatureDump {
        stage: stage as u32,
        values: acts,
    };
    let path = r.out.join(feature_dump_name(stage));
    write_atomic(&path, &dump.to_bytes())?;
    if pgm {
        let s = dump.values.shape().to_vec();
        let (d, h, w) = (s[1], s[2], s[3]);
        let dir = r.out.join(format!("pgm_stage{stage}"));
        for (i, map) in dump.values.data().chunks_exact(h * w).enumerate() {
            let name = format!("sample{}_ch{}.pgm", i / d, i % d);
            write_atomic(&dir.join(name), &encode_pgm(map, h, w))?;
        }
    }
    println!("wrote {} ({:?})", path.display(), dump.values.shape());
    Ok(path)
}

fn evaluate_checkpoint<T: Scalar>(
    spec: &ModelSpec,
    seed: u64,
    checkpoint: &Path,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<MetricsRecord, CliError> {
    let model = build_model::<T>(spec, seed, Some(checkpoint))?;
    Ok(evaluate(&model, data, &cfg.tap_stages, cfg.lambda, cfg.eval_batch_size)?)
}

pub fn cmd_eval(r: &Resolved, checkpoint: &Path, split: Split) -> Result<MetricsRecord, CliError> {
    let (train_set, test_set) = load_splits(&r.config.dataset, r.data_root.as_deref())?;
    let spec = fit_spec(&r.spec, &train_set)?;
    let data = match split {
        Split::Train => &train_set,
        Split::Test => &test_set,
    };
    let mut rec = dispatch!(
        r.train.precision,
        evaluate_checkpoint(&spec, r.train.seed, checkpoint, data, &r.train)
    )?;
    rec.split = split;
    let mut bytes = Vec::new();
    write_metrics_csv(&mut bytes, std::slice::from_ref(&rec))?;
    write_atomic(&r.out.join(EVAL_FILE), &bytes)?;
    println!(
        "{split} accuracy {:.4}, softmax loss {:.4}, mean |corr| [{}]",
        rec.accuracy,
        rec.softmax_loss,
        fmt_stages(&rec.mean_abs_corr_per_stage)
    );
    Ok(rec)
}
