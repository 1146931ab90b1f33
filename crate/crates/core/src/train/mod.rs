//! Optimization of a staged model under the joint objective.

mod config;
mod metrics;
mod optim;

use std::time::Instant;

use crate::autodiff::Tape;
use crate::data::{AugmentationPolicy, Batches, Dataset};
use crate::decorrelation::{correlation_matrix, joint_loss, softmax_cross_entropy};
use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use config::{lr_at, TrainConfig};
pub use metrics::{write_metrics_csv, write_steps_csv, MetricsRecord, Split, StepRecord};
pub use optim::{sgd_step, OptimizerState};

// Keeps the shuffle generator's key distinct from the one used for
// parameter initialization.
const SHUFFLE_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Everything a run produced besides the trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Test-split evaluation before the first update.
    pub initial: MetricsRecord,
    /// A train record and a test record per epoch, in that order.
    pub records: Vec<MetricsRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainReport {
    pub fn final_test(&self) -> &MetricsRecord {
        self.records
            .iter()
            .rev()
            .find(|r| r.split == Split::Test)
            .expect("at least one epoch")
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &MetricsRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

fn check_compatible<T: Scalar>(model: &Model<T>, data: &Dataset, what: &str) -> Result<()> {
    let spec = model.spec();
    if data.class_count() != spec.classifier.classes {
        return Err(Error::Config(format!(
            "{what} has {} classes but the model predicts {}",
            data.class_count(),
            spec.classifier.classes
        )));
    }
    let (c, h, w) = data.image_shape();
    let want = spec.input;
    if (c, h, w) != (want.channels, want.height, want.width) {
        return Err(Error::Config(format!(
            "{what} images are {c}x{h}x{w} but the model expects {}x{}x{}",
            want.channels, want.height, want.width
        )));
    }
    Ok(())
}

fn check_taps<T: Scalar>(model: &Model<T>, taps: &[usize]) -> Result<()> {
    match taps.iter().find(|&&s| s >= model.num_stages()) {
        Some(&stage) => Err(Error::UnknownStage {
            stage,
            stages: model.num_stages(),
        }),
        None => Ok(()),
    }
}

fn argmax_hits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

fn with_position(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{op} at epoch {epoch}, step {step}"),
        },
        other => other,
    }
}

#[derive(Default)]
struct Accumulator {
    softmax: f64,
    total: f64,
    hits: usize,
    samples: usize,
    batches: usize,
    mfd: Vec<(usize, f64, usize)>,
    corr: Vec<(usize, f64, usize)>,
}

impl Accumulator {
    fn new(taps: &[usize]) -> Self {
        Accumulator {
            mfd: taps.iter().map(|&s| (s, 0.0, 0)).collect(),
            corr: taps.iter().map(|&s| (s, 0.0, 0)).collect(),
            ..Default::default()
        }
    }

    fn add_stage(&mut self, stage: usize, mfd: f64, corr: f64) {
        for (slot, v) in [(&mut self.mfd, mfd), (&mut self.corr, corr)] {
            let e = slot.iter_mut().find(|e| e.0 == stage).expect("tapped stage");
            e.1 += v;
            e.2 += 1;
        }
    }

    fn finish(self, epoch: usize, split: Split, started: Instant) -> MetricsRecord {
        let mean = |v: Vec<(usize, f64, usize)>| {
            v.into_iter()
                .map(|(s, sum, n)| (s, if n > 0 { sum / n as f64 } else { f64::NAN }))
                .collect()
        };
        let b = self.batches.max(1) as f64;
        MetricsRecord {
            epoch,
            split,
            softmax_loss: self.softmax / b,
            total_loss: self.total / b,
            accuracy: self.hits as f64 / self.samples.max(1) as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
            mfd_per_stage: mean(self.mfd),
            mean_abs_corr_per_stage: mean(self.corr),
        }
    }
}

/// Evaluation-mode pass without gradient recording. Losses and stage
/// statistics are averaged over batches; batches of a single sample carry
/// no correlation and are left out of the stage averages.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    tap_stages: &[usize],
    lambda: f64,
    batch_size: usize,
) -> Result<MetricsRecord> {
    check_compatible(model, dataset, "dataset")?;
    check_taps(model, tap_stages)?;
    let mut taps = tap_stages.to_vec();
    taps.sort_unstable();
    let started = Instant::now();
    let mut acc = Accumulator::new(&taps);
    for batch in Batches::<T>::eval(dataset, batch_size.min(dataset.len()))? {
        let b = batch.labels.len();
        let want: &[usize] = if b >= 2 { &taps } else { &[] };
        let tape = Tape::inference();
        let out = model.forward(&tape, tape.constant(batch.images), want, Mode::Eval)?;
        let ce = softmax_cross_entropy(out.logits, &batch.labels)?.item().as_f64();
        let mut penalty = 0.0;
        for tap in &out.taps {
            let f = correlation_matrix(&tap.acts.value())?;
            let mfd = f.mfd_loss();
            penalty += mfd;
            acc.add_stage(tap.stage_id, mfd, f.mean_abs_offdiag());
        }
        acc.softmax += ce;
        acc.total += ce + lambda * penalty;
        acc.hits += argmax_hits(&out.logits.value(), &batch.labels);
        acc.samples += b;
        acc.batches += 1;
    }
    Ok(acc.finish(0, Split::Test, started))
}

/// Trains `model` in place. `on_record` sees every metrics record as soon
/// as it is produced.
pub fn train_with<T: Scalar>(
    model: &Model<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainReport> {
    config.validate()?;
    check_compatible(model, train_set, "training set")?;
    check_compatible(model, test_set, "test set")?;
    let taps = config.sorted_taps();
    check_taps(model, &taps)?;
    let (_, h, w) = train_set.image_shape();
    let policy = if config.augment {
        AugmentationPolicy {
            pad_mode: config.pad_mode,
            ..AugmentationPolicy::standard(h, w)
        }
    } else {
        AugmentationPolicy::disabled(h, w)
    };
    policy.validate(h, w)?;

    let mut initial = evaluate(model, test_set, &taps, config.lambda, config.eval_batch_size)?;
    initial.epoch = 0;

    let params = model.parameters();
    let mut state = OptimizerState::new(&params);
    let shuffle_seed = config.seed.wrapping_add(SHUFFLE_SEED_OFFSET);
    let mut records = Vec::with_capacity(2 * config.epochs);
    let mut steps = Vec::new();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, config);
        let mut acc = Accumulator::new(&taps);
        let batches = Batches::<T>::train(train_set, config.batch_size, shuffle_seed, epoch, &policy)?;
        for (step, batch) in batches.enumerate() {
            model.zero_grad();
            let tape = Tape::new();
            let out = model
                .forward(&tape, tape.constant(batch.images), &taps, Mode::Train)
                .map_err(|e| with_position(e, epoch, step))?;
            let loss = joint_loss(out.logits, &batch.labels, &out.taps, config.lambda)
                .map_err(|e| with_position(e, epoch, step))?;
            tape.backward(loss.total)
                .map_err(|e| with_position(e, epoch, step))?;
            sgd_step(&params, &mut state, lr, config.momentum, config.weight_decay)?;

            for ((stage, mfd), (_, f)) in loss.breakdown.mfd_per_stage.iter().zip(&loss.correlations) {
                acc.add_stage(*stage, *mfd, f.mean_abs_offdiag());
            }
            acc.softmax += loss.breakdown.softmax_loss;
            acc.total += loss.breakdown.total;
            acc.hits += argmax_hits(&out.logits.value(), &batch.labels);
            acc.samples += batch.labels.len();
            acc.batches += 1;
            steps.push(StepRecord {
                epoch,
                step,
                lr,
                loss: loss.breakdown,
            });
        }
        let train_record = acc.finish(epoch, Split::Train, started);
        on_record(&train_record);
        records.push(train_record);

        let mut test_record = evaluate(model, test_set, &taps, config.lambda, config.eval_batch_size)?;
        test_record.epoch = epoch;
        on_record(&test_record);
        records.push(test_record);
    }
    Ok(TrainReport {
        initial,
        records,
        steps,
    })
}

pub fn train<T: Scalar>(
    model: &Model<T>,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_with(model, train_set, test_set, config, |_| {})
}
