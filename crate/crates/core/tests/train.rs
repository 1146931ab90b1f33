use decorr_core::data::{synthetic_splits, Dataset};
use decorr_core::decorrelation::correlation_matrix;
use decorr_core::model::{lookup, BlockSpec, InputShape, Model, ModelSpec, StageSpec};
use decorr_core::train::{evaluate, train, MetricsRecord, Split, TrainConfig};
use decorr_core::{Error, Tensor};

fn mini3() -> ModelSpec {
    lookup("mini3")
        .unwrap()
        .with_input(InputShape::new(3, 16, 16))
        .with_classes(4)
}

fn quick(lambda: f64, taps: Vec<usize>, epochs: usize) -> TrainConfig {
    TrainConfig {
        lambda,
        tap_stages: taps,
        epochs,
        batch_size: 16,
        eval_batch_size: 50,
        lr_initial: 0.1,
        lr_drop_epochs: vec![],
        augment: false,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn data() -> (Dataset, Dataset) {
    synthetic_splits(4, 100, 25, 7).unwrap()
}

fn strip_time(records: &[MetricsRecord]) -> Vec<MetricsRecord> {
    records
        .iter()
        .cloned()
        .map(|mut r| {
            r.wall_seconds = 0.0;
            r
        })
        .collect()
}

#[test]
fn zero_lambda_matches_pure_softmax_bitwise() {
    let (tr, te) = data();
    let a = Model::<f64>::build(&mini3(), 3).unwrap();
    let b = Model::<f64>::build(&mini3(), 3).unwrap();
    let ra = train(&a, &tr, &te, &quick(0.0, vec![0, 1, 2], 1)).unwrap();
    let rb = train(&b, &tr, &te, &quick(0.0, vec![], 1)).unwrap();
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
    for (x, y) in ra.records.iter().zip(&rb.records) {
        assert_eq!(x.softmax_loss.to_bits(), y.softmax_loss.to_bits());
        assert_eq!(x.accuracy, y.accuracy);
    }
}

#[test]
fn one_epoch_lowers_joint_objective() {
    let tr = decorr_core::data::synthetic_dataset(4, 100, 7).unwrap();
    let model = Model::<f64>::build(&mini3(), 7).unwrap();
    let cfg = TrainConfig {
        seed: 7,
        ..quick(1.0, vec![0, 1, 2], 1)
    };
    let before = evaluate(&model, &tr, &cfg.tap_stages, 1.0, 50).unwrap();
    let report = train(&model, &tr, &tr, &cfg).unwrap();
    let after = evaluate(&model, &tr, &cfg.tap_stages, 1.0, 50).unwrap();
    assert!(after.total_loss < before.total_loss, "{} -> {}", before.total_loss, after.total_loss);

    let steps = &report.steps;
    let head: f64 = steps[..5].iter().map(|s| s.loss.total).sum();
    let tail: f64 = steps[steps.len() - 5..].iter().map(|s| s.loss.total).sum();
    assert!(tail < head);
}

#[test]
fn step_losses_decompose() {
    let (tr, te) = data();
    let model = Model::<f64>::build(&mini3(), 1).unwrap();
    let report = train(&model, &tr, &te, &quick(0.7, vec![0, 2], 1)).unwrap();
    for s in &report.steps {
        let l = &s.loss;
        let rebuilt = l.softmax_loss + l.lambda * l.mfd_sum();
        assert!((rebuilt - l.total).abs() <= 1e-9 * l.total.abs(), "{l:?}");
        assert_eq!(l.mfd_per_stage.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 2]);
    }
}

#[test]
fn runs_are_deterministic() {
    let (tr, te) = data();
    let cfg = TrainConfig {
        augment: true,
        ..quick(1.0, vec![0, 1, 2], 2)
    };
    let run = || {
        let m = Model::<f64>::build(&mini3(), 5).unwrap();
        let r = train(&m, &tr, &te, &cfg).unwrap();
        (strip_time(&r.records), m.checkpoint().to_bytes())
    };
    assert_eq!(run(), run());
}

#[test]
fn single_precision_trains() {
    let (tr, te) = data();
    let m = Model::<f32>::build(&mini3(), 5).unwrap();
    let r = train(&m, &tr, &te, &quick(1.0, vec![0, 1, 2], 2)).unwrap();
    assert!(r.final_test().accuracy > 0.5);
}

#[test]
fn configuration_errors() {
    let (tr, te) = data();
    let m = Model::<f64>::build(&mini3(), 5).unwrap();
    assert!(matches!(train(&m, &tr, &te, &quick(1.0, vec![], 1)), Err(Error::Config(_))));
    assert!(matches!(
        train(&m, &tr, &te, &quick(1.0, vec![3], 1)),
        Err(Error::UnknownStage { .. })
    ));
    let wrong = Model::<f64>::build(&mini3().with_classes(5), 5).unwrap();
    assert!(matches!(train(&wrong, &tr, &te, &quick(0.0, vec![], 1)), Err(Error::Config(_))));
}

#[test]
fn records_cover_both_splits_each_epoch() {
    let (tr, te) = data();
    let m = Model::<f64>::build(&mini3(), 5).unwrap();
    let r = train(&m, &tr, &te, &quick(1.0, vec![0, 1, 2], 2)).unwrap();
    assert_eq!(r.split(Split::Train).count(), 2);
    assert_eq!(r.split(Split::Test).count(), 2);
    for rec in &r.records {
        assert!((0.0..=1.0).contains(&rec.accuracy));
        for (_, v) in &rec.mean_abs_corr_per_stage {
            assert!((0.0..=1.0).contains(v));
        }
    }
    assert_eq!(r.steps.len(), 2 * (400 / 16));
}

fn set_param(model: &Model<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let p = model
        .parameters()
        .into_iter()
        .find(|p| p.name() == name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    let shape = p.value().shape().to_vec();
    p.set_value(Tensor::from_fn(&shape, f)).unwrap();
}

#[test]
fn uniform_predictions_score_chance() {
    let (_, te) = data();
    let m = Model::<f64>::build(&mini3(), 5).unwrap();
    set_param(&m, "head.out.weight", |_| 0.0);
    set_param(&m, "head.out.bias", |_| 0.0);
    let rec = evaluate(&m, &te, &[], 0.0, 32).unwrap();
    assert!((rec.accuracy - 0.25).abs() < 1e-12);
}

#[test]
fn single_sample_evaluation() {
    let (_, te) = data();
    let one = te.take(1);
    let label = one.labels()[0];
    let m = Model::<f64>::build(&mini3(), 5).unwrap();
    set_param(&m, "head.out.weight", |_| 0.0);
    set_param(&m, "head.out.bias", |i| if i == label { 1.0 } else { 0.0 });
    let rec = evaluate(&m, &one, &[0, 1], 1.0, 8).unwrap();
    assert_eq!(rec.accuracy, 1.0);
}

/// Stage 0 is conv -> relu with `d` output channels where channel `k + d/2`
/// copies channel `k`.
fn duplicated_stage_model(d: usize) -> Model<f64> {
    let spec = ModelSpec {
        name: "dup".into(),
        input: InputShape::new(3, 16, 16),
        stages: vec![
            StageSpec {
                blocks: vec![
                    BlockSpec::Conv {
                        out_channels: d,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                        bias: false,
                    },
                    BlockSpec::Relu,
                ],
                output_channels: d,
                downsample: false,
                tap_after: None,
            },
            StageSpec::conv_bn_relu(4, true),
        ],
        classifier: decorr_core::model::ClassifierSpec { hidden: 0, classes: 4 },
    };
    let m = Model::<f64>::build(&spec, 11).unwrap();
    let w = m.parameters()[0].value().clone();
    let per = w.numel() / d;
    let half = d / 2;
    set_param(&m, "stage0.0.conv.weight", |i| {
        let (ch, rest) = (i / per, i % per);
        w.data()[(ch % half) * per + rest]
    });
    m
}

#[test]
fn duplicated_channels_raise_stage_correlation() {
    let (_, te) = data();
    for d in [2usize, 4] {
        let m = duplicated_stage_model(d);
        let rec = evaluate(&m, &te, &[0], 0.0, 50).unwrap();
        let got = rec.mean_abs_corr(0).unwrap();
        // d/2 perfectly correlated pairs among d(d-1)/2 off-diagonal pairs
        let floor = 1.0 / (d as f64 - 1.0);
        assert!(got >= floor - 1e-12, "d={d}: {got}");
        if d == 2 {
            assert!(got >= 0.5);
        }
        let (_, taps) = m.predict(&te.images().cast::<f64>(), &[0]).unwrap();
        let f = correlation_matrix(&taps[0].1).unwrap();
        for k in 0..d / 2 {
            assert!((f.get(k, k + d / 2) - 1.0).abs() < 1e-9);
        }
    }
}
