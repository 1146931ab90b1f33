//! Analytic gradients against central finite differences.

use decorr_core::autodiff::{RunningStats, Tape, Var};
use decorr_core::decorrelation::{
    correlation_matrix_tracked, mfd_loss_tracked, softmax_cross_entropy, StageActivations,
};
use decorr_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-5;
const INSTANCES: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// Values bounded away from 0, for kinks at the origin.
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Relative error `||analytic - numeric|| / max(||analytic||, ||numeric||)`
/// over all input coordinates.
fn gradient_error<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|v| tape.grad(*v).unwrap().into_data())
        .collect();

    let eval = |ins: &[Tensor<f64>]| {
        let t = Tape::inference();
        let vs: Vec<_> = ins.iter().map(|x| t.constant(x.clone())).collect();
        f(&t, &vs).unwrap().item()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= STEP;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * STEP));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric)).max(1e-12);
    norm(&diff) / scale
}

// Contracts an arbitrary output with fixed random weights into a scalar.
fn weighted_sum<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(random(&mut rng, &out.shape()));
    out.mul(w)?.sum()
}

fn check_instances(name: &str, mut case: impl FnMut(&mut ChaCha8Rng, u64) -> f64) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let err = case(&mut rng, seed);
        assert!(err < TOL, "{name}: instance {seed} relative error {err:e}");
    }
}

#[test]
fn elementwise_ops() {
    check_instances("add", |rng, s| {
        let ins = [random(rng, &[3, 4]), random(rng, &[3, 4])];
        gradient_error(&ins, |t, v| weighted_sum(t, v[0].add(v[1])?, s))
    });
    check_instances("sub", |rng, s| {
        let ins = [random(rng, &[5]), random(rng, &[5])];
        gradient_error(&ins, |t, v| weighted_sum(t, v[0].sub(v[1])?, s))
    });
    check_instances("mul", |rng, s| {
        let ins = [random(rng, &[2, 3]), random(rng, &[1])];
        gradient_error(&ins, |t, v| weighted_sum(t, v[0].mul(v[1])?, s))
    });
    check_instances("div", |rng, s| {
        let ins = [random(rng, &[6]), random_off_zero(rng, &[6]).map(|v| v + v.signum())];
        gradient_error(&ins, |t, v| weighted_sum(t, v[0].div(v[1])?, s))
    });
}

#[test]
fn matmul_gradient() {
    check_instances("matmul", |rng, _| {
        let ins = [random(rng, &[3, 4]), random(rng, &[4, 2])];
        gradient_error(&ins, |_, v| v[0].matmul(v[1])?.sum())
    });
}

#[test]
fn conv2d_gradient() {
    check_instances("conv2d", |rng, s| {
        let ins = [
            random(rng, &[1, 2, 5, 5]),
            random(rng, &[3, 2, 3, 3]),
            random(rng, &[3]),
        ];
        gradient_error(&ins, |t, v| weighted_sum(t, v[0].conv2d(v[1], Some(v[2]), 1, 0)?, s))
    });
    check_instances("conv2d strided padded", |rng, s| {
        let ins = [random(rng, &[2, 2, 5, 4]), random(rng, &[3, 2, 3, 3])];
        gradient_error(&ins, |t, v| weighted_sum(t, v[0].conv2d(v[1], None, 2, 1)?, s))
    });
}

#[test]
fn pointwise_and_pooling_gradients() {
    check_instances("relu", |rng, s| {
        let ins = [random_off_zero(rng, &[4, 5])];
        gradient_error(&ins, |t, v| weighted_sum(t, v[0].relu()?, s))
    });
    check_instances("max_pool2d", |rng, s| {
        // distinct values spaced well beyond the step
        let mut vals: Vec<f64> = (0..32).map(|i| i as f64 * 0.01).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let ins = [Tensor::from_slice(&[2, 1, 4, 4], &vals).unwrap()];
        gradient_error(&ins, |t, v| weighted_sum(t, v[0].max_pool2d(2, 2)?, s))
    });
    check_instances("mean_over_axes", |rng, s| {
        let ins = [random(rng, &[2, 3, 2, 2])];
        gradient_error(&ins, |t, v| weighted_sum(t, v[0].mean_over_axes(&[2, 3])?, s))
    });
}

#[test]
fn batch_norm_gradient() {
    check_instances("batch_norm2d train", |rng, s| {
        let ins = [random(rng, &[3, 2, 2, 2]), random(rng, &[2]), random(rng, &[2])];
        gradient_error(&ins, |t, v| {
            let stats = RunningStats::new(2);
            weighted_sum(t, v[0].batch_norm2d(v[1], v[2], &stats, true)?, s)
        })
    });
    check_instances("batch_norm2d eval", |rng, s| {
        let ins = [random(rng, &[1, 2, 2, 3]), random(rng, &[2]), random(rng, &[2])];
        gradient_error(&ins, |t, v| {
            let stats = RunningStats::new(2);
            *stats.mean.borrow_mut() = Tensor::from_slice(&[2], &[0.3, -0.2]).unwrap();
            *stats.var.borrow_mut() = Tensor::from_slice(&[2], &[1.5, 0.7]).unwrap();
            weighted_sum(t, v[0].batch_norm2d(v[1], v[2], &stats, false)?, s)
        })
    });
}

#[test]
fn softmax_cross_entropy_gradient() {
    check_instances("softmax_cross_entropy", |rng, _| {
        let ins = [random(rng, &[4, 5]).map(|v| v * 3.0)];
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        gradient_error(&ins, |_, v| softmax_cross_entropy(v[0], &labels))
    });
}

#[test]
fn decorrelation_penalty_gradient() {
    check_instances("mfd_loss . correlation_matrix", |rng, _| {
        let ins = [random(rng, &[4, 3, 2, 2])];
        gradient_error(&ins, |_, v| {
            let (f, _) = correlation_matrix_tracked(&StageActivations::new(0, v[0])?)?;
            mfd_loss_tracked(f)
        })
    });
}

#[test]
fn composite_conv_relu_mean_gradient() {
    check_instances("conv -> relu -> mean", |rng, _| {
        // A step of 1e-4 on one input moves each pre-activation by at most
        // 1e-4; keep all of them at least 1e-3 from the ReLU kink.
        let ins = loop {
            let ins = [random(rng, &[2, 2, 5, 5]), random(rng, &[3, 2, 3, 3])];
            let t = Tape::inference();
            let z = t.constant(ins[0].clone()).conv2d(t.constant(ins[1].clone()), None, 1, 1).unwrap();
            if z.value().data().iter().all(|v| v.abs() > 1e-3) {
                break ins;
            }
        };
        gradient_error(&ins, |_, v| v[0].conv2d(v[1], None, 1, 1)?.relu()?.mean())
    });
}

#[test]
fn repeated_backward_accumulates_twice() {
    use decorr_core::autodiff::{ParamKind, Parameter};
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = Parameter::new("k", ParamKind::Weight, random(&mut rng, &[2, 1, 3, 3]));
    let x = random(&mut rng, &[2, 1, 4, 4]);
    let run = || {
        let tape = Tape::new();
        let kv = tape.param(&k);
        let loss = tape.constant(x.clone()).conv2d(kv, None, 1, 1).unwrap().relu().unwrap().mean().unwrap();
        tape.backward(loss).unwrap();
    };
    run();
    let once = k.grad().unwrap();
    run();
    let twice = k.grad().unwrap();
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[3, 2, 6, 6]);
    let k = random(&mut rng, &[4, 2, 3, 3]);
    let run = || {
        let tape = Tape::inference();
        let out = tape
            .constant(x.clone())
            .conv2d(tape.constant(k.clone()), None, 1, 1)
            .unwrap();
        (*out.value()).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
