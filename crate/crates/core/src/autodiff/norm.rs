use std::cell::RefCell;

use super::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Running per-channel statistics of a batch-norm layer.
#[derive(Debug)]
pub struct RunningStats<T> {
    pub mean: RefCell<Tensor<T>>,
    pub var: RefCell<Tensor<T>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> RunningStats<T> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: RefCell::new(Tensor::zeros(&[channels])),
            var: RefCell::new(Tensor::ones(&[channels])),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.borrow().numel()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Batch normalization of `[b, c, h, w]` with per-channel affine
    /// parameters. Training mode normalizes with batch statistics and updates
    /// `stats`; evaluation mode uses the running statistics.
    pub fn batch_norm2d(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        stats: &RunningStats<T>,
        training: bool,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let xs = x.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::InvalidShape(format!(
                "batch_norm2d expects rank 4, got {xs:?}"
            )));
        }
        let (b, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] || stats.channels() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm2d",
                left: xs,
                right: gv.shape().to_vec(),
            });
        }
        if training && b < 2 {
            return Err(Error::BatchTooSmall {
                op: "batch_norm2d",
                batch: b,
                min: 2,
            });
        }
        let n = b * plane;
        let xd = x.data();
        let eps = T::of(stats.eps);

        let (mean, var) = if training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for s_i in 0..b {
                    let base = (s_i * c + ch) * plane;
                    s += xd[base..base + plane].iter().copied().sum::<T>();
                }
                let mu = s / T::of(n as f64);
                let mut q = T::zero();
                for s_i in 0..b {
                    let base = (s_i * c + ch) * plane;
                    for &v in &xd[base..base + plane] {
                        q += (v - mu) * (v - mu);
                    }
                }
                mean[ch] = mu;
                var[ch] = q / T::of(n as f64);
            }
            let m = T::of(stats.momentum);
            let unbias = T::of(n as f64 / (n as f64 - 1.0));
            let mut rm = stats.mean.borrow_mut();
            let mut rv = stats.var.borrow_mut();
            for ch in 0..c {
                let old_m = rm.data()[ch];
                let old_v = rv.data()[ch];
                rm.data_mut()[ch] = (T::one() - m) * old_m + m * mean[ch];
                rv.data_mut()[ch] = (T::one() - m) * old_v + m * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (
                stats.mean.borrow().data().to_vec(),
                stats.var.borrow().data().to_vec(),
            )
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(&xs);
        let mut out = Tensor::zeros(&xs);
        for s_i in 0..b {
            for ch in 0..c {
                let base = (s_i * c + ch) * plane;
                let (g, bt) = (gv.data()[ch], bv.data()[ch]);
                for i in base..base + plane {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[i] = h;
                    out.data_mut()[i] = g * h + bt;
                }
            }
        }

        self.tape
            .record("batch_norm2d", out, &[self, gamma, beta], || {
                Box::new(move |g, needs| {
                    let gd = g.data();
                    let hd = xhat.data();
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gh = vec![T::zero(); c];
                    for s_i in 0..b {
                        for ch in 0..c {
                            let base = (s_i * c + ch) * plane;
                            for i in base..base + plane {
                                sum_g[ch] += gd[i];
                                sum_gh[ch] += gd[i] * hd[i];
                            }
                        }
                    }
                    let gx = needs[0].then(|| {
                        let mut gx = Tensor::zeros(&xs);
                        let nn = T::of(n as f64);
                        for s_i in 0..b {
                            for ch in 0..c {
                                let base = (s_i * c + ch) * plane;
                                let scale = gv.data()[ch] * inv_std[ch];
                                for i in base..base + plane {
                                    gx.data_mut()[i] = if training {
                                        scale * (gd[i] - sum_g[ch] / nn - hd[i] * sum_gh[ch] / nn)
                                    } else {
                                        scale * gd[i]
                                    };
                                }
                            }
                        }
                        gx
                    });
                    let ggamma = needs[1].then(|| Tensor::from_slice(&[c], &sum_gh)).transpose()?;
                    let gbeta = needs[2].then(|| Tensor::from_slice(&[c], &sum_g)).transpose()?;
                    Ok(vec![gx, ggamma, gbeta])
                })
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn training_output_is_standardized() {
        let tape = Tape::new();
        // Large spread keeps eps/var far below the tolerance.
        let x = Tensor::<f64>::from_fn(&[4, 3, 2, 2], |i| ((i * 37 % 11) as f64 - 5.0) * 40.0 + i as f64);
        let xv = tape.constant(x);
        let gamma = tape.constant(Tensor::ones(&[3]));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let stats = RunningStats::new(3);
        let y = xv.batch_norm2d(gamma, beta, &stats, true).unwrap().value();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|s| (0..4).map(move |p| (s, p)))
                .map(|(s, p)| y.data()[(s * 3 + ch) * 4 + p])
                .collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn training_requires_two_samples() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[1, 2, 2, 2]));
        let gamma = tape.constant(Tensor::ones(&[2]));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let stats = RunningStats::new(2);
        assert!(matches!(
            x.batch_norm2d(gamma, beta, &stats, true),
            Err(Error::BatchTooSmall { .. })
        ));
        assert!(x.batch_norm2d(gamma, beta, &stats, false).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_slice(&[2, 1, 1, 1], &[1.0, 3.0]).unwrap());
        let gamma = tape.constant(Tensor::ones(&[1]));
        let beta = tape.constant(Tensor::zeros(&[1]));
        let stats = RunningStats::new(1);
        x.batch_norm2d(gamma, beta, &stats, true).unwrap();
        // mean 2, unbiased variance 2
        assert!((stats.mean.borrow().data()[0] - 0.2).abs() < 1e-15);
        assert!((stats.var.borrow().data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }
}
