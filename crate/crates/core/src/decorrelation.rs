//! Pearson correlation between channel feature maps and the losses built on
//! top of it.
//!
//! For stage activations `X[b, d, h, w]` each channel `I` is observed once per
//! sample as an `h x w` map `I_k`. Deviations are taken against the batch
//! mean map, `I_k - mean_k(I_k)`, and
//!
//! ```text
//! F[I][J] = sum_k <I_k - Ī, J_k - J̄> / (||I - Ī|| * ||J - J̄||)
//! ```
//!
//! where the norms run over the whole batch. A channel whose deviations are
//! identically zero has no defined correlation; every entry involving it is
//! exactly 0, diagonal included, and no gradient flows through it.
//!
//! Batch reductions sum per-sample partial results in sorted order, so the
//! matrix does not depend on the order of samples in the batch.

use std::cmp::Ordering;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pairs whose denominator falls below this are treated as zero-variance.
pub const ZERO_VARIANCE_EPS: f64 = 1e-12;

/// Pearson correlation of two equal-length sequences.
///
/// Returns 0 when either sequence has (numerically) zero variance.
pub fn pearson_scalar(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let denom = sxx.sqrt() * syy.sqrt();
    if denom < ZERO_VARIANCE_EPS {
        return Ok(0.0);
    }
    Ok(sxy / denom)
}

/// Symmetric `d x d` matrix of channel correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    dim: usize,
    values: Vec<f64>,
    zero_variance: Vec<usize>,
}

impl CorrelationMatrix {
    /// Builds a matrix from explicit row-major values.
    ///
    /// Checks symmetry and range; channels whose diagonal is 0 are recorded
    /// as zero-variance.
    pub fn from_values(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim < 2 {
            return Err(Error::TooFewChannels(dim));
        }
        if values.len() != dim * dim {
            return Err(Error::InvalidShape(format!(
                "correlation matrix of dim {dim} needs {} values, got {}",
                dim * dim,
                values.len()
            )));
        }
        for i in 0..dim {
            for j in 0..dim {
                let v = values[i * dim + j];
                if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&v) {
                    return Err(Error::InvalidShape(format!(
                        "correlation entry ({i},{j}) = {v} outside [-1, 1]"
                    )));
                }
                if v != values[j * dim + i] {
                    return Err(Error::InvalidShape(format!(
                        "correlation matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let zero_variance = (0..dim).filter(|&i| values[i * dim + i] == 0.0).collect();
        Ok(CorrelationMatrix {
            dim,
            values,
            zero_variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    /// Row-major entries.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Channels with zero variance over the batch, ascending.
    pub fn zero_variance_channels(&self) -> &[usize] {
        &self.zero_variance
    }

    /// Mean of squared off-diagonal entries over all ordered pairs.
    pub fn mfd_loss(&self) -> f64 {
        let d = self.dim;
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    let v = self.values[i * d + j];
                    s += v * v;
                }
            }
        }
        s / (d * (d - 1)) as f64
    }

    /// Mean of `|F[i][j]|` over all `i != j`.
    pub fn mean_abs_offdiag(&self) -> f64 {
        let d = self.dim;
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += self.values[i * d + j].abs();
                }
            }
        }
        s / (d * (d - 1)) as f64
    }
}

/// MFD penalty of a correlation matrix, in `[0, 1]`.
pub fn mfd_loss(f: &CorrelationMatrix) -> f64 {
    f.mfd_loss()
}

/// Redundancy statistic: mean absolute off-diagonal correlation.
pub fn mean_abs_offdiag(f: &CorrelationMatrix) -> f64 {
    f.mean_abs_offdiag()
}

/// Activations captured at a stage boundary, `[b, d, h, w]` on a tape.
#[derive(Debug, Clone, Copy)]
pub struct StageActivations<'t, T> {
    pub stage_id: usize,
    pub acts: Var<'t, T>,
}

impl<'t, T: Scalar> StageActivations<'t, T> {
    pub fn new(stage_id: usize, acts: Var<'t, T>) -> Result<Self> {
        check_stage_shape(&acts.shape())?;
        Ok(StageActivations { stage_id, acts })
    }
}

fn check_stage_shape(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(Error::InvalidShape(format!(
            "stage activations must be [b, d, h, w], got {shape:?}"
        )));
    }
    if shape[0] < 2 {
        return Err(Error::BatchTooSmall {
            op: "correlation_matrix",
            batch: shape[0],
            min: 2,
        });
    }
    if shape[1] < 2 {
        return Err(Error::TooFewChannels(shape[1]));
    }
    Ok(())
}

fn sorted_sum<T: Scalar>(vals: &mut [T]) -> T {
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    vals.iter().copied().sum()
}

// Forward intermediates shared by the plain and the recorded computation.
struct CorrelationParts<T> {
    batch: usize,
    dim: usize,
    plane: usize,
    deviations: Vec<T>,
    norms: Vec<T>,
    values: Vec<T>,
    active: Vec<bool>,
}

impl<T: Scalar> CorrelationParts<T> {
    fn compute(x: &Tensor<T>) -> Result<Self> {
        check_stage_shape(x.shape())?;
        let s = x.shape();
        let (b, d, plane) = (s[0], s[1], s[2] * s[3]);
        let xd = x.data();
        let sample = d * plane;

        let inv_b = T::one() / T::of(b as f64);
        let mut column = vec![T::zero(); b];
        let mut mean = vec![T::zero(); sample];
        for (loc, m) in mean.iter_mut().enumerate() {
            for (k, slot) in column.iter_mut().enumerate() {
                *slot = xd[k * sample + loc];
            }
            *m = sorted_sum(&mut column) * inv_b;
        }
        let deviations: Vec<T> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| v - mean[i % sample])
            .collect();

        // per-sample Gram matrices D_k D_k^T
        let mut partials = vec![T::zero(); b * d * d];
        for k in 0..b {
            T::gemm(
                d,
                plane,
                d,
                T::one(),
                &deviations[k * sample..(k + 1) * sample],
                plane as isize,
                1,
                &deviations[k * sample..(k + 1) * sample],
                1,
                plane as isize,
                T::zero(),
                &mut partials[k * d * d..(k + 1) * d * d],
                d as isize,
                1,
            );
        }
        let mut gram = vec![T::zero(); d * d];
        for i in 0..d {
            for j in i..d {
                for (k, slot) in column.iter_mut().enumerate() {
                    *slot = partials[k * d * d + i * d + j];
                }
                let v = sorted_sum(&mut column);
                gram[i * d + j] = v;
                gram[j * d + i] = v;
            }
        }

        let norms: Vec<T> = (0..d).map(|i| gram[i * d + i].max(T::zero()).sqrt()).collect();
        let eps = T::of(ZERO_VARIANCE_EPS);
        let mut values = vec![T::zero(); d * d];
        let mut active = vec![false; d * d];
        for i in 0..d {
            for j in i..d {
                let denom = norms[i] * norms[j];
                if denom < eps {
                    continue;
                }
                // rounding can leave |r| a few ulps above 1
                let v = if i == j {
                    T::one()
                } else {
                    (gram[i * d + j] / denom).max(-T::one()).min(T::one())
                };
                values[i * d + j] = v;
                values[j * d + i] = v;
                active[i * d + j] = true;
                active[j * d + i] = true;
            }
        }
        Ok(CorrelationParts {
            batch: b,
            dim: d,
            plane,
            deviations,
            norms,
            values,
            active,
        })
    }

    fn report(&self) -> CorrelationMatrix {
        let d = self.dim;
        CorrelationMatrix {
            dim: d,
            values: self.values.iter().map(|v| v.as_f64()).collect(),
            zero_variance: (0..d).filter(|&i| !self.active[i * d + i]).collect(),
        }
    }

    // Gradient with respect to the activations given dL/dF.
    fn backward(&self, grad_f: &[T]) -> Vec<T> {
        let (b, d, plane) = (self.batch, self.dim, self.plane);
        let sample = d * plane;
        let mut w = vec![T::zero(); d * d];
        for i in 0..d {
            let mut diag = T::zero();
            for j in 0..d {
                if i == j || !self.active[i * d + j] {
                    continue;
                }
                let a = grad_f[i * d + j] + grad_f[j * d + i];
                w[i * d + j] = a / (self.norms[i] * self.norms[j]);
                diag += a * self.values[i * d + j];
            }
            if self.active[i * d + i] {
                w[i * d + i] = -diag / (self.norms[i] * self.norms[i]);
            }
        }
        let mut grad_dev = vec![T::zero(); b * sample];
        for k in 0..b {
            T::gemm(
                d,
                d,
                plane,
                T::one(),
                &w,
                d as isize,
                1,
                &self.deviations[k * sample..(k + 1) * sample],
                plane as isize,
                1,
                T::zero(),
                &mut grad_dev[k * sample..(k + 1) * sample],
                plane as isize,
                1,
            );
        }
        // subtracting the batch mean map is linear: dX = dD - mean_k(dD)
        let inv_b = T::one() / T::of(b as f64);
        for loc in 0..sample {
            let mut s = T::zero();
            for k in 0..b {
                s += grad_dev[k * sample + loc];
            }
            let m = s * inv_b;
            for k in 0..b {
                grad_dev[k * sample + loc] -= m;
            }
        }
        grad_dev
    }
}

/// Correlation matrix of `[b, d, h, w]` activations, without gradients.
pub fn correlation_matrix<T: Scalar>(acts: &Tensor<T>) -> Result<CorrelationMatrix> {
    Ok(CorrelationParts::compute(acts)?.report())
}

/// Correlation matrix recorded on the tape as a differentiable `[d, d]`
/// value, together with its plain report.
pub fn correlation_matrix_tracked<'t, T: Scalar>(
    acts: &StageActivations<'t, T>,
) -> Result<(Var<'t, T>, CorrelationMatrix)> {
    let x = acts.acts.value();
    let parts = CorrelationParts::compute(&x)?;
    let report = parts.report();
    let d = parts.dim;
    let shape = x.shape().to_vec();
    let value = Tensor::new(vec![d, d], parts.values.clone())?;
    let var = acts
        .acts
        .tape()
        .record("correlation_matrix", value, &[acts.acts], || {
            Box::new(move |g, _| {
                let gx = Tensor::new(shape.clone(), parts.backward(g.data()))?;
                Ok(vec![Some(gx)])
            })
        })
        .map_err(|e| stage_context(e, acts.stage_id))?;
    Ok((var, report))
}

fn stage_context(e: Error, stage: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{op} (mfd term, stage {stage})"),
        },
        other => other,
    }
}

/// Mean of squared off-diagonal entries of a recorded `[d, d]` matrix.
pub fn mfd_loss_tracked<'t, T: Scalar>(f: Var<'t, T>) -> Result<Var<'t, T>> {
    let fv = f.value();
    let shape = fv.shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::InvalidShape(format!(
            "mfd_loss expects a square matrix, got {shape:?}"
        )));
    }
    let d = shape[0];
    if d < 2 {
        return Err(Error::TooFewChannels(d));
    }
    let norm = T::of((d * (d - 1)) as f64);
    let mut s = T::zero();
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let v = fv.data()[i * d + j];
                s += v * v;
            }
        }
    }
    f.tape()
        .record("mfd_loss", Tensor::scalar(s / norm), &[f], || {
            Box::new(move |g, _| {
                let scale = g.data()[0] * T::of(2.0) / norm;
                Ok(vec![Some(Tensor::from_fn(&[d, d], |idx| {
                    if idx / d == idx % d {
                        T::zero()
                    } else {
                        fv.data()[idx] * scale
                    }
                }))])
            })
        })
}

/// Mean softmax cross-entropy of `[b, classes]` logits against labels.
pub fn softmax_cross_entropy<'t, T: Scalar>(
    logits: Var<'t, T>,
    labels: &[usize],
) -> Result<Var<'t, T>> {
    let z = logits.value();
    let shape = z.shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: shape,
            right: vec![labels.len()],
        });
    }
    let (b, c) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: c,
        });
    }
    let mut probs = vec![T::zero(); b * c];
    let mut total = T::zero();
    for (row, (&y, p)) in labels.iter().zip(probs.chunks_mut(c)).enumerate() {
        let zr = &z.data()[row * c..(row + 1) * c];
        let m = zr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (pi, &zi) in p.iter_mut().zip(zr) {
            *pi = (zi - m).exp();
            s += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= s;
        }
        total += m + s.ln() - zr[y];
    }
    let inv_b = T::one() / T::of(b as f64);
    let labels = labels.to_vec();
    logits
        .tape()
        .record("softmax_cross_entropy", Tensor::scalar(total * inv_b), &[logits], || {
            Box::new(move |g, _| {
                let scale = g.data()[0] * inv_b;
                let mut gz = Tensor::new(shape.clone(), probs.clone())?;
                for (row, &y) in labels.iter().enumerate() {
                    gz.data_mut()[row * c + y] -= T::one();
                }
                gz.data_mut().iter_mut().for_each(|v| *v *= scale);
                Ok(vec![Some(gz)])
            })
        })
}

/// Decomposition of a joint objective value.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub softmax_loss: f64,
    pub mfd_per_stage: Vec<(usize, f64)>,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn mfd_sum(&self) -> f64 {
        self.mfd_per_stage.iter().map(|(_, v)| v).sum()
    }
}

/// Joint objective on a tape plus everything needed for reporting.
pub struct JointLoss<'t, T> {
    pub total: Var<'t, T>,
    pub breakdown: LossBreakdown,
    /// Per tapped stage correlation reports, ascending stage order.
    pub correlations: Vec<(usize, CorrelationMatrix)>,
}

/// `softmax_cross_entropy + lambda * sum(mfd_loss(stage))` over the taps.
///
/// With `lambda == 0` the total is the cross-entropy node itself; the stage
/// terms are still evaluated for reporting but do not reach the loss.
pub fn joint_loss<'t, T: Scalar>(
    logits: Var<'t, T>,
    labels: &[usize],
    taps: &[StageActivations<'t, T>],
    lambda: f64,
) -> Result<JointLoss<'t, T>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    if taps.is_empty() && lambda > 0.0 {
        return Err(Error::Config(
            "a positive lambda needs at least one tapped stage".into(),
        ));
    }
    let softmax = softmax_cross_entropy(logits, labels)
        .map_err(|e| match e {
            Error::NonFinite { op } => Error::NonFinite {
                op: format!("{op} (softmax term)"),
            },
            other => other,
        })?;

    let mut stage_terms = Vec::with_capacity(taps.len());
    let mut correlations = Vec::with_capacity(taps.len());
    for tap in taps {
        let (f, report) = correlation_matrix_tracked(tap)?;
        let term = mfd_loss_tracked(f).map_err(|e| stage_context(e, tap.stage_id))?;
        stage_terms.push((tap.stage_id, term));
        correlations.push((tap.stage_id, report));
    }

    let total = if lambda == 0.0 {
        softmax
    } else {
        let mut penalty = stage_terms[0].1;
        for (_, term) in &stage_terms[1..] {
            penalty = penalty.add(*term)?;
        }
        softmax.add(penalty.scale(T::of(lambda))?)?
    };

    let breakdown = LossBreakdown {
        softmax_loss: softmax.item().as_f64(),
        mfd_per_stage: stage_terms
            .iter()
            .map(|(id, v)| (*id, v.item().as_f64()))
            .collect(),
        lambda,
        total: total.item().as_f64(),
    };
    Ok(JointLoss {
        total,
        breakdown,
        correlations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson_scalar(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_scalar(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson_scalar(&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn pearson_matches_raw_moment_formula() {
        // r = (n Σxy - Σx Σy) / sqrt((n Σx² - (Σx)²)(n Σy² - (Σy)²)) = 9 / sqrt(84)
        let (x, y) = ([1.0, 2.0, 3.0], [1.0, 2.0, 4.0]);
        let n = 3.0;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|a| a * a).sum();
        let oracle = (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
        assert!((oracle - 0.981_980_506_061_965_7).abs() < 1e-15);
        let r = pearson_scalar(&x, &y).unwrap();
        assert!((r - 0.981_980_506_061_965_7).abs() < 1e-12, "{r}");
    }

    #[test]
    fn pearson_errors() {
        assert!(matches!(pearson_scalar(&[1.0], &[1.0]), Err(Error::TooFewSamples(1))));
        assert!(matches!(
            pearson_scalar(&[1.0, 2.0], &[1.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    fn stage_tensor(b: usize, d: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut r = lcg(seed);
        Tensor::from_fn(&[b, d, h, w], |_| r())
    }

    #[test]
    fn copied_channel_correlates_perfectly() {
        let mut x = stage_tensor(4, 3, 2, 2, 1);
        for k in 0..4 {
            for p in 0..4 {
                let v = x.data()[(k * 3) * 4 + p];
                x.data_mut()[(k * 3 + 2) * 4 + p] = v;
            }
        }
        let f = correlation_matrix(&x).unwrap();
        assert!((f.get(0, 2) - 1.0).abs() < 1e-12);
        assert_eq!(f.get(0, 2), f.get(2, 0));
    }

    #[test]
    fn mirrored_deviation_correlates_negatively() {
        let mut x = stage_tensor(5, 2, 3, 1, 2);
        let plane = 3;
        for p in 0..plane {
            let mean: f64 = (0..5).map(|k| x.data()[(k * 2) * plane + p]).sum::<f64>() / 5.0;
            for k in 0..5 {
                let v = x.data()[(k * 2) * plane + p];
                x.data_mut()[(k * 2 + 1) * plane + p] = -(v - mean) + mean;
            }
        }
        let f = correlation_matrix(&x).unwrap();
        assert!((f.get(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_channel_row_and_column_vanish() {
        let mut x = stage_tensor(4, 3, 2, 2, 3);
        for k in 0..4 {
            for p in 0..4 {
                x.data_mut()[(k * 3 + 1) * 4 + p] = 0.0;
            }
        }
        let f = correlation_matrix(&x).unwrap();
        for j in 0..3 {
            assert_eq!(f.get(1, j), 0.0);
            assert_eq!(f.get(j, 1), 0.0);
        }
        assert_eq!(f.zero_variance_channels(), &[1]);
        assert_eq!(f.get(0, 0), 1.0);
    }

    #[test]
    fn stage_shape_preconditions() {
        assert!(matches!(
            correlation_matrix(&stage_tensor(1, 3, 2, 2, 0)),
            Err(Error::BatchTooSmall { .. })
        ));
        assert!(matches!(
            correlation_matrix(&stage_tensor(3, 1, 2, 2, 0)),
            Err(Error::TooFewChannels(1))
        ));
    }

    #[test]
    fn mfd_examples() {
        let zero = CorrelationMatrix::from_values(3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mfd_loss(&zero), 0.0);
        let dup = CorrelationMatrix::from_values(2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(mfd_loss(&dup), 1.0);
        // direct evaluation: six entries of 0.25 over 3*2 ordered pairs
        let half = CorrelationMatrix::from_values(3, vec![1.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5, 1.0]).unwrap();
        let direct: f64 = [0.5f64; 6].iter().map(|v| v * v).sum::<f64>() / 6.0;
        assert_eq!(direct, 0.25);
        assert!((mfd_loss(&half) - direct).abs() < 1e-15);
    }

    #[test]
    fn mean_abs_examples() {
        let f = CorrelationMatrix::from_values(2, vec![1.0, -0.5, -0.5, 1.0]).unwrap();
        assert_eq!(mean_abs_offdiag(&f), 0.5);
        let eye = CorrelationMatrix::from_values(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mean_abs_offdiag(&eye), 0.0);
    }

    #[test]
    fn tracked_mfd_matches_report() {
        let tape = Tape::new();
        let x = tape.variable(stage_tensor(4, 3, 2, 2, 9));
        let tap = StageActivations::new(0, x).unwrap();
        let (f, report) = correlation_matrix_tracked(&tap).unwrap();
        let loss = mfd_loss_tracked(f).unwrap();
        assert_eq!(loss.item(), mfd_loss(&report));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::<f64>::full(&[2, 5], 0.3));
        let l = softmax_cross_entropy(uniform, &[0, 4]).unwrap().item();
        assert!((l - 5f64.ln()).abs() < 1e-15);

        let saturated = tape.constant(Tensor::from_slice(&[1, 3], &[1000.0, 0.0, 0.0]).unwrap());
        assert!(softmax_cross_entropy(saturated, &[0]).unwrap().item() < 1e-300);

        let z = tape.constant(Tensor::from_slice(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
        // direct evaluation of -ln(e^3 / (e + e^2 + e^3))
        let oracle = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((oracle - 0.407_605_964_444_380_1).abs() < 1e-12);
        let l = softmax_cross_entropy(z, &[2]).unwrap().item();
        assert!((l - oracle).abs() < 1e-14);

        assert!(matches!(
            softmax_cross_entropy(z, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn joint_loss_degenerates_without_lambda() {
        let tape = Tape::new();
        let logits = tape.variable(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.7).sin()));
        let acts = tape.variable(stage_tensor(4, 3, 2, 2, 4));
        let taps = [StageActivations::new(0, acts).unwrap()];
        let labels = [0, 1, 2, 1];
        let j = joint_loss(logits, &labels, &taps, 0.0).unwrap();
        let ce = softmax_cross_entropy(logits, &labels).unwrap();
        assert_eq!(j.breakdown.total.to_bits(), ce.item().to_bits());
        assert_eq!(j.breakdown.mfd_per_stage.len(), 1);

        assert!(matches!(
            joint_loss(logits, &labels, &[], 1.0),
            Err(Error::Config(_))
        ));
        assert!(joint_loss(logits, &labels, &[], 0.0).is_ok());
        assert!(joint_loss(logits, &labels, &taps, -1.0).is_err());
    }

    #[test]
    fn joint_loss_recomposes_from_parts() {
        let tape = Tape::new();
        let logits = tape.variable(Tensor::from_fn(&[4, 3], |i| (i as f64 * 1.3).cos()));
        let a0 = stage_tensor(4, 3, 2, 2, 5);
        let a1 = stage_tensor(4, 4, 1, 3, 6);
        let taps = [
            StageActivations::new(0, tape.variable(a0.clone())).unwrap(),
            StageActivations::new(1, tape.variable(a1.clone())).unwrap(),
        ];
        let labels = [2, 0, 1, 1];
        let j = joint_loss(logits, &labels, &taps, 1.0).unwrap();

        let other = Tape::new();
        let ce = softmax_cross_entropy(other.constant((*logits.value()).clone()), &labels)
            .unwrap()
            .item();
        let m0 = mfd_loss(&correlation_matrix(&a0).unwrap());
        let m1 = mfd_loss(&correlation_matrix(&a1).unwrap());
        let expected = ce + (m0 + m1);
        assert!(((j.breakdown.total - expected) / expected).abs() < 1e-12);
        let b = &j.breakdown;
        assert!((b.total - (b.softmax_loss + b.lambda * b.mfd_sum())).abs() <= 1e-12 * b.total.abs());
        tape.backward(j.total).unwrap();
        assert!(tape.grad(taps[0].acts).unwrap().data().iter().any(|v| *v != 0.0));
    }
}
