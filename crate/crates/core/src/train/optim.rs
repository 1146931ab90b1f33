use std::rc::Rc;

use crate::autodiff::{ParamKind, Parameter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Momentum buffers, one per parameter in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Rc<Parameter<T>>]) -> Self {
        OptimizerState {
            velocity: params.iter().map(|p| Tensor::zeros(p.value().shape())).collect(),
            step: 0,
        }
    }
}

/// One SGD step with classic momentum and coupled L2 weight decay:
/// `v = momentum * v + (grad + weight_decay * param)`, `param -= lr * v`.
///
/// Weight decay applies to conv and linear weights only.
pub fn sgd_step<T: Scalar>(
    params: &[Rc<Parameter<T>>],
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::LengthMismatch {
            left: state.velocity.len(),
            right: params.len(),
        });
    }
    let grads = params
        .iter()
        .map(|p| p.grad().ok_or_else(|| Error::MissingGradient(p.name().to_string())))
        .collect::<Result<Vec<_>>>()?;
    let (lr, m) = (T::of(lr), T::of(momentum));
    for ((p, g), v) in params.iter().zip(&grads).zip(&mut state.velocity) {
        let wd = T::of(if p.kind() == ParamKind::Weight {
            weight_decay
        } else {
            0.0
        });
        p.update(|value| {
            for ((x, &gi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut())
            {
                *vi = m * *vi + (gi + wd * *x);
                *x -= lr * *vi;
            }
        });
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn param(kind: ParamKind) -> Rc<Parameter<f64>> {
        Parameter::new("p", kind, Tensor::from_slice(&[3], &[1.0, -2.0, 0.5]).unwrap())
    }

    fn set_grad(p: &Rc<Parameter<f64>>, g: &[f64]) {
        p.zero_grad();
        let tape = Tape::new();
        let x = tape.param(p);
        let c = tape.constant(Tensor::from_slice(&[3], g).unwrap());
        let loss = x.mul(c).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
    }

    #[test]
    fn vanilla_sgd() {
        let p = param(ParamKind::Weight);
        set_grad(&p, &[0.5, 1.0, -1.0]);
        let mut st = OptimizerState::new(&[p.clone()]);
        sgd_step(&[p.clone()], &mut st, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.value().data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1, 0.5 + 0.1]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let p = param(ParamKind::Weight);
        set_grad(&p, &[0.0; 3]);
        let mut st = OptimizerState::new(&[p.clone()]);
        sgd_step(&[p.clone()], &mut st, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.value().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn momentum_recurrence() {
        let p = param(ParamKind::Bias);
        let g = [0.3, -0.7, 1.1];
        set_grad(&p, &g);
        let mut st = OptimizerState::new(&[p.clone()]);
        sgd_step(&[p.clone()], &mut st, 0.05, 0.9, 0.1).unwrap();
        sgd_step(&[p.clone()], &mut st, 0.05, 0.9, 0.1).unwrap();
        let start = [1.0, -2.0, 0.5];
        for i in 0..3 {
            let want = start[i] - 0.05 * g[i] * (1.0 + 1.9);
            assert!((p.value().data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_decay_only_on_weights() {
        for (kind, moved) in [(ParamKind::Weight, true), (ParamKind::Norm, false)] {
            let p = param(kind);
            set_grad(&p, &[0.0; 3]);
            let mut st = OptimizerState::new(&[p.clone()]);
            sgd_step(&[p.clone()], &mut st, 0.1, 0.0, 0.5).unwrap();
            assert_eq!(p.value().data()[0] != 1.0, moved);
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let p = param(ParamKind::Weight);
        let mut st = OptimizerState::new(&[p.clone()]);
        assert!(matches!(
            sgd_step(&[p], &mut st, 0.1, 0.0, 0.0),
            Err(Error::MissingGradient(_))
        ));
    }
}
