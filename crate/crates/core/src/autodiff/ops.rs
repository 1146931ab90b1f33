use super::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

// Sums a full-size gradient down to the operand's shape when it was a
// broadcast scalar.
fn reduce_to<T: Scalar>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g
    } else {
        Tensor::full(shape, g.sum())
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b || nb == 1 {
        Ok(a.to_vec())
    } else if na == 1 {
        Ok(b.to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        })
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, kind: Binary) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(kind.name(), a.shape(), b.shape())?;
        if let Binary::Div = kind {
            if b.data().iter().any(|v| *v == T::zero()) {
                return Err(Error::DivisionByZero { op: "div" });
            }
        }
        let n: usize = out_shape.iter().product();
        let (sa, sb) = (a.numel() == 1 && n > 1, b.numel() == 1 && n > 1);
        let ad = a.data();
        let bd = b.data();
        let out = Tensor::from_fn(&out_shape, |i| {
            let x = if sa { ad[0] } else { ad[i] };
            let y = if sb { bd[0] } else { bd[i] };
            kind.apply(x, y)
        });
        self.tape.record(kind.name(), out, &[self, other], || {
            Box::new(move |g, needs| {
                let pick = |t: &Tensor<T>, s: bool, i: usize| if s { t.data()[0] } else { t.data()[i] };
                let ga = needs[0].then(|| {
                    let full = Tensor::from_fn(g.shape(), |i| {
                        let gi = g.data()[i];
                        match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * pick(&b, sb, i),
                            Binary::Div => gi / pick(&b, sb, i),
                        }
                    });
                    reduce_to(full, a.shape())
                });
                let gb = needs[1].then(|| {
                    let full = Tensor::from_fn(g.shape(), |i| {
                        let gi = g.data()[i];
                        match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * pick(&a, sa, i),
                            Binary::Div => {
                                let y = pick(&b, sb, i);
                                -gi * pick(&a, sa, i) / (y * y)
                            }
                        }
                    });
                    reduce_to(full, b.shape())
                });
                Ok(vec![ga, gb])
            })
        })
    }

    /// Elementwise sum; either operand may be a one-element scalar.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Mul)
    }

    /// Elementwise quotient. Any exactly-zero divisor is an error.
    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Div)
    }

    /// Multiplication by a constant.
    pub fn scale(self, factor: T) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v * factor);
        self.tape.record("scale", out, &[self], || {
            Box::new(move |g, _| Ok(vec![Some(g.map(|v| v * factor))]))
        })
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.scale(-T::one())
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.tape.record("relu", out, &[self], || {
            Box::new(move |g, _| {
                let xd = x.data();
                Ok(vec![Some(Tensor::from_fn(g.shape(), |i| {
                    if xd[i] > T::zero() {
                        g.data()[i]
                    } else {
                        T::zero()
                    }
                }))])
            })
        })
    }

    /// Sum of all elements as a scalar.
    pub fn sum(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape
            .record("sum", Tensor::scalar(x.sum()), &[self], || {
                Box::new(move |g, _| Ok(vec![Some(Tensor::full(&shape, g.data()[0]))]))
            })
    }

    /// Mean of all elements as a scalar.
    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = T::of(self.value().numel() as f64);
        self.sum()?.scale(T::one() / n)
    }

    /// Mean over the listed axes, which are removed from the shape.
    pub fn mean_over_axes(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let rank = shape.len();
        if axes.iter().any(|&a| a >= rank) {
            return Err(Error::InvalidShape(format!(
                "mean_over_axes: axes {axes:?} out of range for rank {rank}"
            )));
        }
        let reduced: Vec<bool> = (0..rank).map(|d| axes.contains(&d)).collect();
        let out_shape: Vec<usize> = (0..rank).filter(|&d| !reduced[d]).map(|d| shape[d]).collect();
        let count: usize = (0..rank).filter(|&d| reduced[d]).map(|d| shape[d]).product();
        let index_map = output_index_map(&shape, &reduced);
        let mut out = Tensor::zeros(&out_shape);
        {
            let od = out.data_mut();
            for (i, &v) in x.data().iter().enumerate() {
                od[index_map[i]] += v;
            }
            let inv = T::one() / T::of(count as f64);
            for v in od.iter_mut() {
                *v *= inv;
            }
        }
        self.tape.record("mean_over_axes", out, &[self], || {
            let inv = T::one() / T::of(count as f64);
            Box::new(move |g, _| {
                let gd = g.data();
                Ok(vec![Some(Tensor::from_fn(&shape, |i| gd[index_map[i]] * inv))])
            })
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        self.tape.record("reshape", out, &[self], || {
            Box::new(move |g, _| Ok(vec![Some(g.clone().reshape(&in_shape)?)]))
        })
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m, k, n, T::one(), a.data(), k as isize, 1, b.data(), n as isize, 1, T::zero(),
            out.data_mut(), n as isize, 1,
        );
        self.tape.record("matmul", out, &[self, other], || {
            Box::new(move |g, needs| {
                // dA = dC * B^T, dB = A^T * dC
                let ga = needs[0].then(|| {
                    let mut ga = Tensor::zeros(&[m, k]);
                    T::gemm(
                        m, n, k, T::one(), g.data(), n as isize, 1, b.data(), 1, n as isize,
                        T::zero(), ga.data_mut(), k as isize, 1,
                    );
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = Tensor::zeros(&[k, n]);
                    T::gemm(
                        k, m, n, T::one(), a.data(), 1, k as isize, g.data(), n as isize, 1,
                        T::zero(), gb.data_mut(), n as isize, 1,
                    );
                    gb
                });
                Ok(vec![ga, gb])
            })
        })
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_row_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let b = bias.value();
        let (xs, bs) = (x.shape().to_vec(), b.shape().to_vec());
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: xs,
                right: bs,
            });
        }
        let n = xs[1];
        let bd = b.data().to_vec();
        let out = Tensor::from_fn(&xs, |i| x.data()[i] + bd[i % n]);
        self.tape.record("add_row_bias", out, &[self, bias], || {
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut gb = Tensor::zeros(&[n]);
                    for row in g.data().chunks(n) {
                        for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    gb
                });
                Ok(vec![needs[0].then(|| g.clone()), gb])
            })
        })
    }
}

// For every flat input index, the flat index of the element it reduces into.
fn output_index_map(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let mut off = 0;
        for d in 0..rank {
            if !reduced[d] {
                off = off * shape[d] + idx[d];
            }
        }
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}
