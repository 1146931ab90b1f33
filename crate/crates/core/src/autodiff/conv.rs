use super::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    // Unfolds one sample `[c, h, w]` into `[c*kh*kw, out_h*out_w]`.
    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let p = self.cols();
        let pad = self.padding as isize;
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ki) as isize - pad;
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + kj) as isize - pad;
                            dst[oy * self.out_w + ox] = if y >= 0
                                && (y as usize) < self.height
                                && x >= 0
                                && (x as usize) < self.width
                            {
                                img[(c * self.height + y as usize) * self.width + x as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    // Adjoint of `im2col`: scatters-adds columns back into an image.
    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let p = self.cols();
        let pad = self.padding as isize;
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ki) as isize - pad;
                        if y < 0 || y as usize >= self.height {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + kj) as isize - pad;
                            if x < 0 || x as usize >= self.width {
                                continue;
                            }
                            img[(c * self.height + y as usize) * self.width + x as usize] +=
                                src[oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output extent of a convolution or pooling window along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// 2-D cross-correlation of `[b, c_in, h, w]` with `[c_out, c_in, kh, kw]`,
    /// plus an optional per-output-channel bias.
    pub fn conv2d(
        self,
        kernel: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let k = kernel.value();
        let (xs, ks) = (x.shape().to_vec(), k.shape().to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs,
                right: ks,
            });
        }
        if stride == 0 {
            return Err(Error::InvalidShape("conv2d: stride must be at least 1".into()));
        }
        let (batch, out_c) = (xs[0], ks[0]);
        let (out_h, out_w) = match (
            conv_output_extent(xs[2], ks[2], stride, padding),
            conv_output_extent(xs[3], ks[3], stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::InvalidShape(format!(
                    "conv2d: kernel {}x{} larger than padded input {}x{}",
                    ks[2],
                    ks[3],
                    xs[2] + 2 * padding,
                    xs[3] + 2 * padding
                )))
            }
        };
        let bias_value = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [out_c] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        left: bv.shape().to_vec(),
                        right: vec![out_c],
                    });
                }
                Some(bv)
            }
            None => None,
        };
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
            out_h,
            out_w,
        };
        let (rows, p) = (geom.rows(), geom.cols());
        let in_size = geom.channels * geom.height * geom.width;
        let out_size = out_c * p;

        let mut out = Tensor::zeros(&[batch, out_c, out_h, out_w]);
        let mut cols = vec![T::zero(); rows * p];
        for s in 0..batch {
            geom.im2col(&x.data()[s * in_size..(s + 1) * in_size], &mut cols);
            let dst = &mut out.data_mut()[s * out_size..(s + 1) * out_size];
            T::gemm(
                out_c, rows, p, T::one(), k.data(), rows as isize, 1, &cols, p as isize, 1,
                T::zero(), dst, p as isize, 1,
            );
            if let Some(bv) = &bias_value {
                for (o, chunk) in dst.chunks_mut(p).enumerate() {
                    let b = bv.data()[o];
                    chunk.iter_mut().for_each(|v| *v += b);
                }
            }
        }

        let mut inputs = vec![self, kernel];
        inputs.extend(bias);
        self.tape.record("conv2d", out, &inputs, || {
            Box::new(move |g, needs| {
                let mut gx = needs[0].then(|| Tensor::zeros(&xs));
                let mut gk = needs[1].then(|| Tensor::zeros(&ks));
                let mut cols = vec![T::zero(); rows * p];
                let mut dcols = vec![T::zero(); rows * p];
                for s in 0..batch {
                    let gs = &g.data()[s * out_size..(s + 1) * out_size];
                    if let Some(gk) = gk.as_mut() {
                        geom.im2col(&x.data()[s * in_size..(s + 1) * in_size], &mut cols);
                        // dK += dOut * cols^T
                        T::gemm(
                            out_c, p, rows, T::one(), gs, p as isize, 1, &cols, 1, p as isize,
                            T::one(), gk.data_mut(), rows as isize, 1,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        // dcols = K^T * dOut
                        T::gemm(
                            rows, out_c, p, T::one(), k.data(), 1, rows as isize, gs, p as isize,
                            1, T::zero(), &mut dcols, p as isize, 1,
                        );
                        geom.col2im(&dcols, &mut gx.data_mut()[s * in_size..(s + 1) * in_size]);
                    }
                }
                let mut grads = vec![gx, gk];
                if needs.len() > 2 {
                    grads.push(needs[2].then(|| {
                        let mut gb = Tensor::zeros(&[out_c]);
                        for (i, chunk) in g.data().chunks(p).enumerate() {
                            gb.data_mut()[i % out_c] += chunk.iter().copied().sum::<T>();
                        }
                        gb
                    }));
                }
                Ok(grads)
            })
        })
    }

    /// Max pooling over `kernel x kernel` windows of a `[b, c, h, w]` input.
    pub fn max_pool2d(self, kernel: usize, stride: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let xs = x.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::InvalidShape(format!(
                "max_pool2d expects rank 4, got {xs:?}"
            )));
        }
        let (out_h, out_w) = match (
            conv_output_extent(xs[2], kernel, stride, 0),
            conv_output_extent(xs[3], kernel, stride, 0),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::InvalidShape(format!(
                    "max_pool2d: window {kernel} stride {stride} does not fit {}x{}",
                    xs[2], xs[3]
                )))
            }
        };
        let (h, w) = (xs[2], xs[3]);
        let planes = xs[0] * xs[1];
        let mut out = Tensor::zeros(&[xs[0], xs[1], out_h, out_w]);
        let mut argmax = Vec::with_capacity(out.numel());
        {
            let od = out.data_mut();
            let xd = x.data();
            for plane in 0..planes {
                let base = plane * h * w;
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut best = base + oy * stride * w + ox * stride;
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                                if xd[idx] > xd[best] {
                                    best = idx;
                                }
                            }
                        }
                        od[(plane * out_h + oy) * out_w + ox] = xd[best];
                        argmax.push(best);
                    }
                }
            }
        }
        self.tape.record("max_pool2d", out, &[self], || {
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&xs);
                let gd = gx.data_mut();
                for (&src, &v) in argmax.iter().zip(g.data()) {
                    gd[src] += v;
                }
                Ok(vec![Some(gx)])
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn identity_kernel_reproduces_input() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_fn(&[2, 1, 3, 4], |i| i as f64 * 0.5 - 1.0);
        let xv = tape.constant(x.clone());
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = xv.conv2d(k, None, 1, 0).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[1, 1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = x.conv2d(k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn output_extent_formula() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[1, 2, 7, 6]));
        let k = tape.constant(Tensor::ones(&[3, 2, 3, 3]));
        let y = x.conv2d(k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 4, 3]);
    }

    #[test]
    fn oversized_kernel_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[1, 1, 2, 2]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert!(x.conv2d(k, None, 1, 0).is_err());
        assert!(x.conv2d(k, None, 1, 1).is_ok());
    }

    #[test]
    fn bias_is_added_per_channel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 1, 2, 2]));
        let k = tape.constant(Tensor::ones(&[2, 1, 1, 1]));
        let b = tape.constant(Tensor::from_slice(&[2], &[1.5, -2.0]).unwrap());
        let y = x.conv2d(k, Some(b), 1, 0).unwrap();
        assert_eq!(y.value().data(), &[1.5, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn max_pool_picks_window_max() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::<f64>::from_slice(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = x.max_pool2d(2, 2).unwrap();
        assert_eq!(y.value().data(), &[4.0]);
        tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }
}
