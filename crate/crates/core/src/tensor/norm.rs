//! Normalization ops: layer norm over the last dim, softmax / log-softmax
//! along an arbitrary axis.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{GradCtx, GradFn, Tensor};

/// View of a shape as [outer, len, inner] around `axis`.
pub(crate) struct AxisView {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

pub(crate) fn axis_view(shape: &[usize], axis: usize) -> Result<AxisView> {
    if axis >= shape.len() {
        return Err(Error::Argument(format!(
            "axis {} out of range for shape {:?}",
            axis, shape
        )));
    }
    Ok(AxisView {
        outer: shape[..axis].iter().product::<usize>().max(1),
        len: shape[axis],
        inner: shape[axis + 1..].iter().product::<usize>().max(1),
    })
}

struct LayerNormGrad<T: Scalar> {
    eps: T,
    // per-position (mean, rstd) saved at forward
    stats: Vec<(T, T)>,
}

impl<T: Scalar> GradFn<T> for LayerNormGrad<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let _ = self.eps;
        let x = &ctx.inputs[0];
        let gamma = ctx.inputs[1].data();
        let c = *x.shape().last().unwrap();
        let rows = x.numel() / c;
        let xd = x.data();
        let g = ctx.grad;
        let cf = T::from_f64_c(c as f64);

        let mut dx = vec![T::zero(); x.numel()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for r in 0..rows {
            let (mean, rstd) = self.stats[r];
            let xr = &xd[r * c..(r + 1) * c];
            let gr = &g[r * c..(r + 1) * c];
            // dy-hat = g * gamma; need mean(dyh) and mean(dyh * xhat)
            let mut sum_dyh = T::zero();
            let mut sum_dyh_xhat = T::zero();
            for j in 0..c {
                let xhat = (xr[j] - mean) * rstd;
                let dyh = gr[j] * gamma[j];
                sum_dyh += dyh;
                sum_dyh_xhat += dyh * xhat;
                dgamma[j] += gr[j] * xhat;
                dbeta[j] += gr[j];
            }
            let m_dyh = sum_dyh / cf;
            let m_dyh_xhat = sum_dyh_xhat / cf;
            let drow = &mut dx[r * c..(r + 1) * c];
            for j in 0..c {
                let xhat = (xr[j] - mean) * rstd;
                let dyh = gr[j] * gamma[j];
                drow[j] = rstd * (dyh - m_dyh - xhat * m_dyh_xhat);
            }
        }
        vec![Some(dx), Some(dgamma), Some(dbeta)]
    }
}

struct SoftmaxGrad {
    axis: usize,
}

impl<T: Scalar> GradFn<T> for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let v = axis_view(ctx.output_shape, self.axis).expect("validated at forward");
        let y = ctx.output;
        let g = ctx.grad;
        let mut dx = vec![T::zero(); y.len()];
        for o in 0..v.outer {
            for i in 0..v.inner {
                let base = o * v.len * v.inner + i;
                let mut dot = T::zero();
                for j in 0..v.len {
                    let idx = base + j * v.inner;
                    dot += g[idx] * y[idx];
                }
                for j in 0..v.len {
                    let idx = base + j * v.inner;
                    dx[idx] = y[idx] * (g[idx] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

struct LogSoftmaxGrad {
    axis: usize,
}

impl<T: Scalar> GradFn<T> for LogSoftmaxGrad {
    fn name(&self) -> &'static str {
        "log_softmax"
    }
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let v = axis_view(ctx.output_shape, self.axis).expect("validated at forward");
        let y = ctx.output; // log-probabilities
        let g = ctx.grad;
        let mut dx = vec![T::zero(); y.len()];
        for o in 0..v.outer {
            for i in 0..v.inner {
                let base = o * v.len * v.inner + i;
                let mut gsum = T::zero();
                for j in 0..v.len {
                    gsum += g[base + j * v.inner];
                }
                for j in 0..v.len {
                    let idx = base + j * v.inner;
                    dx[idx] = g[idx] - y[idx].exp() * gsum;
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Scalar> Tensor<T> {
    /// Layer normalization over the last dimension, with affine params.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let c = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Dimension("layer_norm on 0-d tensor".into()))?;
        if c == 0 {
            return Err(Error::Dimension(
                "layer_norm over an empty channel dim".into(),
            ));
        }
        if eps <= T::zero() {
            return Err(Error::Argument("layer_norm eps must be positive".into()));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![c],
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / c;
        let xd = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let cf = T::from_f64_c(c as f64);
        let mut out = vec![T::zero(); self.numel()];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &xd[r * c..(r + 1) * c];
            let mut mean = T::zero();
            for &v in xr {
                mean += v;
            }
            mean = mean / cf;
            let mut var = T::zero();
            for &v in xr {
                let d = v - mean;
                var += d * d;
            }
            var = var / cf;
            let rstd = T::one() / (var + eps).sqrt();
            stats.push((mean, rstd));
            let orow = &mut out[r * c..(r + 1) * c];
            for j in 0..c {
                orow[j] = (xr[j] - mean) * rstd * gd[j] + bd[j];
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape(),
            &[self.clone(), gamma.clone(), beta.clone()],
            Arc::new(LayerNormGrad { eps, stats }),
        ))
    }

    /// Softmax along `axis`, computed stably (max-shifted).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let v = axis_view(self.shape(), axis)?;
        let xd = self.data();
        if xd.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax over non-finite input".into()));
        }
        let mut out = vec![T::zero(); self.numel()];
        for o in 0..v.outer {
            for i in 0..v.inner {
                let base = o * v.len * v.inner + i;
                let mut m = xd[base];
                for j in 1..v.len {
                    m = m.max(xd[base + j * v.inner]);
                }
                let mut denom = T::zero();
                for j in 0..v.len {
                    let idx = base + j * v.inner;
                    let e = (xd[idx] - m).exp();
                    out[idx] = e;
                    denom += e;
                }
                for j in 0..v.len {
                    out[base + j * v.inner] = out[base + j * v.inner] / denom;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape(),
            &[self.clone()],
            Arc::new(SoftmaxGrad { axis }),
        ))
    }

    /// log(softmax) along `axis`, in one numerically stable pass.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let v = axis_view(self.shape(), axis)?;
        let xd = self.data();
        if xd.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("log_softmax over non-finite input".into()));
        }
        let mut out = vec![T::zero(); self.numel()];
        for o in 0..v.outer {
            for i in 0..v.inner {
                let base = o * v.len * v.inner + i;
                let mut m = xd[base];
                for j in 1..v.len {
                    m = m.max(xd[base + j * v.inner]);
                }
                let mut denom = T::zero();
                for j in 0..v.len {
                    denom += (xd[base + j * v.inner] - m).exp();
                }
                let lse = m + denom.ln();
                for j in 0..v.len {
                    let idx = base + j * v.inner;
                    out[idx] = xd[idx] - lse;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape(),
            &[self.clone()],
            Arc::new(LogSoftmaxGrad { axis }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_vector_collapses_to_beta() {
        let x = Tensor::<f64>::full(&[4], 5.0);
        let gamma = Tensor::<f64>::ones(&[4]);
        let beta = Tensor::<f64>::zeros(&[4]);
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn already_normalized_is_fixed_point() {
        let x = Tensor::<f64>::from_vec(vec![1.0, -1.0], &[2]).unwrap();
        let gamma = Tensor::<f64>::ones(&[2]);
        let beta = Tensor::<f64>::zeros(&[2]);
        let y = x.layer_norm(&gamma, &beta, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
        assert!((y.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn random_vector_standardized() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[16], &mut rng).scale(3.0).add_scalar(2.0);
        let gamma = Tensor::<f64>::ones(&[16]);
        let beta = Tensor::<f64>::zeros(&[16]);
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 16.0;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() <= 1e-7);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn empty_channel_dim_errors() {
        let x = Tensor::<f64>::from_vec(vec![], &[2, 0]).unwrap();
        let gamma = Tensor::<f64>::zeros(&[1]);
        assert!(x.layer_norm(&gamma, &gamma, 1e-5).is_err());
    }

    #[test]
    fn softmax_symmetry_and_row_sums() {
        let x = Tensor::<f64>::from_vec(vec![0.0, 0.0], &[2]).unwrap();
        let y = x.softmax(0).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
        assert!((y.data()[1] - 0.5).abs() < 1e-12);

        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[3, 4, 5], &mut rng);
        for axis in 0..3 {
            let y = x.softmax(axis).unwrap();
            let v = axis_view(y.shape(), axis).unwrap();
            for o in 0..v.outer {
                for i in 0..v.inner {
                    let s: f64 = (0..v.len)
                        .map(|j| y.data()[o * v.len * v.inner + j * v.inner + i])
                        .sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(&[2, 7], &mut rng);
        let a = x.log_softmax(1).unwrap();
        let b = x.softmax(1).unwrap().log().unwrap();
        for (av, bv) in a.data().iter().zip(b.data()) {
            assert!((av - bv).abs() < 1e-12);
        }
    }
}
