//! Shape-manipulation ops: reshape, permute, concat, slice.
//!
//! Permute materializes a contiguous copy; reshape is a relabelling of the
//! same data, so round-trips are bit-level identities.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{strides_of, GradCtx, GradFn, Tensor};

struct ReshapeGrad;

impl<T: Scalar> GradFn<T> for ReshapeGrad {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.to_vec())]
    }
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let out_strides = strides_of(&out_shape);
    let mut out = vec![T::zero(); data.len()];
    // walk output linearly, map each index back through the permutation
    for (oi, slot) in out.iter_mut().enumerate() {
        let mut rem = oi;
        let mut src = 0usize;
        for (d, &os) in out_strides.iter().enumerate() {
            let coord = rem / os;
            rem %= os;
            src += coord * in_strides[perm[d]];
        }
        *slot = data[src];
    }
    (out, out_shape)
}

struct PermuteGrad {
    perm: Vec<usize>,
}

impl<T: Scalar> GradFn<T> for PermuteGrad {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let mut inv = vec![0usize; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inv[p] = i;
        }
        let (g, _) = permute_data(ctx.grad, ctx.output_shape, &inv);
        vec![Some(g)]
    }
}

struct ConcatGrad {
    axis: usize,
}

impl<T: Scalar> GradFn<T> for ConcatGrad {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let outer: usize = ctx.output_shape[..self.axis].iter().product::<usize>().max(1);
        let inner: usize = ctx.output_shape[self.axis + 1..]
            .iter()
            .product::<usize>()
            .max(1);
        let total_axis = ctx.output_shape[self.axis];
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(ctx.inputs.len());
        let mut offset = 0usize;
        for inp in ctx.inputs {
            let len = inp.shape()[self.axis];
            let mut g = vec![T::zero(); inp.numel()];
            for o in 0..outer {
                let src = (o * total_axis + offset) * inner;
                let dst = o * len * inner;
                g[dst..dst + len * inner]
                    .copy_from_slice(&ctx.grad[src..src + len * inner]);
            }
            grads.push(Some(g));
            offset += len;
        }
        grads
    }
}

struct SliceGrad {
    axis: usize,
    start: usize,
}

impl<T: Scalar> GradFn<T> for SliceGrad {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = &ctx.inputs[0];
        let in_shape = x.shape();
        let outer: usize = in_shape[..self.axis].iter().product::<usize>().max(1);
        let inner: usize = in_shape[self.axis + 1..].iter().product::<usize>().max(1);
        let in_axis = in_shape[self.axis];
        let out_axis = ctx.output_shape[self.axis];
        let mut g = vec![T::zero(); x.numel()];
        for o in 0..outer {
            let dst = (o * in_axis + self.start) * inner;
            let src = o * out_axis * inner;
            g[dst..dst + out_axis * inner]
                .copy_from_slice(&ctx.grad[src..src + out_axis * inner]);
        }
        vec![Some(g)]
    }
}

impl<T: Scalar> Tensor<T> {
    /// Relabel the shape; element count must be unchanged.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape,
            &[self.clone()],
            Arc::new(ReshapeGrad),
        ))
    }

    /// Reorder dimensions; `perm` must be a permutation of 0..ndim.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let n = self.ndim();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Argument(format!(
                "invalid permutation {:?} for shape {:?}",
                perm,
                self.shape()
            )));
        }
        let (data, out_shape) = permute_data(self.data(), self.shape(), perm);
        Ok(Tensor::from_op(
            data,
            &out_shape,
            &[self.clone()],
            Arc::new(PermuteGrad {
                perm: perm.to_vec(),
            }),
        ))
    }

    /// Concatenate tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero tensors".into()))?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(Error::Argument(format!(
                "concat axis {} out of range for {:?}",
                axis,
                first.shape()
            )));
        }
        let mut total_axis = 0usize;
        for p in parts {
            if p.ndim() != nd
                || p.shape()[..axis] != first.shape()[..axis]
                || p.shape()[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            total_axis += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total_axis;
        let outer: usize = out_shape[..axis].iter().product::<usize>().max(1);
        let inner: usize = out_shape[axis + 1..].iter().product::<usize>().max(1);
        let mut out = vec![T::zero(); outer * total_axis * inner];
        let mut offset = 0usize;
        for p in parts {
            let len = p.shape()[axis];
            let pd = p.data();
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * total_axis + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&pd[src..src + len * inner]);
            }
            offset += len;
        }
        Ok(Tensor::from_op(
            out,
            &out_shape,
            parts,
            Arc::new(ConcatGrad { axis }),
        ))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() || start + len > self.shape()[axis] || len == 0 {
            return Err(Error::Argument(format!(
                "slice [{}, {}) on axis {} of {:?}",
                start,
                start + len,
                axis,
                self.shape()
            )));
        }
        let in_axis = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product::<usize>().max(1);
        let inner: usize = self.shape()[axis + 1..].iter().product::<usize>().max(1);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut out = vec![T::zero(); outer * len * inner];
        let xd = self.data();
        for o in 0..outer {
            let src = (o * in_axis + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
        }
        Ok(Tensor::from_op(
            out,
            &out_shape,
            &[self.clone()],
            Arc::new(SliceGrad { axis, start }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn permute_then_inverse_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[2, 3, 4], &mut rng);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.shape(), x.shape());
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn concat_slice_roundtrip() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![5.0, 6.0], &[2, 1]).unwrap();
        let y = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = y.slice(1, 0, 2).unwrap();
        assert_eq!(back.data(), a.data());
        let back_b = y.slice(1, 2, 1).unwrap();
        assert_eq!(back_b.data(), b.data());
    }

    #[test]
    fn slice_backward_scatters() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[4])
            .unwrap()
            .requires_grad(true);
        let loss = x.slice(0, 1, 2).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn reshape_roundtrip_is_bit_exact(
            d0 in 1usize..5, d1 in 1usize..5, d2 in 1usize..5, seed in 0u64..1000
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn(&[d0, d1, d2], &mut rng);
            let y = x.reshape(&[d0 * d1 * d2]).unwrap().reshape(&[d0, d1, d2]).unwrap();
            prop_assert_eq!(y.data(), x.data());
        }

        #[test]
        fn permute_roundtrip_is_bit_exact(
            d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4, d3 in 1usize..4, seed in 0u64..1000
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn(&[d0, d1, d2, d3], &mut rng);
            let perm = [3, 1, 0, 2];
            let mut inv = [0usize; 4];
            for (i, &p) in perm.iter().enumerate() { inv[p] = i; }
            let y = x.permute(&perm).unwrap().permute(&inv).unwrap();
            prop_assert_eq!(y.data(), x.data());
        }
    }
}
