//! Reductions: full-tensor sum and mean.

use std::sync::Arc;

use crate::scalar::Scalar;

use super::{GradCtx, GradFn, Tensor};

struct SumAllGrad;

impl<T: Scalar> GradFn<T> for SumAllGrad {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad[0];
        vec![Some(vec![g; ctx.inputs[0].numel()])]
    }
}

struct MeanAllGrad;

impl<T: Scalar> GradFn<T> for MeanAllGrad {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let n = ctx.inputs[0].numel();
        let g = ctx.grad[0] / T::from_f64_c(n as f64);
        vec![Some(vec![g; n])]
    }
}

impl<T: Scalar> Tensor<T> {
    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let mut s = T::zero();
        for &v in self.data() {
            s += v;
        }
        Tensor::from_op(vec![s], &[1], &[self.clone()], Arc::new(SumAllGrad))
    }

    /// Mean of all elements as a `[1]` tensor.
    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::from_f64_c(self.numel() as f64);
        let mut s = T::zero();
        for &v in self.data() {
            s += v;
        }
        Tensor::from_op(vec![s / n], &[1], &[self.clone()], Arc::new(MeanAllGrad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[3])
            .unwrap()
            .requires_grad(true);
        let loss = x.sum_all();
        assert_eq!(loss.item(), 6.0);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn square_sum_gradient() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2])
            .unwrap()
            .requires_grad(true);
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn mean_backward_scales() {
        let x = Tensor::<f64>::ones(&[4]).requires_grad(true);
        x.mean_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }
}
