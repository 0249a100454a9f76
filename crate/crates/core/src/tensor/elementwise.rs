//! Elementwise arithmetic and activations.
//!
//! Binary ops broadcast over leading batch dimensions only: shapes must be
//! equal, or one operand's shape must be a suffix of the other's.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{GradCtx, GradFn, Tensor};

/// How two operand shapes line up under leading-dim broadcasting.
#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Equal,
    /// rhs is a suffix of lhs; rhs repeats across lhs's leading dims.
    RhsSmaller,
    /// lhs is a suffix of rhs.
    LhsSmaller,
}

fn broadcast_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Bcast> {
    if lhs == rhs {
        return Ok(Bcast::Equal);
    }
    if lhs.len() > rhs.len() && lhs.ends_with(rhs) {
        return Ok(Bcast::RhsSmaller);
    }
    if rhs.len() > lhs.len() && rhs.ends_with(lhs) {
        return Ok(Bcast::LhsSmaller);
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

struct BinaryGrad<T: Scalar> {
    name: &'static str,
    kind: Bcast,
    // per-element vjp producing (d_lhs, d_rhs) from (g, a, b)
    vjp: fn(T, T, T) -> (T, T),
}

impl<T: Scalar> GradFn<T> for BinaryGrad<T> {
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let a = &ctx.inputs[0];
        let b = &ctx.inputs[1];
        let an = a.numel();
        let bn = b.numel();
        let mut ga = vec![T::zero(); an];
        let mut gb = vec![T::zero(); bn];
        let ad = a.data();
        let bd = b.data();
        for (i, &g) in ctx.grad.iter().enumerate() {
            let (av, bv) = match self.kind {
                Bcast::Equal => (ad[i], bd[i]),
                Bcast::RhsSmaller => (ad[i], bd[i % bn]),
                Bcast::LhsSmaller => (ad[i % an], bd[i]),
            };
            let (da, db) = (self.vjp)(g, av, bv);
            match self.kind {
                Bcast::Equal => {
                    ga[i] += da;
                    gb[i] += db;
                }
                Bcast::RhsSmaller => {
                    ga[i] += da;
                    gb[i % bn] += db;
                }
                Bcast::LhsSmaller => {
                    ga[i % an] += da;
                    gb[i] += db;
                }
            }
        }
        vec![Some(ga), Some(gb)]
    }
}

fn binary_op<T: Scalar>(
    name: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: fn(T, T) -> T,
    vjp: fn(T, T, T) -> (T, T),
) -> Result<Tensor<T>> {
    let kind = broadcast_kind(name, a.shape(), b.shape())?;
    let (out_shape, data) = match kind {
        Bcast::Equal => (
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Bcast::RhsSmaller => {
            let bn = b.numel();
            let bd = b.data();
            (
                a.shape().to_vec(),
                a.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bd[i % bn]))
                    .collect(),
            )
        }
        Bcast::LhsSmaller => {
            let an = a.numel();
            let ad = a.data();
            (
                b.shape().to_vec(),
                b.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(ad[i % an], y))
                    .collect(),
            )
        }
    };
    Ok(Tensor::from_op(
        data,
        &out_shape,
        &[a.clone(), b.clone()],
        Arc::new(BinaryGrad::<T> { name, kind, vjp }),
    ))
}

struct UnaryGrad<T: Scalar> {
    name: &'static str,
    // vjp from (g, x, y) where y is the op's output
    vjp: fn(T, T, T) -> T,
}

impl<T: Scalar> GradFn<T> for UnaryGrad<T> {
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let xd = ctx.inputs[0].data();
        let g = ctx
            .grad
            .iter()
            .zip(xd.iter().zip(ctx.output))
            .map(|(&g, (&x, &y))| (self.vjp)(g, x, y))
            .collect();
        vec![Some(g)]
    }
}

fn unary_op<T: Scalar>(
    name: &'static str,
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    vjp: fn(T, T, T) -> T,
) -> Tensor<T> {
    let data: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        data,
        x.shape(),
        &[x.clone()],
        Arc::new(UnaryGrad::<T> { name, vjp }),
    )
}

#[inline]
fn sigmoid_val<T: Scalar>(x: T) -> T {
    // numerically stable in both tails
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus_val<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|))
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

const GELU_COEF: f64 = 0.044_715;

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary_op("add", self, rhs, |a, b| a + b, |g, _, _| (g, g))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary_op("sub", self, rhs, |a, b| a - b, |g, _, _| (g, -g))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary_op("mul", self, rhs, |a, b| a * b, |g, a, b| (g * b, g * a))
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        binary_op(
            "div",
            self,
            rhs,
            |a, b| a / b,
            |g, a, b| (g / b, -g * a / (b * b)),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        unary_op("neg", self, |x| -x, |g, _, _| -g)
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        struct ScaleGrad<T>(T);
        impl<T: Scalar> GradFn<T> for ScaleGrad<T> {
            fn name(&self) -> &'static str {
                "scale"
            }
            fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
                vec![Some(ctx.grad.iter().map(|&g| g * self.0).collect())]
            }
        }
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(data, self.shape(), &[self.clone()], Arc::new(ScaleGrad(c)))
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        unary_op("add_scalar", self, |x| x + c, |g, _, _| g)
    }

    pub fn exp(&self) -> Tensor<T> {
        unary_op("exp", self, |x| x.exp(), |g, _, y| g * y)
    }

    /// Natural log; errors on any non-positive element.
    pub fn log(&self) -> Result<Tensor<T>> {
        if let Some(v) = self.data().iter().find(|v| **v <= T::zero()) {
            return Err(Error::Domain(format!("log of non-positive value {}", v)));
        }
        Ok(unary_op("log", self, |x| x.ln(), |g, x, _| g / x))
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary_op(
            "sigmoid",
            self,
            sigmoid_val,
            |g, _, y| g * y * (T::one() - y),
        )
    }

    /// x * sigmoid(x).
    pub fn silu(&self) -> Tensor<T> {
        unary_op(
            "silu",
            self,
            |x| x * sigmoid_val(x),
            |g, x, _| {
                let s = sigmoid_val(x);
                g * (s + x * s * (T::one() - s))
            },
        )
    }

    /// ln(1 + e^x), computed stably.
    pub fn softplus(&self) -> Tensor<T> {
        unary_op("softplus", self, softplus_val, |g, x, _| g * sigmoid_val(x))
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::from_f64_c((2.0 / std::f64::consts::PI).sqrt());
        let k = T::from_f64_c(GELU_COEF);
        let half = T::from_f64_c(0.5);
        struct GeluGrad<T> {
            c: T,
            k: T,
            half: T,
        }
        impl<T: Scalar> GradFn<T> for GeluGrad<T> {
            fn name(&self) -> &'static str {
                "gelu"
            }
            fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
                let (c, k, half) = (self.c, self.k, self.half);
                let three = T::from_f64_c(3.0);
                let g = ctx
                    .grad
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(&g, &x)| {
                        let u = c * (x + k * x * x * x);
                        let t = u.tanh();
                        let du = c * (T::one() + three * k * x * x);
                        g * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                    })
                    .collect();
                vec![Some(g)]
            }
        }
        let data = self
            .data()
            .iter()
            .map(|&x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(
            data,
            self.shape(),
            &[self.clone()],
            Arc::new(GeluGrad { c, k, half }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_broadcast_leading() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![10.0, 20.0], &[2]).unwrap();
        let y = a.add(&b).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
        // mismatched non-suffix shapes error with both shapes named
        let c = Tensor::<f64>::zeros(&[3]);
        let err = a.add(&c).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("[2, 2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn broadcast_backward_reduces() {
        let a = Tensor::<f64>::ones(&[2, 3]).requires_grad(true);
        let b = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[3])
            .unwrap()
            .requires_grad(true);
        let loss = a.mul(&b).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn silu_zero_is_zero() {
        let x = Tensor::<f64>::zeros(&[4]);
        let y = x.silu();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_domain_error() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 0.0], &[2]).unwrap();
        assert!(matches!(x.log(), Err(Error::Domain(_))));
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let x = Tensor::<f64>::from_vec(vec![-800.0, 0.0, 800.0], &[3]).unwrap();
        let y = x.softplus();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - (2.0f64).ln()).abs() < 1e-12);
        assert_eq!(y.data()[2], 800.0);
    }
}
