//! AdamW with decoupled weight decay.
//!
//! Update rule, applied per element with bias-corrected moments:
//!
//! ```text
//!   m <- b1*m + (1-b1)*g        mhat = m / (1 - b1^t)
//!   v <- b2*v + (1-b2)*g^2      vhat = v / (1 - b2^t)
//!   theta <- theta - lr*wd*theta - lr * mhat / (sqrt(vhat) + eps)
//! ```
//!
//! The decay term uses the pre-step parameter value, separate from the
//! adaptive step.

use crate::error::{Error, Result};
use crate::nn::ParamVisit;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// One parameter tensor's update. Exposed as a free function so the
/// step-trace oracle can drive it directly.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    debug_assert!(step >= 1);
    let b1 = T::from_f64_c(beta1);
    let b2 = T::from_f64_c(beta2);
    let one = T::one();
    let bc1 = T::from_f64_c(1.0 - beta1.powi(step as i32));
    let bc2 = T::from_f64_c(1.0 - beta2.powi(step as i32));
    let lr_t = T::from_f64_c(lr);
    let wd = T::from_f64_c(weight_decay);
    let eps_t = T::from_f64_c(eps);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        theta[i] = theta[i] - lr_t * wd * theta[i] - lr_t * mhat / (vhat.sqrt() + eps_t);
    }
}

/// Optimizer state for a fixed parameter ordering (the model's declaration
/// order). Moments are allocated lazily on the first step.
pub struct AdamW<T: Scalar> {
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one step to every parameter of `model` using its accumulated
    /// gradients, then replace each parameter with a fresh leaf (clearing
    /// the gradient). A non-finite gradient aborts with the parameter name.
    pub fn step<M: ParamVisit<T>>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        self.step += 1;
        let step = self.step;
        let mut idx = 0usize;
        let mut failure: Option<Error> = None;
        model.visit_params("", &mut |name, t| {
            if failure.is_some() {
                return;
            }
            if idx == self.m.len() {
                self.m.push(vec![T::zero(); t.numel()]);
                self.v.push(vec![T::zero(); t.numel()]);
            }
            let grad = t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()]);
            if grad.iter().any(|g| !g.is_finite()) {
                failure = Some(Error::Numeric(format!(
                    "non-finite gradient in '{name}' at optimizer step {step}"
                )));
                return;
            }
            let mut data = t.data().to_vec();
            adamw_update(
                &mut data,
                &grad,
                &mut self.m[idx],
                &mut self.v[idx],
                step,
                lr,
                BETA1,
                BETA2,
                EPS,
                self.weight_decay,
            );
            *t = Tensor::from_vec(data, t.shape()).unwrap().requires_grad(true);
            idx += 1;
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_leaves_params_unchanged() {
        let mut theta = vec![1.5f64, -2.0];
        let grad = vec![0.0, 0.0];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adamw_update(&mut theta, &grad, &mut m, &mut v, 1, 3e-4, BETA1, BETA2, EPS, 0.0);
        assert_eq!(theta, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_magnitude_is_lr_over_one_plus_eps() {
        let mut theta = vec![0.0f64];
        let grad = vec![1.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let lr = 3e-4;
        adamw_update(&mut theta, &grad, &mut m, &mut v, 1, lr, BETA1, BETA2, EPS, 0.0);
        // mhat = 1, vhat = 1 -> step = lr / (1 + eps)
        let want = -lr * 1.0 / (1.0 + EPS);
        assert!((theta[0] - want).abs() < 1e-18);
        assert!((theta[0].abs() - lr).abs() < 1e-8);
    }

    /// Independent scalar AdamW trace, written from the update formulas.
    fn oracle_trace(theta0: f64, lr: f64, wd: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut theta = theta0;
        let mut m = 0.0;
        let mut v = 0.0;
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * theta; // d/dtheta of theta^2
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32));
            let vhat = v / (1.0 - b2.powi(t as i32));
            theta = theta - lr * wd * theta - lr * mhat / (vhat.sqrt() + eps);
            out.push(theta);
        }
        out
    }

    #[test]
    fn ten_step_trace_matches_oracle() {
        let lr = 0.05;
        let wd = 0.01;
        let mut theta = vec![1.0f64];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let want = oracle_trace(1.0, lr, wd, 10);
        for t in 1..=10u64 {
            let grad = vec![2.0 * theta[0]];
            adamw_update(&mut theta, &grad, &mut m, &mut v, t, lr, BETA1, BETA2, EPS, wd);
            assert!(
                (theta[0] - want[(t - 1) as usize]).abs() < 1e-10,
                "step {t}: {} vs {}",
                theta[0],
                want[(t - 1) as usize]
            );
        }
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        use crate::nn::Linear;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::<f64>::new(2, 2, true, &mut rng);
        let x = Tensor::<f64>::from_vec(vec![f64::NAN, 1.0], &[1, 2]).unwrap();
        let loss = lin.forward(&x).unwrap().sum_all();
        loss.backward().unwrap();
        let mut opt = AdamW::new(0.0);
        let err = opt.step(&mut lin, 1e-3).unwrap_err();
        assert!(format!("{err}").contains("weight"), "{err}");
    }
}
