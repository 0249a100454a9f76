//! Central finite-difference gradient checking (f64 only).
//!
//! Relative error uses denominator max(|analytic|, |numeric|, floor).
//! The floor keeps the check meaningful for tiny-magnitude gradients,
//! where central differences bottom out around 1e-9 absolute: without it
//! a correct gradient of ~1e-5 would fail on pure FD resolution noise.
//! Element pairs with both magnitudes under an absolute floor are counted
//! as exact.

use crate::error::Result;

use super::Tensor;

/// Both-below-this ⇒ the element is counted as exact.
pub const ABS_FLOOR: f64 = 1e-6;

/// Denominator floor for the relative error.
pub const DENOM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub elements: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

pub(crate) fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let am = analytic.abs();
    let nm = numeric.abs();
    if am < ABS_FLOOR && nm < ABS_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / am.max(nm).max(DENOM_FLOOR)
    }
}

/// Check d(f)/d(inputs) for a scalar-valued tensor function of several
/// inputs, comparing reverse-mode gradients against central differences.
pub fn grad_check_multi<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::from_vec(t.data().to_vec(), t.shape()).unwrap().requires_grad(true))
        .collect();
    let loss = f(&leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut elements = 0usize;
    for (li, leaf) in leaves.iter().enumerate() {
        for ei in 0..leaf.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = leaf.data().to_vec();
                data[ei] += delta;
                let mut probe: Vec<Tensor<f64>> = leaves.iter().map(|l| l.detach()).collect();
                probe[li] = Tensor::from_vec(data, leaf.shape()).unwrap();
                Ok(f(&probe)?.item())
            };
            let fp = eval(h)?;
            let fm = eval(-h)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[li][ei];
            max_rel = max_rel.max(rel_err(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
            elements += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        elements,
        tol,
    })
}

/// Single-input convenience wrapper.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    grad_check_multi(|xs| f(&xs[0]), std::slice::from_ref(x), h, tol)
}

/// Default step and tolerance used across the verification suite.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
