//! Small layer building blocks shared by the encoder, decoder and heads.
//!
//! Parameters are plain leaf tensors; modules expose them through
//! [`ParamVisit`] in declaration order, which fixes both the checkpoint
//! layout and the optimizer state ordering.

use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Visit every parameter tensor in declaration order.
pub trait ParamVisit<T: Scalar> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));
}

/// Collect (name, tensor) pairs without mutating.
pub fn collect_params<T: Scalar, M: ParamVisit<T>>(m: &mut M) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    m.visit_params("", &mut |name, t| out.push((name, t.clone())));
    out
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) leaf, the usual dense default.
pub fn uniform_fan_in<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng).requires_grad(true)
}

/// Dense affine map stored as `[in, out]`, applied to `[.., in]`.
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = uniform_fan_in(&[d_in, d_out], d_in, rng);
        let bias = bias.then(|| uniform_fan_in::<T>(&[d_out], d_in, rng));
        Linear { weight, bias }
    }

    /// Identity-initialized square map (used by tests and the r=1 reduce op).
    pub fn identity(dim: usize) -> Self {
        let mut w = vec![T::zero(); dim * dim];
        for i in 0..dim {
            w[i * dim + i] = T::one();
        }
        Linear {
            weight: Tensor::from_vec(w, &[dim, dim]).unwrap().requires_grad(true),
            bias: Some(Tensor::zeros(&[dim]).requires_grad(true)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl<T: Scalar> ParamVisit<T> for Linear<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Learnable layer-norm affine parameters.
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: T,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones(&[dim]).requires_grad(true),
            beta: Tensor::zeros(&[dim]).requires_grad(true),
            eps: T::from_f64_c(LN_EPS),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

impl<T: Scalar> ParamVisit<T> for LayerNorm<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Expand-contract feed-forward with GELU.
pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::new(dim, hidden, true, rng),
            fc2: Linear::new(hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

impl<T: Scalar> ParamVisit<T> for Mlp<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}

/// Flatten `[B, C, D, H, W]` to token-major `[B, N, C]` (row-major z, y, x).
pub fn volume_to_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let n: usize = x.shape()[2..].iter().product();
    x.permute(&[0, 2, 3, 4, 1])?.reshape(&[b, n, c])
}

/// Inverse of [`volume_to_tokens`] for a known grid.
pub fn tokens_to_volume<T: Scalar>(x: &Tensor<T>, grid: [usize; 3]) -> Result<Tensor<T>> {
    let (b, c) = (x.shape()[0], x.shape()[2]);
    let [d, h, w] = grid;
    x.reshape(&[b, d, h, w, c])?.permute(&[0, 4, 1, 2, 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_applies_affine_map() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::<f64>::new(3, 2, true, &mut rng);
        let x = Tensor::<f64>::randn(&[4, 3], &mut rng);
        let y = lin.forward(&x).unwrap();
        assert_eq!(y.shape(), &[4, 2]);
        let w = lin.weight.data();
        let b = lin.bias.as_ref().unwrap().data();
        let want = x.data()[0] * w[0] + x.data()[1] * w[2] + x.data()[2] * w[4] + b[0];
        assert!((y.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn token_volume_roundtrip_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[2, 3, 2, 3, 4], &mut rng);
        let t = volume_to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[2, 24, 3]);
        let back = tokens_to_volume(&t, [2, 3, 4]).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn params_visited_in_declaration_order() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::<f32>::new(4, 8, &mut rng);
        let names: Vec<String> = collect_params(&mut mlp).into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            vec!["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
        );
    }
}
