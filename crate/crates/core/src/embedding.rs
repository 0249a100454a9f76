//! Overlapped 3D patch embedding and 3D rotary positional embedding.
//!
//! RoPE splits each head's channels into three equal groups, one per
//! spatial axis (z, y, x). Within a group, consecutive (even, odd) pairs
//! are rotated by angle `coord * theta_j` with `theta_j = base^(-2j / (d_h/3))`.
//! Rotations preserve per-token norms exactly and make inner products
//! depend only on per-axis coordinate differences.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, uniform_fan_in, LayerNorm, ParamVisit};
use crate::scalar::Scalar;
use crate::tensor::conv::Conv3dSpec;
use crate::tensor::{GradCtx, GradFn, Tensor};

/// Per-stage patch embedding geometry. Overlap requires `kernel >= stride`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl PatchSpec {
    pub fn cubic(kernel: usize, stride: usize, padding: usize) -> Self {
        PatchSpec {
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.stride[a] < 1 {
                return Err(Error::Config("patch stride must be >= 1".into()));
            }
            if self.kernel[a] < self.stride[a] {
                return Err(Error::Config(format!(
                    "overlapped embedding requires kernel >= stride, got k={} s={}",
                    self.kernel[a], self.stride[a]
                )));
            }
        }
        Ok(())
    }

    /// Output grid for an input extent, per the conv output-size formula.
    pub fn out_grid(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut g = [0usize; 3];
        for a in 0..3 {
            g[a] = crate::tensor::conv::conv3d_out_extent(
                input[a],
                self.kernel[a],
                self.stride[a],
                self.padding[a],
            )?;
        }
        Ok(g)
    }
}

/// Token sequence with its originating grid; `tokens: [B, N, C]` with
/// `N = D*H*W` in row-major (z, y, x) order.
pub struct TokenGrid<T: Scalar> {
    pub tokens: Tensor<T>,
    pub grid: [usize; 3],
}

impl<T: Scalar> TokenGrid<T> {
    /// Row-major coordinate of token `n`.
    pub fn coords(&self, n: usize) -> [usize; 3] {
        token_coords(self.grid, n)
    }
}

pub fn token_coords(grid: [usize; 3], n: usize) -> [usize; 3] {
    let [_, h, w] = grid;
    [n / (h * w), (n / w) % h, n % w]
}

/// Overlapped patch embedding: strided conv3d, flatten to tokens, layer norm.
pub struct PatchEmbed<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub norm: LayerNorm<T>,
    pub spec: PatchSpec,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new(in_channels: usize, embed_dim: usize, spec: PatchSpec, rng: &mut impl Rng) -> Self {
        let [kd, kh, kw] = spec.kernel;
        let fan_in = in_channels * kd * kh * kw;
        PatchEmbed {
            weight: uniform_fan_in(&[embed_dim, in_channels, kd, kh, kw], fan_in, rng),
            bias: uniform_fan_in(&[embed_dim], fan_in, rng),
            norm: LayerNorm::new(embed_dim),
            spec,
        }
    }

    pub fn forward(&self, volume: &Tensor<T>) -> Result<TokenGrid<T>> {
        let y = volume.conv3d(
            &self.weight,
            &self.bias,
            Conv3dSpec {
                stride: self.spec.stride,
                padding: self.spec.padding,
            },
        )?;
        let grid = [y.shape()[2], y.shape()[3], y.shape()[4]];
        let tokens = crate::nn::volume_to_tokens(&y)?;
        let tokens = self.norm.forward(&tokens)?;
        Ok(TokenGrid { tokens, grid })
    }
}

impl<T: Scalar> ParamVisit<T> for PatchEmbed<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "conv.weight"), &mut self.weight);
        f(join(prefix, "conv.bias"), &mut self.bias);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}

/// Per-axis rotary frequency table for a head dimension divisible by 6.
#[derive(Debug, Clone)]
pub struct RotaryFrequencies {
    pub head_dim: usize,
    pub base: f64,
    /// theta_j for j in 0..head_dim/6, strictly decreasing.
    pub freqs: Vec<f64>,
}

impl RotaryFrequencies {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 6 != 0 {
            return Err(Error::Config(format!(
                "rotary head_dim must be a positive multiple of 6, got {head_dim}"
            )));
        }
        let group = head_dim / 3;
        let pairs = head_dim / 6;
        let freqs = (0..pairs)
            .map(|j| base.powf(-2.0 * j as f64 / group as f64))
            .collect();
        Ok(RotaryFrequencies {
            head_dim,
            base,
            freqs,
        })
    }

    pub fn standard(head_dim: usize) -> Result<Self> {
        Self::new(head_dim, 10_000.0)
    }
}

/// Rotate features in place-order; `sign` is +1 for forward, -1 for the
/// backward pass (inverse rotation, which is the transpose).
fn rotate<T: Scalar>(
    data: &[T],
    b: usize,
    heads: usize,
    n: usize,
    d_h: usize,
    grid: [usize; 3],
    freqs: &RotaryFrequencies,
    sign: f64,
) -> Vec<T> {
    let group = d_h / 3;
    let pairs = d_h / 6;
    let mut out = data.to_vec();
    for bh in 0..b * heads {
        for t in 0..n {
            let coords = token_coords(grid, t);
            let base = (bh * n + t) * d_h;
            for axis in 0..3 {
                let c = coords[axis] as f64;
                for j in 0..pairs {
                    let angle = sign * c * freqs.freqs[j];
                    let (sin, cos) = angle.sin_cos();
                    let (s, co) = (T::from_f64_c(sin), T::from_f64_c(cos));
                    let e = base + axis * group + 2 * j;
                    let (ev, ov) = (data[e], data[e + 1]);
                    out[e] = ev * co - ov * s;
                    out[e + 1] = ev * s + ov * co;
                }
            }
        }
    }
    out
}

struct RopeGrad {
    grid: [usize; 3],
    freqs: RotaryFrequencies,
}

impl<T: Scalar> GradFn<T> for RopeGrad {
    fn name(&self) -> &'static str {
        "rope3d"
    }
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let s = ctx.output_shape;
        let g = rotate(
            ctx.grad,
            s[0],
            s[1],
            s[2],
            s[3],
            self.grid,
            &self.freqs,
            -1.0,
        );
        vec![Some(g)]
    }
}

/// Apply 3D rotary embedding to per-head features `[B, heads, N, d_h]`
/// whose tokens live on `grid` (N must equal the grid volume).
pub fn apply_rope3d<T: Scalar>(
    x: &Tensor<T>,
    grid: [usize; 3],
    freqs: &RotaryFrequencies,
) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::Dimension(format!(
            "apply_rope3d expects [B, heads, N, d_h], got {:?}",
            x.shape()
        )));
    }
    let (b, heads, n, d_h) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if d_h != freqs.head_dim {
        return Err(Error::Config(format!(
            "rope head_dim {} does not match features {}",
            freqs.head_dim, d_h
        )));
    }
    let [gd, gh, gw] = grid;
    if gd * gh * gw != n {
        return Err(Error::Dimension(format!(
            "grid {:?} holds {} tokens, features have {}",
            grid,
            gd * gh * gw,
            n
        )));
    }
    let data = rotate(x.data(), b, heads, n, d_h, grid, freqs, 1.0);
    Ok(Tensor::from_op(
        data,
        x.shape(),
        &[x.clone()],
        Arc::new(RopeGrad {
            grid,
            freqs: freqs.clone(),
        }),
    ))
}
