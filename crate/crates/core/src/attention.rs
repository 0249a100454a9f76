//! Multi-head self-attention with optional key/value sequence reduction,
//! and the pre-norm transformer block used in the late encoder stages.
//!
//! The reduction shortens the key sequence by a factor r: tokens are
//! regrouped as `[B, N/r, C*r]` and projected back to C by a learned map.
//! The production configuration fixes r = 1 (no reduction layers at all);
//! r > 1 exists for the complexity study and its oracle tests.

use rand::Rng;

use crate::embedding::{apply_rope3d, RotaryFrequencies};
use crate::error::{Error, Result};
use crate::nn::{join, LayerNorm, Linear, Mlp, ParamVisit};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Positional context for rotary attention: the stage grid plus its
/// frequency table.
pub struct RopeContext {
    pub grid: [usize; 3],
    pub freqs: RotaryFrequencies,
}

/// Shorten a `[B, N, C]` sequence by `r` via reshape + learned projection.
/// With r = 1 the reshape is the identity and only the map applies.
pub fn reduce_keys<T: Scalar>(k: &Tensor<T>, r: usize, map: &Linear<T>) -> Result<Tensor<T>> {
    if k.ndim() != 3 {
        return Err(Error::Dimension(format!(
            "reduce_keys expects [B, N, C], got {:?}",
            k.shape()
        )));
    }
    let (b, n, c) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    if r == 0 || n % r != 0 {
        return Err(Error::Argument(format!(
            "sequence length {n} not divisible by reduction ratio {r}"
        )));
    }
    if map.d_in() != c * r || map.d_out() != c {
        return Err(Error::Config(format!(
            "reduction map must be Linear({}, {}), got Linear({}, {})",
            c * r,
            c,
            map.d_in(),
            map.d_out()
        )));
    }
    let grouped = k.reshape(&[b, n / r, c * r])?;
    map.forward(&grouped)
}

/// Multi-head attention parameters for one stage.
pub struct Attention<T: Scalar> {
    pub q_proj: Linear<T>,
    pub k_proj: Linear<T>,
    pub v_proj: Linear<T>,
    pub out_proj: Linear<T>,
    /// (K map, V map), present only when r > 1.
    pub reduce: Option<(Linear<T>, Linear<T>)>,
    pub heads: usize,
    pub ratio: usize,
    channels: usize,
}

impl<T: Scalar> Attention<T> {
    pub fn new(channels: usize, heads: usize, ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        if ratio < 1 {
            return Err(Error::Config("reduction ratio must be >= 1".into()));
        }
        let reduce = (ratio > 1).then(|| {
            (
                Linear::new(channels * ratio, channels, true, rng),
                Linear::new(channels * ratio, channels, true, rng),
            )
        });
        Ok(Attention {
            q_proj: Linear::new(channels, channels, true, rng),
            k_proj: Linear::new(channels, channels, true, rng),
            v_proj: Linear::new(channels, channels, true, rng),
            out_proj: Linear::new(channels, channels, true, rng),
            reduce,
            heads,
            ratio,
            channels,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// `[B, N, C] -> [B, h, N, d_h]`
    fn split_heads(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, n) = (x.shape()[0], x.shape()[1]);
        x.reshape(&[b, n, self.heads, self.head_dim()])?
            .permute(&[0, 2, 1, 3])
    }

    fn forward_inner(
        &self,
        x: &Tensor<T>,
        rope: Option<&RopeContext>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if x.ndim() != 3 || x.shape()[2] != self.channels {
            return Err(Error::Config(format!(
                "attention expects [B, N, {}], got {:?}",
                self.channels,
                x.shape()
            )));
        }
        if rope.is_some() && self.ratio > 1 {
            return Err(Error::Config(
                "rotary positions are undefined for reduced key sequences (r > 1)".into(),
            ));
        }
        let (b, n) = (x.shape()[0], x.shape()[1]);
        let q = self.q_proj.forward(x)?;
        let mut k = self.k_proj.forward(x)?;
        let mut v = self.v_proj.forward(x)?;
        if let Some((km, vm)) = &self.reduce {
            k = reduce_keys(&k, self.ratio, km)?;
            v = reduce_keys(&v, self.ratio, vm)?;
        }
        let mut q = self.split_heads(&q)?;
        let mut k = self.split_heads(&k)?;
        let v = self.split_heads(&v)?;
        if let Some(ctx) = rope {
            q = apply_rope3d(&q, ctx.grid, &ctx.freqs)?;
            k = apply_rope3d(&k, ctx.grid, &ctx.freqs)?;
        }
        let m = k.shape()[2];
        let kt = k.permute(&[0, 1, 3, 2])?;
        let scale = T::from_f64_c(1.0 / (self.head_dim() as f64).sqrt());
        let scores = q.matmul(&kt)?.scale(scale);
        let probs = scores.softmax(3)?;
        let out = probs.matmul(&v)?; // [B, h, N, d_h]
        let out = out
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, n, self.channels])?;
        let out = self.out_proj.forward(&out)?;
        debug_assert_eq!(probs.shape(), &[b, self.heads, n, m]);
        Ok((out, probs))
    }

    /// Standard forward: softmax(QK^T / sqrt(d_h)) V per head, heads
    /// concatenated and output-projected.
    pub fn forward(&self, x: &Tensor<T>, rope: Option<&RopeContext>) -> Result<Tensor<T>> {
        Ok(self.forward_inner(x, rope)?.0)
    }

    /// Inspection hook: forward plus the detached attention probabilities
    /// `[B, h, N, M]` (rows sum to 1).
    pub fn forward_with_probs(
        &self,
        x: &Tensor<T>,
        rope: Option<&RopeContext>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (out, probs) = self.forward_inner(x, rope)?;
        Ok((out, probs.detach()))
    }
}

impl<T: Scalar> ParamVisit<T> for Attention<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.q_proj.visit_params(&join(prefix, "q"), f);
        self.k_proj.visit_params(&join(prefix, "k"), f);
        self.v_proj.visit_params(&join(prefix, "v"), f);
        self.out_proj.visit_params(&join(prefix, "out"), f);
        if let Some((km, vm)) = &mut self.reduce {
            km.visit_params(&join(prefix, "k_reduce"), f);
            vm.visit_params(&join(prefix, "v_reduce"), f);
        }
    }
}

/// Pre-norm residual transformer block mirroring the mamba block's
/// flatten/reshape boundary behaviour.
pub struct TransformerBlock<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub channels: usize,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(
        channels: usize,
        heads: usize,
        ratio: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            norm1: LayerNorm::new(channels),
            attn: Attention::new(channels, heads, ratio, rng)?,
            norm2: LayerNorm::new(channels),
            mlp: Mlp::new(channels, channels * mlp_ratio, rng),
            channels,
        })
    }

    pub fn forward_tokens(
        &self,
        x: &Tensor<T>,
        rope: Option<&RopeContext>,
    ) -> Result<Tensor<T>> {
        let u = x.add(&self.attn.forward(&self.norm1.forward(x)?, rope)?)?;
        u.add(&self.mlp.forward(&self.norm2.forward(&u)?)?)
    }

    pub fn forward(&self, x: &Tensor<T>, rope: Option<&RopeContext>) -> Result<Tensor<T>> {
        if x.ndim() != 5 || x.shape()[1] != self.channels {
            return Err(Error::Config(format!(
                "transformer_block expects [B, {}, D, H, W], got {:?}",
                self.channels,
                x.shape()
            )));
        }
        let grid = [x.shape()[2], x.shape()[3], x.shape()[4]];
        let seq = crate::nn::volume_to_tokens(x)?;
        let out = self.forward_tokens(&seq, rope)?;
        crate::nn::tokens_to_volume(&out, grid)
    }
}

impl<T: Scalar> ParamVisit<T> for TransformerBlock<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }
}
