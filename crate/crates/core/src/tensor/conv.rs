//! Dense 3D convolution (cross-correlation, deep-learning convention).

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{GradCtx, GradFn, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

pub(crate) fn conv3d_out_extent(
    d_in: usize,
    k: usize,
    s: usize,
    p: usize,
) -> Result<usize> {
    if k < 1 || s < 1 {
        return Err(Error::Argument("conv3d kernel and stride must be >= 1".into()));
    }
    if d_in + 2 * p < k {
        return Err(Error::Dimension(format!(
            "conv3d kernel {} larger than padded input {} (+2*{})",
            k, d_in, p
        )));
    }
    Ok((d_in + 2 * p - k) / s + 1)
}

struct Conv3dGrad {
    spec: Conv3dSpec,
}

impl<T: Scalar> GradFn<T> for Conv3dGrad {
    fn name(&self) -> &'static str {
        "conv3d"
    }
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = &ctx.inputs[0];
        let w = &ctx.inputs[1];
        let (b, ci, id, ih, iw) = dims5(x.shape());
        let (o, _, kd, kh, kw) = dims5(w.shape());
        let [sd, sh, sw] = self.spec.stride;
        let [pd, ph, pw] = self.spec.padding;
        let (od, oh, ow) = (
            ctx.output_shape[2],
            ctx.output_shape[3],
            ctx.output_shape[4],
        );
        let g = ctx.grad;
        let xd = x.data();
        let wd = w.data();

        // dbias[o] = sum over (b, spatial) of g
        let per_out = od * oh * ow;
        let mut dbias = vec![T::zero(); o];
        for bi in 0..b {
            for oi in 0..o {
                let base = (bi * o + oi) * per_out;
                let mut s = T::zero();
                for &gv in &g[base..base + per_out] {
                    s += gv;
                }
                dbias[oi] += s;
            }
        }

        // dW[o,c,k..] = sum over (b, out) g * x_window — parallel over o
        let wk = ci * kd * kh * kw;
        let mut dw = vec![T::zero(); w.numel()];
        dw.par_chunks_mut(wk).enumerate().for_each(|(oi, dwo)| {
            for bi in 0..b {
                let gbase = (bi * o + oi) * per_out;
                for zo in 0..od {
                    for yo in 0..oh {
                        for xo in 0..ow {
                            let gv = g[gbase + (zo * oh + yo) * ow + xo];
                            if gv == T::zero() {
                                continue;
                            }
                            for c in 0..ci {
                                for dz in 0..kd {
                                    let zi = (zo * sd + dz).wrapping_sub(pd);
                                    if zi >= id {
                                        continue;
                                    }
                                    for dy in 0..kh {
                                        let yi = (yo * sh + dy).wrapping_sub(ph);
                                        if yi >= ih {
                                            continue;
                                        }
                                        for dx in 0..kw {
                                            let xi = (xo * sw + dx).wrapping_sub(pw);
                                            if xi >= iw {
                                                continue;
                                            }
                                            let xv = xd[(((bi * ci + c) * id + zi) * ih + yi) * iw
                                                + xi];
                                            dwo[((c * kd + dz) * kh + dy) * kw + dx] += gv * xv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

        // dX via gather. Per axis and input position, precompute the valid
        // (output position, kernel tap) pairs once: for strided kernels most
        // taps are invalid, and this skips them without any inner-loop
        // arithmetic.
        let axis_pairs = |in_len: usize, out_len: usize, k: usize, s: usize, p: usize| {
            let mut table: Vec<Vec<(usize, usize)>> = vec![Vec::new(); in_len];
            for (i, slot) in table.iter_mut().enumerate() {
                let n = i + p;
                let lo = n.saturating_sub(k - 1).div_ceil(s);
                for out in lo..=(n / s).min(out_len.saturating_sub(1)) {
                    let tap = n - out * s;
                    if tap < k {
                        slot.push((out, tap));
                    }
                }
            }
            table
        };
        let zp = axis_pairs(id, od, kd, sd, pd);
        let yp = axis_pairs(ih, oh, kh, sh, ph);
        let xp = axis_pairs(iw, ow, kw, sw, pw);

        let mut dx = vec![T::zero(); x.numel()];
        dx.par_chunks_mut(ih * iw).enumerate().for_each(|(row, dxs)| {
            let zi = row % id;
            let c = (row / id) % ci;
            let bi = row / (id * ci);
            for yi in 0..ih {
                for xi in 0..iw {
                    let mut acc = T::zero();
                    for oi in 0..o {
                        let gbase = (bi * o + oi) * per_out;
                        let wbase = (oi * ci + c) * kd * kh * kw;
                        for &(zo, dz) in &zp[zi] {
                            for &(yo, dy) in &yp[yi] {
                                for &(xo, dx_) in &xp[xi] {
                                    acc = acc
                                        + g[gbase + (zo * oh + yo) * ow + xo]
                                            * wd[wbase + (dz * kh + dy) * kw + dx_];
                                }
                            }
                        }
                    }
                    dxs[yi * iw + xi] = acc;
                }
            }
        });

        vec![Some(dx), Some(dw), Some(dbias)]
    }
}

fn dims5(s: &[usize]) -> (usize, usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3], s[4])
}

impl<T: Scalar> Tensor<T> {
    /// 3D cross-correlation with bias.
    ///
    /// `x: [B, C, D, H, W]`, `w: [O, C, kd, kh, kw]`, `bias: [O]`.
    pub fn conv3d(
        &self,
        w: &Tensor<T>,
        bias: &Tensor<T>,
        spec: Conv3dSpec,
    ) -> Result<Tensor<T>> {
        if self.ndim() != 5 || w.ndim() != 5 {
            return Err(Error::Dimension(format!(
                "conv3d expects 5-d input and weight, got {:?} and {:?}",
                self.shape(),
                w.shape()
            )));
        }
        let (b, ci, id, ih, iw) = dims5(self.shape());
        let (o, wc, kd, kh, kw) = dims5(w.shape());
        if wc != ci {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        if bias.shape() != [o] {
            return Err(Error::ShapeMismatch {
                op: "conv3d_bias",
                lhs: vec![o],
                rhs: bias.shape().to_vec(),
            });
        }
        let [sd, sh, sw] = spec.stride;
        let [pd, ph, pw] = spec.padding;
        let od = conv3d_out_extent(id, kd, sd, pd)?;
        let oh = conv3d_out_extent(ih, kh, sh, ph)?;
        let ow = conv3d_out_extent(iw, kw, sw, pw)?;

        let xd = self.data();
        let wd = w.data();
        let bd = bias.data();
        let per_out = od * oh * ow;
        let mut out = vec![T::zero(); b * o * per_out];
        // parallel over (b, o) output planes; each element reduced sequentially
        out.par_chunks_mut(per_out).enumerate().for_each(|(plane, os)| {
            let oi = plane % o;
            let bi = plane / o;
            let wbase = oi * ci * kd * kh * kw;
            for zo in 0..od {
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bd[oi];
                        for c in 0..ci {
                            let xcb = ((bi * ci + c) * id) * ih * iw;
                            let wcb = wbase + c * kd * kh * kw;
                            for dz in 0..kd {
                                let zi = (zo * sd + dz).wrapping_sub(pd);
                                if zi >= id {
                                    continue;
                                }
                                for dy in 0..kh {
                                    let yi = (yo * sh + dy).wrapping_sub(ph);
                                    if yi >= ih {
                                        continue;
                                    }
                                    for dx in 0..kw {
                                        let xi = (xo * sw + dx).wrapping_sub(pw);
                                        if xi >= iw {
                                            continue;
                                        }
                                        acc = acc
                                            + xd[xcb + (zi * ih + yi) * iw + xi]
                                                * wd[wcb + (dz * kh + dy) * kw + dx];
                                    }
                                }
                            }
                        }
                        os[(zo * oh + yo) * ow + xo] = acc;
                    }
                }
            }
        });

        Ok(Tensor::from_op(
            out,
            &[b, o, od, oh, ow],
            &[self.clone(), w.clone(), bias.clone()],
            Arc::new(Conv3dGrad { spec }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(s: usize, p: usize) -> Conv3dSpec {
        Conv3dSpec {
            stride: [s; 3],
            padding: [p; 3],
        }
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::<f64>::from_vec((0..27).map(|i| i as f64).collect(), &[1, 1, 3, 3, 3])
            .unwrap();
        let w = Tensor::<f64>::ones(&[1, 1, 1, 1, 1]);
        let bias = Tensor::<f64>::zeros(&[1]);
        let y = x.conv3d(&w, &bias, spec(1, 0)).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_window_sums() {
        let x = Tensor::<f64>::ones(&[1, 1, 2, 2, 2]);
        let w = Tensor::<f64>::ones(&[1, 1, 2, 2, 2]);
        let bias = Tensor::<f64>::zeros(&[1]);
        let y = x.conv3d(&w, &bias, spec(1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[8.0]);
    }

    #[test]
    fn kernel_larger_than_padded_input_errors() {
        let x = Tensor::<f64>::ones(&[1, 1, 2, 2, 2]);
        let w = Tensor::<f64>::ones(&[1, 1, 5, 5, 5]);
        let bias = Tensor::<f64>::zeros(&[1]);
        assert!(x.conv3d(&w, &bias, spec(1, 1)).is_err());
    }

    /// Direct 7-loop oracle, written independently of the kernel above.
    fn conv_oracle(
        x: &[f64],
        w: &[f64],
        bias: &[f64],
        bsz: usize,
        ci: usize,
        ext: usize,
        o: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let oe = (ext + 2 * p - k) / s + 1;
        let mut out = vec![0.0; bsz * o * oe * oe * oe];
        for b in 0..bsz {
            for oc in 0..o {
                for zo in 0..oe {
                    for yo in 0..oe {
                        for xo in 0..oe {
                            let mut acc = bias[oc];
                            for c in 0..ci {
                                for dz in 0..k {
                                    for dy in 0..k {
                                        for dx in 0..k {
                                            let zi = zo as isize * s as isize + dz as isize
                                                - p as isize;
                                            let yi = yo as isize * s as isize + dy as isize
                                                - p as isize;
                                            let xi = xo as isize * s as isize + dx as isize
                                                - p as isize;
                                            if zi < 0
                                                || yi < 0
                                                || xi < 0
                                                || zi >= ext as isize
                                                || yi >= ext as isize
                                                || xi >= ext as isize
                                            {
                                                continue;
                                            }
                                            let xv = x[(((b * ci + c) * ext + zi as usize) * ext
                                                + yi as usize)
                                                * ext
                                                + xi as usize];
                                            let wv = w[(((oc * ci + c) * k + dz) * k + dy) * k
                                                + dx];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out[(((b * o + oc) * oe + zo) * oe + yo) * oe + xo] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_loop_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[1, 2, 5, 5, 5], &mut rng);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3, 3], &mut rng);
        let bias = Tensor::<f64>::randn(&[3], &mut rng);
        let y = x.conv3d(&w, &bias, spec(2, 1)).unwrap();
        let want = conv_oracle(x.data(), w.data(), bias.data(), 1, 2, 5, 3, 3, 2, 1);
        assert_eq!(y.shape(), &[1, 3, 3, 3, 3]);
        for (got, want) in y.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-10);
        }
    }
}
