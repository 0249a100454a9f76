//! Trilinear upsampling by an integer scale, align_corners = false.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{GradCtx, GradFn, Tensor};

/// Source coordinate and interpolation weights for one output index.
/// Returns ((i0, w0), (i1, w1)) with w0 + w1 = 1.
fn lerp_coords(o: usize, scale: usize, in_len: usize) -> ((usize, f64), (usize, f64)) {
    let src = (o as f64 + 0.5) / scale as f64 - 0.5;
    let src = src.max(0.0).min((in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = src - i0 as f64;
    ((i0, 1.0 - frac), (i1, frac))
}

struct UpsampleGrad {
    scale: usize,
}

impl<T: Scalar> GradFn<T> for UpsampleGrad {
    fn name(&self) -> &'static str {
        "upsample_trilinear"
    }
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = &ctx.inputs[0];
        let (b, c, d, h, w) = (
            x.shape()[0],
            x.shape()[1],
            x.shape()[2],
            x.shape()[3],
            x.shape()[4],
        );
        let s = self.scale;
        let (od, oh, ow) = (d * s, h * s, w * s);
        let mut dx = vec![T::zero(); x.numel()];
        for bc in 0..b * c {
            let gb = bc * od * oh * ow;
            let xb = bc * d * h * w;
            for zo in 0..od {
                let ((z0, wz0), (z1, wz1)) = lerp_coords(zo, s, d);
                for yo in 0..oh {
                    let ((y0, wy0), (y1, wy1)) = lerp_coords(yo, s, h);
                    for xo in 0..ow {
                        let ((x0, wx0), (x1, wx1)) = lerp_coords(xo, s, w);
                        let g = ctx.grad[gb + (zo * oh + yo) * ow + xo];
                        for (zi, wz) in [(z0, wz0), (z1, wz1)] {
                            for (yi, wy) in [(y0, wy0), (y1, wy1)] {
                                for (xi, wx) in [(x0, wx0), (x1, wx1)] {
                                    let wgt = T::from_f64_c(wz * wy * wx);
                                    dx[xb + (zi * h + yi) * w + xi] += g * wgt;
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Scalar> Tensor<T> {
    /// Upsample a `[B, C, D, H, W]` volume by integer `scale` per axis.
    /// Constant fields are preserved exactly; scale 1 is the identity.
    pub fn upsample_trilinear(&self, scale: usize) -> Result<Tensor<T>> {
        if scale < 1 {
            return Err(Error::Argument("upsample scale must be >= 1".into()));
        }
        if self.ndim() != 5 {
            return Err(Error::Dimension(format!(
                "upsample_trilinear expects [B,C,D,H,W], got {:?}",
                self.shape()
            )));
        }
        let (b, c, d, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
            self.shape()[4],
        );
        let s = scale;
        let (od, oh, ow) = (d * s, h * s, w * s);
        let xd = self.data();
        let mut out = vec![T::zero(); b * c * od * oh * ow];
        for bc in 0..b * c {
            let ob = bc * od * oh * ow;
            let xb = bc * d * h * w;
            for zo in 0..od {
                let ((z0, wz0), (z1, wz1)) = lerp_coords(zo, s, d);
                for yo in 0..oh {
                    let ((y0, wy0), (y1, wy1)) = lerp_coords(yo, s, h);
                    for xo in 0..ow {
                        let ((x0, wx0), (x1, wx1)) = lerp_coords(xo, s, w);
                        let mut acc = 0.0f64;
                        for (zi, wz) in [(z0, wz0), (z1, wz1)] {
                            for (yi, wy) in [(y0, wy0), (y1, wy1)] {
                                for (xi, wx) in [(x0, wx0), (x1, wx1)] {
                                    acc += wz
                                        * wy
                                        * wx
                                        * xd[xb + (zi * h + yi) * w + xi].to_f64_c();
                                }
                            }
                        }
                        out[ob + (zo * oh + yo) * ow + xo] = T::from_f64_c(acc);
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            &[b, c, od, oh, ow],
            &[self.clone()],
            Arc::new(UpsampleGrad { scale }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_volume_preserved() {
        let x = Tensor::<f64>::full(&[1, 1, 2, 2, 2], 3.0);
        let y = x.upsample_trilinear(2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
        for &v in y.data() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_one_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn(&[2, 3, 2, 2, 2], &mut rng);
        let y = x.upsample_trilinear(1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_scale_errors() {
        let x = Tensor::<f64>::ones(&[1, 1, 1, 1, 1]);
        assert!(x.upsample_trilinear(0).is_err());
    }

    /// Independent per-voxel oracle for one (z,y,x) query.
    fn oracle_at(x: &[f64], ext: usize, s: usize, zo: usize, yo: usize, xo: usize) -> f64 {
        let coord = |o: usize| -> (usize, usize, f64) {
            let src = ((o as f64 + 0.5) / s as f64 - 0.5)
                .max(0.0)
                .min((ext - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(ext - 1);
            (lo, hi, src - lo as f64)
        };
        let (z0, z1, fz) = coord(zo);
        let (y0, y1, fy) = coord(yo);
        let (x0, x1, fx) = coord(xo);
        let at = |z: usize, y: usize, xx: usize| x[(z * ext + y) * ext + xx];
        let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
        let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
        let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
        let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
        let c0 = c00 * (1.0 - fy) + c01 * fy;
        let c1 = c10 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }

    #[test]
    fn matches_per_voxel_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[1, 1, 2, 2, 2], &mut rng);
        let y = x.upsample_trilinear(2).unwrap();
        for zo in 0..4 {
            for yo in 0..4 {
                for xo in 0..4 {
                    let want = oracle_at(x.data(), 2, 2, zo, yo, xo);
                    let got = y.data()[(zo * 4 + yo) * 4 + xo];
                    assert!((got - want).abs() < 1e-6, "({zo},{yo},{xo})");
                }
            }
        }
    }
}
