//! Synthetic nested-ellipsoid phantoms: a desk-scale stand-in for
//! volumetric segmentation data. Class k+1's region is strictly contained
//! in class k's (concentric ellipsoids with shrinking semi-axes), so
//! per-class metrics exercise both large and small structures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::loss::Labels;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDataSpec {
    /// Cubic volume extent.
    pub extent: usize,
    /// Total classes including background.
    pub classes: usize,
    /// Input channels; each channel carries a distinct affine view of the
    /// class intensity plus independent noise.
    pub channels: usize,
    /// Gaussian intensity noise sigma.
    pub noise_sigma: f64,
    /// Outermost ellipsoid semi-axis range, as a fraction of the extent.
    pub outer_radius: [f64; 2],
    /// Per-level semi-axis shrink factor range for nested classes.
    pub shrink: [f64; 2],
    pub seed: u64,
}

impl Default for SyntheticDataSpec {
    fn default() -> Self {
        SyntheticDataSpec {
            extent: 32,
            classes: 4,
            channels: 4,
            noise_sigma: 0.05,
            outer_radius: [0.32, 0.42],
            shrink: [0.62, 0.75],
            seed: 0,
        }
    }
}

impl SyntheticDataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extent < 8 {
            return Err(Error::Config("extent must be >= 8".into()));
        }
        if self.classes < 2 || self.classes > 256 {
            return Err(Error::Config("classes must be in 2..=256".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        let [r_lo, r_hi] = self.outer_radius;
        let [s_lo, s_hi] = self.shrink;
        if !(0.0 < r_lo && r_lo <= r_hi && r_hi <= 0.45) {
            return Err(Error::Config(format!(
                "outer_radius {:?} must satisfy 0 < lo <= hi <= 0.45 so ellipsoids fit",
                self.outer_radius
            )));
        }
        if !(0.0 < s_lo && s_lo <= s_hi && s_hi < 1.0) {
            return Err(Error::Config(format!(
                "shrink {:?} must satisfy 0 < lo <= hi < 1",
                self.shrink
            )));
        }
        // the innermost class must still cover a couple of voxels
        let inner = self.extent as f64 * r_lo * s_lo.powi(self.classes as i32 - 2);
        if inner < 2.0 {
            return Err(Error::Config(format!(
                "innermost ellipsoid radius {inner:.2} voxels is too small for {} classes at extent {}",
                self.classes, self.extent
            )));
        }
        Ok(())
    }

    /// Per-(class, channel) noise-free base intensity.
    pub fn base_intensity(&self, class: usize, channel: usize) -> f64 {
        let t = class as f64 / (self.classes - 1) as f64;
        let chan_shift = 0.03 * channel as f64;
        0.15 + 0.7 * t + chan_shift
    }
}

/// Deterministic phantom generation: the RNG stream is a pure function of
/// (spec.seed, index). Returns (volume `[C, D, H, W]`, labels `[D, H, W]`).
pub fn generate_synthetic<T: Scalar>(
    spec: &SyntheticDataSpec,
    index: u64,
) -> Result<(Tensor<T>, Labels)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index.wrapping_add(1));

    let e = spec.extent;
    let ef = e as f64;
    // concentric ellipsoids: per-axis outer semi-axes, then shrink per level
    let outer: [f64; 3] =
        std::array::from_fn(|_| ef * rng.gen_range(spec.outer_radius[0]..=spec.outer_radius[1]));
    let max_sa = outer.iter().cloned().fold(0.0f64, f64::max);
    let center: [f64; 3] =
        std::array::from_fn(|a| rng.gen_range(max_sa.max(outer[a])..=(ef - max_sa.max(outer[a]))));
    let mut semi_axes = vec![outer];
    for _ in 2..spec.classes {
        let s = rng.gen_range(spec.shrink[0]..=spec.shrink[1]);
        let prev = *semi_axes.last().unwrap();
        semi_axes.push([prev[0] * s, prev[1] * s, prev[2] * s]);
    }

    let voxels = e * e * e;
    let mut labels = vec![0u8; voxels];
    for z in 0..e {
        for y in 0..e {
            for x in 0..e {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let mut label = 0u8;
                for (level, sa) in semi_axes.iter().enumerate() {
                    let mut q = 0.0;
                    for a in 0..3 {
                        let d = (p[a] - center[a]) / sa[a];
                        q += d * d;
                    }
                    if q <= 1.0 {
                        label = (level + 1) as u8;
                    } else {
                        break; // concentric: outside level k => outside k+1
                    }
                }
                labels[(z * e + y) * e + x] = label;
            }
        }
    }

    let mut volume = vec![T::zero(); spec.channels * voxels];
    for ch in 0..spec.channels {
        let base: Vec<f64> = (0..spec.classes)
            .map(|k| spec.base_intensity(k, ch))
            .collect();
        for vx in 0..voxels {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let v = base[labels[vx] as usize] + spec.noise_sigma * noise;
            volume[ch * voxels + vx] = T::from_f64_c(v);
        }
    }
    let volume = Tensor::from_vec(volume, &[spec.channels, e, e, e])?;
    let labels = Labels::new(vec![e, e, e], labels)?;
    Ok((volume, labels))
}
