//! Segmentation losses (soft Dice + cross-entropy) and the evaluation
//! Dice metric.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Integer label field with a shape (typically `[B, D, H, W]` or
/// `[D, H, W]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl Labels {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Data(format!(
                "label shape {:?} does not match {} values",
                shape,
                data.len()
            )));
        }
        Ok(Labels { shape, data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Stack `[D, H, W]` fields into `[B, D, H, W]`.
    pub fn stack(items: &[Labels]) -> Result<Labels> {
        let first = items
            .first()
            .ok_or_else(|| Error::Data("cannot stack zero label fields".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for it in items {
            if it.shape != first.shape {
                return Err(Error::Data("label stack shape mismatch".into()));
            }
            data.extend_from_slice(&it.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Labels { shape, data })
    }

    /// Nearest-neighbour downsampling of `[B, D, H, W]` labels by an
    /// integer factor (window-centre sampling), preserving integrality.
    pub fn downsample_nearest(&self, factor: usize) -> Result<Labels> {
        if self.shape.len() != 4 {
            return Err(Error::Data("downsample expects [B, D, H, W] labels".into()));
        }
        let (b, d, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        if factor == 0 || d % factor != 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Data(format!(
                "extents {:?} not divisible by factor {factor}",
                &self.shape[1..]
            )));
        }
        let (od, oh, ow) = (d / factor, h / factor, w / factor);
        let off = factor / 2;
        let mut out = Vec::with_capacity(b * od * oh * ow);
        for bi in 0..b {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let src = ((bi * d + z * factor + off) * h + y * factor + off) * w
                            + x * factor
                            + off;
                        out.push(self.data[src]);
                    }
                }
            }
        }
        Labels::new(vec![b, od, oh, ow], out)
    }

    /// One-hot mask for class `k` as a constant `[B, 1, D, H, W]` tensor.
    fn class_mask<T: Scalar>(&self, k: u8) -> Tensor<T> {
        let data: Vec<T> = self
            .data
            .iter()
            .map(|&l| if l == k { T::one() } else { T::zero() })
            .collect();
        let mut shape = vec![self.shape[0], 1];
        shape.extend_from_slice(&self.shape[1..]);
        Tensor::from_vec(data, &shape).unwrap()
    }

    /// Full one-hot `[B, K, D, H, W]` constant tensor.
    fn one_hot<T: Scalar>(&self, classes: usize) -> Tensor<T> {
        let (b, spatial) = (self.shape[0], self.numel() / self.shape[0]);
        let mut data = vec![T::zero(); b * classes * spatial];
        for bi in 0..b {
            for vx in 0..spatial {
                let k = self.data[bi * spatial + vx] as usize;
                data[(bi * classes + k) * spatial + vx] = T::one();
            }
        }
        let mut shape = vec![b, classes];
        shape.extend_from_slice(&self.shape[1..]);
        Tensor::from_vec(data, &shape).unwrap()
    }
}

fn check_logits_labels<T: Scalar>(logits: &Tensor<T>, labels: &Labels) -> Result<usize> {
    if logits.ndim() != 5 {
        return Err(Error::Dimension(format!(
            "loss expects logits [B, K, D, H, W], got {:?}",
            logits.shape()
        )));
    }
    let k = logits.shape()[1];
    let spatial_ok = labels.shape.len() == 4
        && labels.shape[0] == logits.shape()[0]
        && labels.shape[1..] == logits.shape()[2..];
    if !spatial_ok {
        return Err(Error::Data(format!(
            "labels {:?} do not match logits {:?}",
            labels.shape,
            logits.shape()
        )));
    }
    if let Some(&bad) = labels.data.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(k)
}

/// Soft Dice loss: `1 - mean_k (2*sum(p_k t_k) + eps) / (sum p_k + sum t_k + eps)`
/// with p = softmax(logits) over the class axis.
pub fn dice_loss<T: Scalar>(logits: &Tensor<T>, labels: &Labels, smooth: f64) -> Result<Tensor<T>> {
    let k = check_logits_labels(logits, labels)?;
    let eps = T::from_f64_c(smooth);
    let probs = logits.softmax(1)?;
    let mut dice_sum: Option<Tensor<T>> = None;
    for class in 0..k {
        let p_k = probs.slice(1, class, 1)?;
        let t_k = labels.class_mask::<T>(class as u8);
        let t_count: T = T::from_f64_c(
            labels.data.iter().filter(|&&l| l as usize == class).count() as f64,
        );
        let inter = p_k.mul(&t_k)?.sum_all();
        let p_sum = p_k.sum_all();
        let num = inter.scale(T::from_f64_c(2.0)).add_scalar(eps);
        let den = p_sum.add_scalar(t_count + eps);
        let dice = num.div(&den)?;
        dice_sum = Some(match dice_sum {
            Some(acc) => acc.add(&dice)?,
            None => dice,
        });
    }
    let mean = dice_sum.unwrap().scale(T::from_f64_c(1.0 / k as f64));
    Ok(mean.neg().add_scalar(T::one()))
}

/// Mean cross-entropy over all voxels.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &Labels) -> Result<Tensor<T>> {
    let k = check_logits_labels(logits, labels)?;
    let lsm = logits.log_softmax(1)?;
    let one_hot = labels.one_hot::<T>(k);
    let voxels = labels.numel();
    Ok(lsm
        .mul(&one_hot)?
        .sum_all()
        .scale(T::from_f64_c(-1.0 / voxels as f64)))
}

/// `lambda_d * dice + lambda_c * cross_entropy`.
pub fn combined_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &Labels,
    lambda_d: f64,
    lambda_c: f64,
    smooth: f64,
) -> Result<Tensor<T>> {
    if lambda_d < 0.0 || lambda_c < 0.0 || (lambda_d == 0.0 && lambda_c == 0.0) {
        return Err(Error::Config(
            "loss weights must be non-negative and not both zero".into(),
        ));
    }
    match (lambda_d == 0.0, lambda_c == 0.0) {
        (true, false) => Ok(cross_entropy(logits, labels)?.scale(T::from_f64_c(lambda_c))),
        (false, true) => Ok(dice_loss(logits, labels, smooth)?.scale(T::from_f64_c(lambda_d))),
        _ => {
            let d = dice_loss(logits, labels, smooth)?.scale(T::from_f64_c(lambda_d));
            let c = cross_entropy(logits, labels)?.scale(T::from_f64_c(lambda_c));
            d.add(&c)
        }
    }
}

/// Hard Dice coefficient between predicted and target label fields for one
/// class: `2|A∩B| / (|A|+|B|)`, and 1.0 when both sets are empty.
pub fn dice_score(pred: &Labels, target: &Labels, class: u8) -> Result<f64> {
    if pred.shape != target.shape {
        return Err(Error::Data(format!(
            "dice_score shape mismatch {:?} vs {:?}",
            pred.shape, target.shape
        )));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        let pa = p == class;
        let tb = t == class;
        a += pa as usize;
        b += tb as usize;
        inter += (pa && tb) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Argmax over the class axis of `[B, K, D, H, W]` logits.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Result<Labels> {
    if logits.ndim() != 5 {
        return Err(Error::Dimension(format!(
            "argmax expects [B, K, D, H, W], got {:?}",
            logits.shape()
        )));
    }
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let spatial: usize = logits.shape()[2..].iter().product();
    let d = logits.data();
    let mut out = Vec::with_capacity(b * spatial);
    for bi in 0..b {
        for vx in 0..spatial {
            let mut best = 0u8;
            let mut best_v = d[(bi * k) * spatial + vx];
            for c in 1..k {
                let v = d[(bi * k + c) * spatial + vx];
                if v > best_v {
                    best_v = v;
                    best = c as u8;
                }
            }
            out.push(best);
        }
    }
    let mut shape = vec![b];
    shape.extend_from_slice(&logits.shape()[2..]);
    Labels::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOOTH: f64 = 1e-5;

    fn labels_2x2x2(vals: [u8; 8]) -> Labels {
        Labels::new(vec![1, 2, 2, 2], vals.to_vec()).unwrap()
    }

    fn logits_from_labels(labels: &Labels, k: usize, margin: f64) -> Tensor<f64> {
        let spatial = labels.numel();
        let mut data = vec![0.0; k * spatial];
        for (vx, &l) in labels.data.iter().enumerate() {
            data[l as usize * spatial + vx] = margin;
        }
        let mut shape = vec![1, k];
        shape.extend_from_slice(&labels.shape[1..]);
        Tensor::from_vec(data, &shape).unwrap()
    }

    #[test]
    fn perfect_prediction_loss_vanishes() {
        let labels = labels_2x2x2([0, 1, 1, 0, 1, 0, 0, 1]);
        let logits = logits_from_labels(&labels, 2, 20.0);
        let d = dice_loss(&logits, &labels, SMOOTH).unwrap().item();
        assert!(d <= 1e-3, "dice loss {d}");
        let c = combined_loss(&logits, &labels, 1.0, 1.0, SMOOTH).unwrap().item();
        assert!(c <= 2e-3, "combined {c}");
    }

    #[test]
    fn disjoint_masks_loss_approaches_one() {
        // predictions say class 1 everywhere the target says class 0
        let labels = labels_2x2x2([1, 1, 1, 1, 0, 0, 0, 0]);
        let flipped = labels_2x2x2([0, 0, 0, 0, 1, 1, 1, 1]);
        let logits = logits_from_labels(&flipped, 2, 30.0);
        let d = dice_loss(&logits, &labels, SMOOTH).unwrap().item();
        assert!((d - 1.0).abs() < 1e-3, "dice loss {d}");
    }

    #[test]
    fn half_overlap_dice_is_half() {
        // |A| = |B| = 4 within one 2x2x2 volume, |A∩B| = 2 per class so the
        // soft dice of a hard prediction is 2*2/(4+4) = 0.5 for each class.
        let target = labels_2x2x2([0, 0, 1, 1, 0, 0, 1, 1]);
        let pred = labels_2x2x2([0, 1, 0, 1, 0, 1, 0, 1]);
        let logits = logits_from_labels(&pred, 2, 40.0);
        let d = dice_loss(&logits, &target, 1e-9).unwrap().item();
        assert!((d - 0.5).abs() < 1e-6, "dice loss {d}");
        // metric view of the same counts
        assert_eq!(dice_score(&pred, &target, 0).unwrap(), 0.5);
        assert_eq!(dice_score(&pred, &target, 1).unwrap(), 0.5);
    }

    #[test]
    fn dice_score_edge_cases() {
        let a = labels_2x2x2([1, 1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
        let b = labels_2x2x2([0, 0, 1, 1, 0, 0, 0, 0]);
        assert_eq!(dice_score(&a, &b, 1).unwrap(), 0.0);
        // both empty for class 3
        assert_eq!(dice_score(&a, &b, 3).unwrap(), 1.0);
    }

    #[test]
    fn combined_reduces_to_components() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let labels = labels_2x2x2([0, 1, 2, 1, 0, 2, 1, 0]);
        let logits = Tensor::<f64>::randn(&[1, 3, 2, 2, 2], &mut rng);
        let d = dice_loss(&logits, &labels, SMOOTH).unwrap().item();
        let c = cross_entropy(&logits, &labels).unwrap().item();
        let only_d = combined_loss(&logits, &labels, 1.0, 0.0, SMOOTH).unwrap().item();
        let only_c = combined_loss(&logits, &labels, 0.0, 1.0, SMOOTH).unwrap().item();
        let both = combined_loss(&logits, &labels, 1.0, 1.0, SMOOTH).unwrap().item();
        assert_eq!(only_d, d);
        assert_eq!(only_c, c);
        assert_eq!(both, d + c);
        assert!(combined_loss(&logits, &labels, 0.0, 0.0, SMOOTH).is_err());
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let labels = labels_2x2x2([0, 1, 2, 0, 0, 0, 0, 0]);
        let logits = Tensor::<f64>::zeros(&[1, 2, 2, 2, 2]);
        assert!(matches!(
            dice_loss(&logits, &labels, SMOOTH),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn dice_loss_in_unit_interval_and_batch_permutation_invariant() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for trial in 0..10 {
            let logits = Tensor::<f64>::randn(&[2, 3, 2, 2, 2], &mut rng).scale(3.0);
            let lab: Vec<u8> = (0..16).map(|i| ((i * 7 + trial) % 3) as u8).collect();
            let labels = Labels::new(vec![2, 2, 2, 2], lab.clone()).unwrap();
            let d = dice_loss(&logits, &labels, SMOOTH).unwrap().item();
            assert!((0.0..=1.0).contains(&d), "dice {d}");
            let c = combined_loss(&logits, &labels, 1.0, 1.0, SMOOTH).unwrap().item();
            assert!(c >= 0.0);

            // swap the two batch items in both logits and labels
            let half = logits.numel() / 2;
            let mut swapped = logits.data()[half..].to_vec();
            swapped.extend_from_slice(&logits.data()[..half]);
            let logits_sw = Tensor::<f64>::from_vec(swapped, logits.shape()).unwrap();
            let mut lab_sw = lab[8..].to_vec();
            lab_sw.extend_from_slice(&lab[..8]);
            let labels_sw = Labels::new(vec![2, 2, 2, 2], lab_sw).unwrap();
            let d_sw = dice_loss(&logits_sw, &labels_sw, SMOOTH).unwrap().item();
            let c_sw = combined_loss(&logits_sw, &labels_sw, 1.0, 1.0, SMOOTH).unwrap().item();
            assert!((d - d_sw).abs() < 1e-12);
            assert!((c - c_sw).abs() < 1e-12);
        }
    }

    #[test]
    fn dice_gradient_matches_fd() {
        use crate::tensor::gradcheck::{grad_check, FD_STEP, FD_TOL};
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let labels = labels_2x2x2([0, 1, 2, 1, 0, 2, 1, 0]);
        let x = Tensor::<f64>::randn(&[1, 3, 2, 2, 2], &mut rng);
        let rep = grad_check(|x| dice_loss(x, &labels, SMOOTH), &x, FD_STEP, FD_TOL).unwrap();
        assert!(rep.pass(), "dice grad rel err {}", rep.max_rel_err);
        let rep = grad_check(
            |x| combined_loss(x, &labels, 1.0, 1.0, SMOOTH),
            &x,
            FD_STEP,
            FD_TOL,
        )
        .unwrap();
        assert!(rep.pass(), "combined grad rel err {}", rep.max_rel_err);
    }

    #[test]
    fn nearest_downsampling_preserves_labels() {
        let labels = Labels::new(
            vec![1, 4, 4, 4],
            (0..64).map(|i| (i % 3) as u8).collect(),
        )
        .unwrap();
        let down = labels.downsample_nearest(2).unwrap();
        assert_eq!(down.shape, vec![1, 2, 2, 2]);
        // window-centre sampling picks src offset (1,1,1) of each 2^3 cell
        assert_eq!(down.data[0], labels.data[(1 * 4 + 1) * 4 + 1]);
        assert!(down.data.iter().all(|&v| v < 3));
    }
}
