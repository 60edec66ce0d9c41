//! Easy-to-hard curriculum: per-sample difficulty, batch re-weighting and
//! the focus schedule.

use alloc::vec::Vec;

use crate::data::{batch_images, batch_ranges, Image};
use crate::error::{Error, Result};
use crate::model::ModelBranch;
use crate::ops::activation::softmax_channels;
use crate::ops::loss::LOG_EPS;
use crate::tensor::Tensor4;

/// Default sharpness of the re-weighting.
pub const DEFAULT_DELTA: f64 = 1.5;
/// Default schedule horizon, in epochs.
pub const DEFAULT_R_MAX: usize = 5;

/// Channel sums may deviate from one by at most this much.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;
/// Below this total difficulty a batch is weighted uniformly.
pub const DEGENERATE_TOTAL: f64 = 1e-12;

/// Checks that every pixel of `p` is a distribution over channels.
pub fn check_normalized(p: &Tensor4) -> Result<()> {
    let s = p.shape();
    let plane = s.plane();
    for n in 0..s.n {
        let sample = p.sample_slice(n);
        for px in 0..plane {
            let sum: f64 = (0..s.c).map(|c| sample[c * plane + px]).sum();
            if !((sum - 1.0).abs() <= NORMALIZATION_TOLERANCE) {
                return Err(Error::NotNormalized {
                    sum,
                    pixel: n * plane + px,
                });
            }
        }
    }
    Ok(())
}

/// Mean over pixels of `KL(p_source ‖ p_target)` for a single sample
/// (batch size 1). The target probability is clamped below at `1e-8`;
/// terms with `p_source = 0` contribute nothing.
pub fn kl_divergence(p_source: &Tensor4, p_target: &Tensor4) -> Result<f64> {
    p_source.expect_shape(p_target.shape(), "kl_divergence")?;
    let s = p_source.shape();
    if s.n != 1 {
        return Err(Error::Config(alloc::format!(
            "kl_divergence scores one sample at a time, got batch {}",
            s.n
        )));
    }
    if s.plane() == 0 {
        return Err(Error::Degenerate("kl_divergence over zero pixels"));
    }
    check_normalized(p_source)?;
    check_normalized(p_target)?;
    let sum: f64 = p_source
        .data()
        .iter()
        .zip(p_target.data())
        .filter(|(&ps, _)| ps > 0.0)
        .map(|(&ps, &pt)| ps * (libm::log(ps) - libm::log(pt.max(LOG_EPS))))
        .sum();
    // Rounding can leave tiny negative totals for identical maps.
    Ok((sum / s.plane() as f64).max(0.0))
}

/// Focus schedule `α(R) = 1 − 1/(1 + e^{−R/R_max})`, evaluated as the
/// equivalent `1/(1 + e^{R/R_max})` so it stays positive for large `R`.
pub fn alpha(epoch: usize, r_max: usize) -> f64 {
    let r_max = r_max.max(1) as f64;
    1.0 / (1.0 + libm::exp(epoch as f64 / r_max))
}

/// Per-sample weights `ω_b = α(δ − d_b/Σd) + (1 − α)`. When the batch has
/// (near) zero total difficulty every ratio is taken as `1/B`.
pub fn batch_weights(difficulty: &[f64], alpha: f64, delta: f64) -> Vec<f64> {
    let b = difficulty.len();
    let total: f64 = difficulty.iter().sum();
    difficulty
        .iter()
        .map(|&d| {
            let ratio = if total < DEGENERATE_TOTAL {
                1.0 / b as f64
            } else {
                d / total
            };
            alpha * (delta - ratio) + (1.0 - alpha)
        })
        .collect()
}

/// Closed-form total of [`batch_weights`] for a batch of `b` samples.
pub fn expected_weight_sum(b: usize, alpha: f64, delta: f64) -> f64 {
    alpha * (b as f64 * delta - 1.0) + (1.0 - alpha) * b as f64
}

/// One ranked sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub sample_id: u32,
    pub difficulty: f64,
}

/// Per-sample probability maps of `model` in eval mode, in input order.
pub fn predict_probabilities(model: &ModelBranch, images: &[Image], batch_size: usize) -> Result<Vec<Tensor4>> {
    let mut out = Vec::with_capacity(images.len());
    for range in batch_ranges(images.len(), batch_size) {
        let logits = model.infer(&batch_images(&images[range])?)?;
        let prob = softmax_channels(&logits)?;
        for n in 0..prob.shape().n {
            out.push(prob.sample(n));
        }
    }
    Ok(out)
}

/// Scores every image by the disagreement between `source` and `target`
/// and returns them easiest first; ties keep id order.
pub fn rank_dataset(source: &ModelBranch, target: &ModelBranch, images: &[Image]) -> Result<Vec<Ranked>> {
    if images.is_empty() {
        return Err(Error::Degenerate("cannot rank an empty dataset"));
    }
    let ps = predict_probabilities(source, images, 8)?;
    let pt = predict_probabilities(target, images, 8)?;
    let mut ranked = images
        .iter()
        .zip(ps.iter().zip(&pt))
        .map(|(img, (s, t))| {
            Ok(Ranked {
                sample_id: img.id,
                difficulty: kl_divergence(s, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        a.difficulty
            .total_cmp(&b.difficulty)
            .then(a.sample_id.cmp(&b.sample_id))
    });
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use alloc::vec;

    fn map(c: usize, values: &[f64]) -> Tensor4 {
        Tensor4::from_vec(Shape::new(1, c, 1, values.len() / c), values.to_vec()).unwrap()
    }

    #[test]
    fn closed_form_kl() {
        let ps = map(2, &[0.5, 0.5]);
        let pt = map(2, &[0.25, 0.75]);
        let d = kl_divergence(&ps, &pt).unwrap();
        let expected = 0.5 * libm::log(2.0) + 0.5 * libm::log(2.0 / 3.0);
        assert!((d - expected).abs() < 1e-15);
        assert!((d - 0.14384).abs() < 1e-5);
        assert!(kl_divergence(&ps, &ps).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_averages_over_pixels() {
        // Channel-major layout: two pixels, channel 0 then channel 1.
        let ps = map(2, &[0.5, 0.9, 0.5, 0.1]);
        let pt = map(2, &[0.25, 0.6, 0.75, 0.4]);
        let k1 = kl_divergence(&map(2, &[0.5, 0.5]), &map(2, &[0.25, 0.75])).unwrap();
        let k2 = kl_divergence(&map(2, &[0.9, 0.1]), &map(2, &[0.6, 0.4])).unwrap();
        let d = kl_divergence(&ps, &pt).unwrap();
        assert!((d - (k1 + k2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_bad_inputs() {
        let ps = map(2, &[0.5, 0.6]);
        assert!(matches!(kl_divergence(&ps, &ps), Err(Error::NotNormalized { .. })));
        let a = map(2, &[0.5, 0.5]);
        let b = map(3, &[0.2, 0.3, 0.5]);
        assert!(matches!(kl_divergence(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn alpha_values() {
        assert_eq!(alpha(0, 5), 0.5);
        assert!((alpha(5, 5) - (1.0 - 1.0 / (1.0 + libm::exp(-1.0)))).abs() < 1e-15);
        assert!((alpha(5, 5) - 0.26894).abs() < 1e-5);
        assert!((alpha(10, 5) - 0.11920).abs() < 1e-5);
        for r in 0..50 {
            assert!(alpha(r + 1, 5) < alpha(r, 5));
        }
    }

    #[test]
    fn weight_examples() {
        let w = batch_weights(&[0.3, 0.1], 0.5, 1.5);
        assert!((w[0] - 0.875).abs() < 1e-15 && (w[1] - 1.125).abs() < 1e-15);
        assert_eq!(batch_weights(&[0.2, 0.2], 0.3, 1.5), vec![1.0, 1.0]);
        assert_eq!(batch_weights(&[0.9, 0.1, 0.4], 0.0, 1.5), vec![1.0; 3]);
        assert_eq!(batch_weights(&[0.0, 0.0], 0.5, 1.5), vec![1.0, 1.0]);
        assert_eq!(batch_weights(&[0.0], 0.5, 1.5), vec![0.75]);
    }
}
