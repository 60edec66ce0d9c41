//! Masked soft-target cross-entropy.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

/// Probability floor inside logarithms.
pub const LOG_EPS: f64 = 1e-8;

fn check(pred: &Tensor4, target: &Tensor4, mask: &Tensor4) -> Result<()> {
    target.expect_shape(pred.shape(), "cross_entropy target")?;
    let s = pred.shape();
    let m = mask.shape();
    if (m.n, m.c, m.h, m.w) != (s.n, 1, s.h, s.w) {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy mask",
            left: s,
            right: m,
        });
    }
    Ok(())
}

/// Per-sample loss: for sample `b`,
/// `-Σ_{masked px} Σ_c target·ln(max(pred, ε)) / |mask_b|`.
pub fn cross_entropy_per_sample(
    pred: &Tensor4,
    target: &Tensor4,
    mask: &Tensor4,
) -> Result<Vec<f64>> {
    check(pred, target, mask)?;
    let s = pred.shape();
    let plane = s.plane();
    let mut out = vec![0.0; s.n];
    for n in 0..s.n {
        let m = mask.plane(n, 0);
        let count = m.iter().filter(|&&v| v != 0.0).count();
        if count == 0 {
            return Err(Error::Degenerate("cross-entropy over an empty mask"));
        }
        let p = pred.sample_slice(n);
        let t = target.sample_slice(n);
        let mut sum = 0.0;
        for px in 0..plane {
            if m[px] == 0.0 {
                continue;
            }
            for c in 0..s.c {
                let i = c * plane + px;
                if t[i] != 0.0 {
                    sum -= t[i] * libm::log(p[i].max(LOG_EPS));
                }
            }
        }
        out[n] = sum / count as f64;
    }
    Ok(out)
}

/// Scalar loss over the whole batch: the sum over every masked pixel
/// divided by the total number of masked pixels.
pub fn cross_entropy_soft(pred: &Tensor4, target: &Tensor4, mask: &Tensor4) -> Result<f64> {
    check(pred, target, mask)?;
    let total: usize = mask.data().iter().filter(|&&v| v != 0.0).count();
    if total == 0 {
        return Err(Error::Degenerate("cross-entropy over an empty mask"));
    }
    let s = pred.shape();
    let plane = s.plane();
    let mut sum = 0.0;
    for n in 0..s.n {
        let m = mask.plane(n, 0);
        let p = pred.sample_slice(n);
        let t = target.sample_slice(n);
        for px in 0..plane {
            if m[px] == 0.0 {
                continue;
            }
            for c in 0..s.c {
                let i = c * plane + px;
                if t[i] != 0.0 {
                    sum -= t[i] * libm::log(p[i].max(LOG_EPS));
                }
            }
        }
    }
    Ok(sum / total as f64)
}

/// Gradient of `Σ_b coeff[b] · CE_b` with respect to `pred`.
pub fn cross_entropy_backward(
    pred: &Tensor4,
    target: &Tensor4,
    mask: &Tensor4,
    coeff: &[f64],
) -> Tensor4 {
    let s = pred.shape();
    let plane = s.plane();
    let mut g = Tensor4::zeros(s);
    for n in 0..s.n {
        let m = mask.plane(n, 0);
        let count = m.iter().filter(|&&v| v != 0.0).count().max(1) as f64;
        let k = coeff[n] / count;
        let p = pred.sample_slice(n);
        let t = target.sample_slice(n);
        let len = s.c * plane;
        let dst = &mut g.data_mut()[n * len..(n + 1) * len];
        for px in 0..plane {
            if m[px] == 0.0 {
                continue;
            }
            for c in 0..s.c {
                let i = c * plane + px;
                if p[i] > LOG_EPS {
                    dst[i] = -k * t[i] / p[i];
                }
            }
        }
    }
    g
}

/// One-hot encoding of a class-index map as an `(1, classes, h, w)` tensor.
pub fn one_hot(labels: &[u8], classes: usize, h: usize, w: usize) -> Tensor4 {
    let mut t = Tensor4::zeros(Shape::new(1, classes, h, w));
    let plane = h * w;
    let dst = t.data_mut();
    for (px, &l) in labels.iter().enumerate() {
        dst[l as usize * plane + px] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_one_hot_prediction_is_free() {
        let t = one_hot(&[0, 1, 2, 1], 3, 2, 2);
        let mask = Tensor4::full(Shape::new(1, 1, 2, 2), 1.0);
        let l = cross_entropy_soft(&t, &t, &mask).unwrap();
        assert!(l.abs() < 1e-7);
    }

    #[test]
    fn uniform_two_class_prediction_costs_ln2() {
        let t = one_hot(&[1, 0, 1], 2, 1, 3);
        let p = Tensor4::full(Shape::new(1, 2, 1, 3), 0.5);
        let mask = Tensor4::full(Shape::new(1, 1, 1, 3), 1.0);
        let l = cross_entropy_soft(&p, &t, &mask).unwrap();
        assert!((l - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn masking_half_a_uniform_map_keeps_the_mean() {
        let t = one_hot(&[0, 1, 0, 1], 2, 2, 2);
        let p = Tensor4::full(Shape::new(1, 2, 2, 2), 0.5);
        let full = Tensor4::full(Shape::new(1, 1, 2, 2), 1.0);
        let half = Tensor4::from_vec(Shape::new(1, 1, 2, 2), alloc::vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = cross_entropy_soft(&p, &t, &full).unwrap();
        let b = cross_entropy_soft(&p, &t, &half).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_is_degenerate() {
        let t = one_hot(&[0, 1], 2, 1, 2);
        let mask = Tensor4::zeros(Shape::new(1, 1, 1, 2));
        assert!(matches!(cross_entropy_soft(&t, &t, &mask), Err(Error::Degenerate(_))));
        assert!(cross_entropy_per_sample(&t, &t, &mask).is_err());
    }

    #[test]
    fn loss_is_non_negative_for_soft_targets() {
        let p = Tensor4::from_vec(Shape::new(1, 2, 1, 2), alloc::vec![0.3, 0.9, 0.7, 0.1]).unwrap();
        let t = Tensor4::from_vec(Shape::new(1, 2, 1, 2), alloc::vec![0.5, 0.2, 0.5, 0.8]).unwrap();
        let mask = Tensor4::full(Shape::new(1, 1, 1, 2), 1.0);
        assert!(cross_entropy_soft(&p, &t, &mask).unwrap() >= 0.0);
    }
}
