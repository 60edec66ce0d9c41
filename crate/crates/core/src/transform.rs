//! Invertible spatial augmentations used for consistency pseudo-labels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformOp {
    Identity,
    HFlip,
    VFlip,
    /// Sub-window extraction; the inverse pastes back into a zero canvas.
    Crop {
        top: usize,
        left: usize,
        crop_h: usize,
        crop_w: usize,
    },
}

/// Crop side for an image side of `extent`: 75% rounded down to a multiple
/// of `multiple`, never below one multiple.
pub fn crop_extent(extent: usize, multiple: usize) -> usize {
    let m = multiple.max(1);
    ((extent * 3 / 4) / m * m).max(m).min(extent)
}

/// Uniform draw over horizontal flip, vertical flip and crop. Crop offsets
/// are uniform over every in-bounds position.
pub fn sample_transform<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, multiple: usize) -> TransformOp {
    match rng.gen_range(0..3u8) {
        0 => TransformOp::HFlip,
        1 => TransformOp::VFlip,
        _ => {
            let crop_h = crop_extent(height, multiple);
            let crop_w = crop_extent(width, multiple);
            TransformOp::Crop {
                top: rng.gen_range(0..=height - crop_h),
                left: rng.gen_range(0..=width - crop_w),
                crop_h,
                crop_w,
            }
        }
    }
}

impl TransformOp {
    pub fn kind(&self) -> &'static str {
        match self {
            TransformOp::Identity => "identity",
            TransformOp::HFlip => "hflip",
            TransformOp::VFlip => "vflip",
            TransformOp::Crop { .. } => "crop",
        }
    }

    fn check_crop(&self, height: usize, width: usize) -> Result<()> {
        if let TransformOp::Crop {
            top,
            left,
            crop_h,
            crop_w,
        } = *self
        {
            if crop_h == 0 || crop_w == 0 || top + crop_h > height || left + crop_w > width {
                return Err(Error::CropOutOfBounds {
                    top,
                    left,
                    crop_h,
                    crop_w,
                    height,
                    width,
                });
            }
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tensor4) -> Result<Tensor4> {
        let s = x.shape();
        self.check_crop(s.h, s.w)?;
        Ok(match *self {
            TransformOp::Identity => x.clone(),
            TransformOp::HFlip => Tensor4::from_fn(s, |n, c, h, w| x.at(n, c, h, s.w - 1 - w)),
            TransformOp::VFlip => Tensor4::from_fn(s, |n, c, h, w| x.at(n, c, s.h - 1 - h, w)),
            TransformOp::Crop {
                top,
                left,
                crop_h,
                crop_w,
            } => Tensor4::from_fn(Shape::new(s.n, s.c, crop_h, crop_w), |n, c, h, w| {
                x.at(n, c, top + h, left + w)
            }),
        })
    }

    /// Maps `y` (the output of a network on `apply(x)`) back onto the
    /// `height × width` grid of `x`. Returns the result and a `(n, 1, h, w)`
    /// mask of the pixels that carry information.
    pub fn invert(&self, y: &Tensor4, height: usize, width: usize) -> Result<(Tensor4, Tensor4)> {
        let s = y.shape();
        let full = Shape::new(s.n, s.c, height, width);
        let ones = Tensor4::full(Shape::new(s.n, 1, height, width), 1.0);
        match *self {
            TransformOp::Identity | TransformOp::HFlip | TransformOp::VFlip => {
                y.expect_shape(full, "invert")?;
                Ok((self.apply(y)?, ones))
            }
            TransformOp::Crop {
                top,
                left,
                crop_h,
                crop_w,
            } => {
                self.check_crop(height, width)?;
                y.expect_shape(Shape::new(s.n, s.c, crop_h, crop_w), "invert")?;
                let inside = |h: usize, w: usize| h >= top && h < top + crop_h && w >= left && w < left + crop_w;
                let out = Tensor4::from_fn(full, |n, c, h, w| {
                    if inside(h, w) {
                        y.at(n, c, h - top, w - left)
                    } else {
                        0.0
                    }
                });
                let mask = Tensor4::from_fn(ones.shape(), |_, _, h, w| f64::from(u8::from(inside(h, w))));
                Ok((out, mask))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(shape: Shape) -> Tensor4 {
        Tensor4::from_fn(shape, |n, c, h, w| (n * 1000 + c * 100 + h * 10 + w) as f64)
    }

    #[test]
    fn crop_extent_rounds_to_multiple() {
        assert_eq!(crop_extent(64, 8), 48);
        assert_eq!(crop_extent(16, 4), 12);
        assert_eq!(crop_extent(8, 8), 8);
    }

    #[test]
    fn crop_mask_area() {
        let t = TransformOp::Crop {
            top: 8,
            left: 8,
            crop_h: 48,
            crop_w: 48,
        };
        let x = ramp(Shape::new(1, 1, 64, 64));
        let (back, mask) = t.invert(&t.apply(&x).unwrap(), 64, 64).unwrap();
        assert_eq!(mask.sum(), 2304.0);
        for h in 0..64 {
            for w in 0..64 {
                let inside = (8..56).contains(&h) && (8..56).contains(&w);
                assert_eq!(mask.at(0, 0, h, w), f64::from(u8::from(inside)));
                if inside {
                    assert_eq!(back.at(0, 0, h, w), x.at(0, 0, h, w));
                }
            }
        }
    }

    #[test]
    fn flips_are_involutions() {
        let x = ramp(Shape::new(2, 3, 5, 7));
        for t in [TransformOp::HFlip, TransformOp::VFlip, TransformOp::Identity] {
            assert_eq!(t.apply(&t.apply(&x).unwrap()).unwrap(), x);
            let (back, mask) = t.invert(&t.apply(&x).unwrap(), 5, 7).unwrap();
            assert_eq!(back, x);
            assert_eq!(mask.sum(), 2.0 * 35.0);
        }
    }

    #[test]
    fn symmetric_image_is_hflip_fixed_point() {
        let x = Tensor4::from_fn(Shape::new(1, 1, 4, 6), |_, _, h, w| (h * 7 + w.min(5 - w)) as f64);
        assert_eq!(TransformOp::HFlip.apply(&x).unwrap(), x);
    }

    #[test]
    fn out_of_bounds_crop_is_rejected() {
        let t = TransformOp::Crop {
            top: 20,
            left: 0,
            crop_h: 48,
            crop_w: 48,
        };
        let x = Tensor4::zeros(Shape::new(1, 1, 64, 64));
        assert!(matches!(t.apply(&x), Err(Error::CropOutOfBounds { .. })));
    }

    #[test]
    fn sampling_is_reproducible_and_balanced() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10_000).map(|_| sample_transform(&mut rng, 64, 64, 8)).collect::<alloc::vec::Vec<_>>()
        };
        let a = draw(3);
        assert_eq!(a, draw(3));
        for kind in ["hflip", "vflip", "crop"] {
            let f = a.iter().filter(|t| t.kind() == kind).count() as f64 / 10_000.0;
            assert!((0.30..=0.37).contains(&f), "{kind}: {f}");
        }
        for t in &a {
            if let TransformOp::Crop { top, left, crop_h, crop_w } = *t {
                assert_eq!((crop_h, crop_w), (48, 48));
                assert!(top + crop_h <= 64 && left + crop_w <= 64);
            }
        }
    }
}
