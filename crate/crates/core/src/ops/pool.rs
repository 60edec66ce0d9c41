//! Spatial resampling and channel concatenation used by the U-Net.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

/// 2×2 max pooling with stride 2. Returns the output and, per output
/// element, the flat input index that won (first maximum in raster order).
pub fn max_pool2(input: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::Config(alloc::format!(
            "max pooling needs even spatial dims, got {s}"
        )));
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor4::zeros(os);
    let mut argmax = Vec::with_capacity(os.len());
    let src = input.data();
    let dst = out.data_mut();
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut best = base + 2 * oy * s.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    dst[o] = src[best];
                    argmax.push(best);
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn max_pool2_backward(grad_out: &Tensor4, argmax: &[usize], input_shape: Shape) -> Tensor4 {
    let mut g = Tensor4::zeros(input_shape);
    let dst = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        dst[i] += v;
    }
    g
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(input: &Tensor4) -> Tensor4 {
    let s = input.shape();
    let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let mut out = Tensor4::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..os.h {
                for x in 0..os.w {
                    dst[y * os.w + x] = src[(y / 2) * s.w + x / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor4) -> Tensor4 {
    let os = grad_out.shape();
    let s = Shape::new(os.n, os.c, os.h / 2, os.w / 2);
    let mut g = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = grad_out.plane(n, c);
            let dst = g.plane_mut(n, c);
            for y in 0..os.h {
                for x in 0..os.w {
                    dst[(y / 2) * s.w + x / 2] += src[y * os.w + x];
                }
            }
        }
    }
    g
}

/// Concatenates along the channel axis.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::ShapeMismatch {
            op: "concat",
            left: sa,
            right: sb,
        });
    }
    let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(os.len());
    for n in 0..sa.n {
        data.extend_from_slice(a.sample_slice(n));
        data.extend_from_slice(b.sample_slice(n));
    }
    Tensor4::from_vec(os, data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(grad: &Tensor4, first: usize) -> (Tensor4, Tensor4) {
    let s = grad.shape();
    let sa = Shape::new(s.n, first, s.h, s.w);
    let sb = Shape::new(s.n, s.c - first, s.h, s.w);
    let mut da = Vec::with_capacity(sa.len());
    let mut db = Vec::with_capacity(sb.len());
    let cut = first * s.plane();
    for n in 0..s.n {
        let sample = grad.sample_slice(n);
        da.extend_from_slice(&sample[..cut]);
        db.extend_from_slice(&sample[cut..]);
    }
    (
        Tensor4::from_vec(sa, da).expect("split length"),
        Tensor4::from_vec(sb, db).expect("split length"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_then_upsample_shapes() {
        let x = Tensor4::from_fn(Shape::new(1, 2, 4, 6), |_, c, h, w| (c * 24 + h * 6 + w) as f64);
        let (p, idx) = max_pool2(&x).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 2, 2, 3));
        assert_eq!(p.at(0, 0, 0, 0), 7.0);
        assert_eq!(idx[0], 7);
        assert_eq!(upsample2(&p).shape(), x.shape());
        assert!(max_pool2(&Tensor4::zeros(Shape::new(1, 1, 3, 4))).is_err());
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor4::from_fn(Shape::new(2, 1, 2, 2), |n, _, h, w| (n * 4 + h * 2 + w) as f64);
        let b = a.map(|v| -v);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.at(1, 1, 1, 1), -7.0);
        let (x, y) = split_channels(&c, 1);
        assert_eq!((x, y), (a, b));
    }
}
