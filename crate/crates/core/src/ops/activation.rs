
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub fn relu(input: &Tensor4) -> Tensor4 {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(grad_out: &Tensor4, input: &Tensor4) -> Tensor4 {
    let mut g = grad_out.clone();
    for (d, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *d = 0.0;
        }
    }
    g
}

/// Softmax across the channel axis at every pixel, with max subtraction.
pub fn softmax_channels(logits: &Tensor4) -> Result<Tensor4> {
    let s = logits.shape();
    if s.c < 2 {
        return Err(Error::Config("softmax needs at least two channels".into()));
    }
    let plane = s.plane();
    let mut out = Tensor4::zeros(s);
    let src = logits.data();
    let dst = out.data_mut();
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for c in 0..s.c {
                max = max.max(src[base + c * plane + p]);
            }
            let mut sum = 0.0;
            for c in 0..s.c {
                let e = libm::exp(src[base + c * plane + p] - max);
                dst[base + c * plane + p] = e;
                sum += e;
            }
            for c in 0..s.c {
                dst[base + c * plane + p] /= sum;
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of the channel softmax given its output.
pub fn softmax_backward(grad_out: &Tensor4, prob: &Tensor4) -> Tensor4 {
    let s = prob.shape();
    let plane = s.plane();
    let mut gin = Tensor4::zeros(s);
    let (g, p) = (grad_out.data(), prob.data());
    let dst = gin.data_mut();
    for n in 0..s.n {
        let base = n * s.c * plane;
        for px in 0..plane {
            let mut dotp = 0.0;
            for c in 0..s.c {
                let i = base + c * plane + px;
                dotp += g[i] * p[i];
            }
            for c in 0..s.c {
                let i = base + c * plane + px;
                dst[i] = p[i] * (g[i] - dotp);
            }
        }
    }
    gin
}

/// Index of the most probable class per pixel; ties go to the lowest index.
pub fn argmax_channels(prob: &Tensor4, n: usize) -> alloc::vec::Vec<u8> {
    let s = prob.shape();
    let plane = s.plane();
    let data = prob.sample_slice(n);
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..s.c {
                if data[c * plane + p] > data[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use alloc::vec;

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let p = softmax_channels(&Tensor4::full(Shape::new(1, 3, 2, 2), 0.7)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn closed_form_two_class() {
        let l = Tensor4::from_vec(Shape::new(1, 2, 1, 1), vec![0.0, libm::log(3.0)]).unwrap();
        let p = softmax_channels(&l).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn shift_invariance() {
        let l = Tensor4::from_fn(Shape::new(2, 3, 2, 3), |n, c, h, w| (n + 2 * c + h * w) as f64 * 0.3 - 1.0);
        let shifted = l.map(|v| v + 100.0);
        let (a, b) = (softmax_channels(&l).unwrap(), softmax_channels(&shifted).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_channel_is_rejected() {
        assert!(softmax_channels(&Tensor4::zeros(Shape::new(1, 1, 2, 2))).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = Tensor4::from_vec(Shape::new(1, 3, 1, 2), vec![0.4, 0.2, 0.4, 0.2, 0.2, 0.6]).unwrap();
        assert_eq!(argmax_channels(&p, 0), vec![0, 2]);
    }
}
