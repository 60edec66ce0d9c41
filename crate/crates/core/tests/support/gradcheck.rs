//! Central finite-difference gradient checks for every graph operation.

use lfc_core::ops::conv::ConvGeometry;
use lfc_core::ops::norm::{BatchNormState, BnMode};
use lfc_core::{Graph, Shape, Tensor4, Var};

pub const FD_STEP: f64 = 1e-5;
pub const LAYERS: [&str; 11] = [
    "conv2d",
    "batch_norm_train",
    "batch_norm_eval",
    "relu",
    "max_pool2",
    "upsample2",
    "concat",
    "softmax",
    "cross_entropy",
    "weighted_sum",
    "conv_bn_relu_chain",
];

/// Small deterministic generator so the checks need no extra crates.
pub struct SplitMix(u64);

impl SplitMix {
    pub fn new(seed: u64) -> Self {
        SplitMix(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: usize, hi_inclusive: usize) -> usize {
        lo + (self.next_u64() % (hi_inclusive - lo + 1) as u64) as usize
    }

    pub fn tensor(&mut self, shape: Shape, lo: f64, hi: f64) -> Tensor4 {
        Tensor4::from_fn(shape, |_, _, _, _| lo + (hi - lo) * self.unit())
    }

    /// Values bounded away from zero, so ReLU kinks are never straddled.
    pub fn signed_away_from_zero(&mut self, shape: Shape) -> Tensor4 {
        Tensor4::from_fn(shape, |_, _, _, _| {
            let m = 0.05 + self.unit();
            if self.unit() < 0.5 {
                -m
            } else {
                m
            }
        })
    }
}

/// Builds the operation under test from its leaves and returns its output.
type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

fn loss_of(leaves: &[Tensor4], probe: &Tensor4, build: &Build<'_>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t, true).unwrap()).collect();
    let out = build(&mut g, &vars);
    let loss = g.weighted_sum(vec![(out, probe.data().to_vec())]).unwrap();
    g.value(loss).data()[0]
}

/// Worst norm-wise relative error over all leaves between the analytic
/// gradient of `Σ probe ⊙ op(leaves)` and central differences.
pub fn max_relative_error(leaves: &[Tensor4], probe_seed: u64, build: &Build<'_>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t, true).unwrap()).collect();
    let out = build(&mut g, &vars);
    let probe = SplitMix::new(probe_seed).tensor(g.value(out).shape(), -1.0, 1.0);
    let loss = g.weighted_sum(vec![(out, probe.data().to_vec())]).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Tensor4> = vars
        .iter()
        .zip(leaves)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor4::zeros(t.shape())))
        .collect();

    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let mut numeric = vec![0.0; leaf.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[k] += FD_STEP;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[k] -= FD_STEP;
            *slot = (loss_of(&plus, &probe, build) - loss_of(&minus, &probe, build)) / (2.0 * FD_STEP);
        }
        let a = analytic[li].data();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn random_bn_state(rng: &mut SplitMix, c: usize) -> BatchNormState {
    let mut s = BatchNormState::new("bn", c);
    for v in s.running_mean.iter_mut() {
        *v = rng.unit() - 0.5;
    }
    for v in s.running_var.iter_mut() {
        *v = 0.5 + rng.unit();
    }
    s
}

/// Gradient-check error of one randomized configuration of `layer`.
pub fn layer_error(layer: &str, seed: u64) -> f64 {
    let mut rng = SplitMix::new(seed ^ 0xA5A5_0000);
    let n = rng.range(1, 2);
    match layer {
        "conv2d" => {
            let k = rng.range(1, 3);
            let stride = rng.range(1, 2);
            let padding = rng.range(0, k - 1);
            let (ci, co) = (rng.range(1, 3), rng.range(1, 4));
            let (h, w) = (rng.range(k, 6), rng.range(k, 6));
            let leaves = vec![
                rng.tensor(Shape::new(n, ci, h, w), -1.0, 1.0),
                rng.tensor(Shape::new(co, ci, k, k), -1.0, 1.0),
                rng.tensor(Shape::new(1, co, 1, 1), -1.0, 1.0),
            ];
            let geom = ConvGeometry { stride, padding };
            max_relative_error(&leaves, seed, &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), geom).unwrap())
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let c = rng.range(1, 3);
            let (h, w) = (rng.range(2, 4), rng.range(2, 4));
            let state = random_bn_state(&mut rng, c);
            let mode = if layer == "batch_norm_train" { BnMode::Train } else { BnMode::Eval };
            let leaves = vec![
                rng.tensor(Shape::new(n, c, h, w), -2.0, 3.0),
                rng.tensor(Shape::new(1, c, 1, 1), 0.5, 1.5),
                rng.tensor(Shape::new(1, c, 1, 1), -0.5, 0.5),
            ];
            max_relative_error(&leaves, seed, &move |g, v| g.batch_norm(v[0], v[1], v[2], &state, mode).unwrap().0)
        }
        "relu" => {
            let shape = Shape::new(n, rng.range(1, 3), rng.range(1, 5), rng.range(1, 5));
            let leaves = vec![rng.signed_away_from_zero(shape)];
            max_relative_error(&leaves, seed, &|g, v| g.relu(v[0]).unwrap())
        }
        "max_pool2" => {
            let shape = Shape::new(n, rng.range(1, 3), 2 * rng.range(1, 3), 2 * rng.range(1, 3));
            let leaves = vec![rng.tensor(shape, -1.0, 1.0)];
            max_relative_error(&leaves, seed, &|g, v| g.max_pool2(v[0]).unwrap())
        }
        "upsample2" => {
            let shape = Shape::new(n, rng.range(1, 3), rng.range(1, 4), rng.range(1, 4));
            let leaves = vec![rng.tensor(shape, -1.0, 1.0)];
            max_relative_error(&leaves, seed, &|g, v| g.upsample2(v[0]).unwrap())
        }
        "concat" => {
            let (h, w) = (rng.range(1, 4), rng.range(1, 4));
            let (ca, cb) = (rng.range(1, 3), rng.range(1, 3));
            let leaves = vec![
                rng.tensor(Shape::new(n, ca, h, w), -1.0, 1.0),
                rng.tensor(Shape::new(n, cb, h, w), -1.0, 1.0),
            ];
            max_relative_error(&leaves, seed, &|g, v| g.concat(v[0], v[1]).unwrap())
        }
        "softmax" => {
            let shape = Shape::new(n, rng.range(2, 4), rng.range(1, 4), rng.range(1, 4));
            let leaves = vec![rng.tensor(shape, -3.0, 3.0)];
            max_relative_error(&leaves, seed, &|g, v| g.softmax(v[0]).unwrap())
        }
        "cross_entropy" => {
            let c = rng.range(2, 4);
            let (h, w) = (rng.range(1, 4), rng.range(1, 4));
            let logits = rng.tensor(Shape::new(n, c, h, w), -2.0, 2.0);
            let raw = rng.tensor(Shape::new(n, c, h, w), 0.0, 1.0);
            let target = Tensor4::from_fn(raw.shape(), |b, k, y, x| {
                let total: f64 = (0..c).map(|j| raw.at(b, j, y, x)).sum();
                raw.at(b, k, y, x) / total
            });
            let mut mask = Tensor4::from_fn(Shape::new(n, 1, h, w), |_, _, _, _| f64::from(rng.unit() < 0.6));
            for b in 0..n {
                mask.set(b, 0, 0, 0, 1.0);
            }
            let leaves = vec![logits];
            max_relative_error(&leaves, seed, &move |g, v| {
                let p = g.softmax(v[0]).unwrap();
                g.cross_entropy(p, target.clone(), mask.clone()).unwrap()
            })
        }
        "weighted_sum" => {
            let a = rng.tensor(Shape::new(n, 2, 2, 2), -1.0, 1.0);
            let b = rng.tensor(Shape::new(1, 3, 1, 1), -1.0, 1.0);
            let wa: Vec<f64> = (0..a.len()).map(|_| rng.unit()).collect();
            let wb: Vec<f64> = (0..b.len()).map(|_| rng.unit()).collect();
            let leaves = vec![a, b];
            max_relative_error(&leaves, seed, &move |g, v| {
                g.weighted_sum(vec![(v[0], wa.clone()), (v[1], wb.clone())]).unwrap()
            })
        }
        "conv_bn_relu_chain" => {
            let (ci, co) = (rng.range(1, 2), rng.range(2, 3));
            let side = 2 * rng.range(1, 2);
            let state = random_bn_state(&mut rng, co);
            let leaves = vec![
                rng.tensor(Shape::new(2, ci, side, side), -1.0, 1.0),
                rng.tensor(Shape::new(co, ci, 3, 3), -1.0, 1.0),
                rng.tensor(Shape::new(1, co, 1, 1), 0.5, 1.5),
                rng.tensor(Shape::new(1, co, 1, 1), 0.5, 1.0),
            ];
            max_relative_error(&leaves, seed, &move |g, v| {
                let y = g.conv2d(v[0], v[1], None, ConvGeometry::same3x3()).unwrap();
                let (y, _) = g.batch_norm(y, v[2], v[3], &state, BnMode::Train).unwrap();
                let y = g.relu(y).unwrap();
                let p = g.max_pool2(y).unwrap();
                let u = g.upsample2(p).unwrap();
                let cat = g.concat(u, y).unwrap();
                g.softmax(cat).unwrap()
            })
        }
        other => panic!("unknown layer {other}"),
    }
}

/// Direct nested-loop correlation with zero padding.
pub fn conv_oracle(x: &Tensor4, w: &Tensor4, b: Option<&Tensor4>, geom: ConvGeometry) -> Tensor4 {
    let (is, ws) = (x.shape(), w.shape());
    let oh = (is.h + 2 * geom.padding - ws.h) / geom.stride + 1;
    let ow = (is.w + 2 * geom.padding - ws.w) / geom.stride + 1;
    Tensor4::from_fn(Shape::new(is.n, ws.n, oh, ow), |n, co, oy, ox| {
        let mut acc = 0.0;
        for ci in 0..is.c {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < is.h && (ix as usize) < is.w {
                        acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                    }
                }
            }
        }
        match b {
            Some(b) => acc + b.data()[co],
            None => acc,
        }
    })
}

/// Compares the library convolution with [`conv_oracle`] on a random
/// `1×2×5×5` input; true when every output is bit-identical.
pub fn conv_matches_oracle(seed: u64) -> bool {
    let mut rng = SplitMix::new(seed);
    let k = rng.range(1, 3);
    let geom = ConvGeometry {
        stride: rng.range(1, 2),
        padding: rng.range(0, k - 1),
    };
    let co = rng.range(1, 4);
    let x = rng.tensor(Shape::new(1, 2, 5, 5), -1.0, 1.0);
    let w = rng.tensor(Shape::new(co, 2, k, k), -1.0, 1.0);
    let b = rng.tensor(Shape::new(1, co, 1, 1), -1.0, 1.0);
    let got = lfc_core::ops::conv2d_forward(&x, &w, Some(&b), geom).unwrap();
    let want = conv_oracle(&x, &w, Some(&b), geom);
    got.shape() == want.shape() && got.data().iter().zip(want.data()).all(|(a, b)| a.to_bits() == b.to_bits())
}
