//! Brute-force reference implementations and random inputs, shared by the
//! property tests and the acceptance suite.

use std::collections::HashSet;

use lfc_core::data::LabelMap;

pub struct SplitMix(pub u64);

impl SplitMix {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

/// Random class map mixing a few rectangles with salt noise, so empty,
/// thin and blob-shaped regions all occur.
pub fn random_mask(rng: &mut SplitMix, h: usize, w: usize, classes: u8) -> LabelMap {
    let mut m = LabelMap::filled(h, w, 0);
    for _ in 0..rng.below(4) {
        let cls = 1 + rng.below(classes as usize - 1) as u8;
        let (y0, x0) = (rng.below(h), rng.below(w));
        let (y1, x1) = ((y0 + 1 + rng.below(h / 2)).min(h), (x0 + 1 + rng.below(w / 2)).min(w));
        for y in y0..y1 {
            for x in x0..x1 {
                m.data[y * w + x] = cls;
            }
        }
    }
    for _ in 0..rng.below(h * w / 8 + 1) {
        let i = rng.below(h * w);
        m.data[i] = rng.below(classes as usize) as u8;
    }
    m
}

fn pixel_set(m: &LabelMap, cls: u8) -> HashSet<(usize, usize)> {
    (0..m.height)
        .flat_map(|y| (0..m.width).map(move |x| (y, x)))
        .filter(|&(y, x)| m.data[y * m.width + x] == cls)
        .collect()
}

/// Dice by set arithmetic.
pub fn dice_oracle(pred: &LabelMap, gt: &LabelMap, cls: u8) -> f64 {
    let p = pixel_set(pred, cls);
    let g = pixel_set(gt, cls);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    2.0 * p.intersection(&g).count() as f64 / (p.len() + g.len()) as f64
}

/// Boundary pixels in raster order: members with a 4-neighbour that is
/// outside the set or outside the image.
pub fn boundary_oracle(m: &LabelMap, cls: u8) -> Vec<(usize, usize)> {
    let set = pixel_set(m, cls);
    let mut out: Vec<(usize, usize)> = set
        .iter()
        .copied()
        .filter(|&(y, x)| {
            let neighbours = [
                y.checked_sub(1).map(|y| (y, x)),
                Some((y + 1, x)).filter(|&(y, _)| y < m.height),
                x.checked_sub(1).map(|x| (y, x)),
                Some((y, x + 1)).filter(|&(_, x)| x < m.width),
            ];
            neighbours.iter().any(|n| n.is_none_or(|p| !set.contains(&p)))
        })
        .collect();
    out.sort_unstable();
    out
}

fn nearest(from: (usize, usize), to: &[(usize, usize)]) -> f64 {
    to.iter()
        .map(|&(y, x)| {
            let dy = from.0 as f64 - y as f64;
            let dx = from.1 as f64 - x as f64;
            (dy * dy + dx * dx).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// All-pairs average symmetric surface distance.
pub fn asd_oracle(pred: &LabelMap, gt: &LabelMap, cls: u8) -> Option<f64> {
    let bp = boundary_oracle(pred, cls);
    let bg = boundary_oracle(gt, cls);
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let mut sum_p = 0.0;
    for &p in &bp {
        sum_p += nearest(p, &bg);
    }
    let mut sum_g = 0.0;
    for &g in &bg {
        sum_g += nearest(g, &bp);
    }
    Some((sum_p + sum_g) / (bp.len() + bg.len()) as f64)
}

/// Closed-form total of the curriculum weights of a batch of `b`.
pub fn weight_sum_oracle(b: usize, alpha: f64, delta: f64) -> f64 {
    alpha * (b as f64 * delta - 1.0) + (1.0 - alpha) * b as f64
}

/// Logistic function.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
