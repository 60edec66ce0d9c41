//! Dice overlap, average symmetric surface distance and aggregate reports.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{batch_images, batch_ranges, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::model::ModelBranch;
use crate::ops::activation::argmax_channels;

fn check_same_grid(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) || a.data.len() != b.data.len() {
        return Err(Error::Config(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)` for class `cls`; 1 when both are empty.
pub fn dice(pred: &LabelMap, gt: &LabelMap, cls: u8) -> Result<f64> {
    check_same_grid(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (a == cls, b == cls);
        p += usize::from(ia);
        g += usize::from(ib);
        both += usize::from(ia && ib);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Class pixels with at least one 4-neighbour outside the class; the image
/// border counts as outside. Raster order.
pub fn boundary(mask: &LabelMap, cls: u8) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.get(y as usize, x as usize) == cls
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != cls {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !(inside(yi - 1, xi) && inside(yi + 1, xi) && inside(yi, xi - 1) && inside(yi, xi + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Larger than any squared distance on a realistic grid; exact in f64.
const FAR: f64 = 1e15;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        let intersect = |vk: usize| {
            let vf = vk as f64;
            ((f[q] + qf * qf) - (f[vk] + vf * vf)) / (2.0 * qf - 2.0 * vf)
        };
        // z[0] is −∞, so this stops at k = 0 at the latest.
        let mut s = intersect(v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
fn squared_distance_map(h: usize, w: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![FAR; h * w];
    for &(y, x) in seeds {
        grid[y * w + x] = 0.0;
    }
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Average symmetric surface distance in pixels between the class-`cls`
/// boundaries of `pred` and `gt`. `None` when either boundary is empty.
pub fn asd(pred: &LabelMap, gt: &LabelMap, cls: u8) -> Result<Option<f64>> {
    check_same_grid(pred, gt)?;
    let bp = boundary(pred, cls);
    let bg = boundary(gt, cls);
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let (h, w) = (gt.height, gt.width);
    let to_g = squared_distance_map(h, w, &bg);
    let to_p = squared_distance_map(h, w, &bp);
    let sum_p: f64 = bp.iter().map(|&(y, x)| libm::sqrt(to_g[y * w + x])).sum();
    let sum_g: f64 = bg.iter().map(|&(y, x)| libm::sqrt(to_p[y * w + x])).sum();
    Ok(Some((sum_p + sum_g) / (bp.len() + bg.len()) as f64))
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// `"83.18±6.46"`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2}±{std:.2}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Dice,
    Asd,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Asd => "asd",
        }
    }
}

/// Aggregate of one metric for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub class: String,
    pub metric: Metric,
    /// Dice as a fraction in `[0, 1]`, ASD in pixels.
    pub mean: f64,
    pub std: f64,
    /// Samples that entered the aggregate.
    pub n: usize,
    /// Samples left out because the value is undefined.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// `per_sample[class][sample] = (dice, asd)`.
    pub per_sample: Vec<Vec<(f64, Option<f64>)>>,
}

/// Foreground classes of the benchmark.
pub const FOREGROUND: [(u8, &str); 2] = [(1, "disc"), (2, "cup")];

impl MetricReport {
    pub fn row(&self, class: &str, metric: Metric) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.class == class && r.metric == metric)
    }

    /// Mean Dice over the given classes (fractions).
    pub fn mean_dice(&self) -> f64 {
        let rows: Vec<f64> = self.rows.iter().filter(|r| r.metric == Metric::Dice).map(|r| r.mean).collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    }
}

/// Per-class Dice and ASD over `(pred, gt)` pairs.
pub fn report(samples: &[(LabelMap, LabelMap)], classes: &[(u8, &str)]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Degenerate("metric report over no samples"));
    }
    let mut rows = Vec::new();
    let mut per_sample = Vec::new();
    for &(cls, name) in classes {
        let mut values = Vec::with_capacity(samples.len());
        for (pred, gt) in samples {
            values.push((dice(pred, gt, cls)?, asd(pred, gt, cls)?));
        }
        let dices: Vec<f64> = values.iter().map(|v| v.0).collect();
        let asds: Vec<f64> = values.iter().filter_map(|v| v.1).collect();
        let (dm, ds) = mean_std(&dices);
        rows.push(MetricRow {
            class: name.into(),
            metric: Metric::Dice,
            mean: dm,
            std: ds,
            n: dices.len(),
            excluded: 0,
        });
        let (am, as_) = mean_std(&asds);
        rows.push(MetricRow {
            class: name.into(),
            metric: Metric::Asd,
            mean: am,
            std: as_,
            n: asds.len(),
            excluded: samples.len() - asds.len(),
        });
        per_sample.push(values);
    }
    Ok(MetricReport { rows, per_sample })
}

/// Hard segmentation of every sample image by `model` in eval mode.
pub fn predict_masks(model: &ModelBranch, samples: &[Sample], batch_size: usize) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for range in batch_ranges(samples.len(), batch_size) {
        let batch = batch_images(samples[range].iter().map(|s| &s.image))?;
        let logits = model.infer(&batch)?;
        let s = logits.shape();
        for n in 0..s.n {
            out.push(LabelMap::new(s.h, s.w, argmax_channels(&logits, n))?);
        }
    }
    Ok(out)
}

/// Segments `samples` with `model` and reports foreground Dice/ASD.
pub fn evaluate_model(model: &ModelBranch, samples: &[Sample]) -> Result<MetricReport> {
    let preds = predict_masks(model, samples, 8)?;
    let pairs: Vec<(LabelMap, LabelMap)> = preds.into_iter().zip(samples.iter().map(|s| s.label.clone())).collect();
    report(&pairs, &FOREGROUND)
}
