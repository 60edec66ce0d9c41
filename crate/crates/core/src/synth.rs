//! Synthetic fundus-like disc/cup images under controllable photometric
//! domain styles.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Image, LabelMap, Sample};
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub background_level: f64,
    pub disc_level: f64,
    pub cup_level: f64,
    pub contrast_gamma: f64,
    pub noise_sigma: f64,
    /// Relative per-sample jitter of the noise level: each image draws its
    /// sigma uniformly from `noise_sigma * [1 - spread, 1 + spread]`.
    pub noise_spread: f64,
    pub blur_radius: usize,
    pub vignette_strength: f64,
}

impl DomainSpec {
    /// Built-in source style: crisp, evenly lit, high contrast.
    pub fn default_source() -> Self {
        DomainSpec {
            name: "source".into(),
            background_level: 0.2,
            disc_level: 0.55,
            cup_level: 0.85,
            contrast_gamma: 1.0,
            noise_sigma: 0.04,
            noise_spread: 0.0,
            blur_radius: 0,
            vignette_strength: 0.0,
        }
    }

    /// Built-in target style: source intensities under much heavier noise
    /// whose strength varies from image to image.
    pub fn default_target() -> Self {
        DomainSpec {
            name: "target".into(),
            background_level: 0.2,
            disc_level: 0.55,
            cup_level: 0.85,
            contrast_gamma: 1.0,
            noise_sigma: 0.2,
            noise_spread: 0.75,
            blur_radius: 0,
            vignette_strength: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(alloc::format!("domain `{}`: {what}", self.name)));
        for (field, v) in [
            ("background_level", self.background_level),
            ("disc_level", self.disc_level),
            ("cup_level", self.cup_level),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&alloc::format!("{field} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.contrast_gamma.is_finite() && self.contrast_gamma > 0.0) {
            return bad("contrast_gamma must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.noise_spread) {
            return bad("noise_spread must lie in [0, 1]");
        }
        if !(self.vignette_strength.is_finite() && self.vignette_strength >= 0.0) {
            return bad("vignette_strength must be non-negative");
        }
        if self.name.is_empty() || self.name.chars().any(|c| c.is_whitespace() || c == '=') {
            return bad("name must be a non-empty token without whitespace or `=`");
        }
        Ok(())
    }

    /// True when the two specs render differently.
    pub fn photometrically_differs(&self, other: &DomainSpec) -> bool {
        let strip = |s: &DomainSpec| DomainSpec {
            name: String::new(),
            ..s.clone()
        };
        strip(self) != strip(other)
    }
}

/// Disc and cup ellipses of one sample, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub center_y: f64,
    pub center_x: f64,
    pub disc_ry: f64,
    pub disc_rx: f64,
    /// Cup centre offset relative to the disc centre.
    pub cup_dy: f64,
    pub cup_dx: f64,
    pub cup_ry: f64,
    pub cup_rx: f64,
}

impl Geometry {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Self {
        let s = size as f64;
        let disc_r = rng.gen_range(0.17..0.27) * s;
        let ecc = rng.gen_range(0.85..1.15);
        let (disc_ry, disc_rx) = (disc_r * ecc, disc_r / ecc);
        let margin = disc_ry.max(disc_rx) + 2.0;
        let center_y = rng.gen_range(margin..s - margin);
        let center_x = rng.gen_range(margin..s - margin);
        let ratio = rng.gen_range(0.35..0.65);
        let cup_ecc = rng.gen_range(0.9..1.1);
        let (cup_ry, cup_rx) = (disc_ry * ratio * cup_ecc, disc_rx * ratio / cup_ecc);
        // Keep the cup at least one pixel away from the disc rim.
        let slack_y = (disc_ry - cup_ry - 1.5).max(0.0) * 0.5;
        let slack_x = (disc_rx - cup_rx - 1.5).max(0.0) * 0.5;
        Geometry {
            center_y,
            center_x,
            disc_ry,
            disc_rx,
            cup_dy: rng.gen_range(-1.0..=1.0) * slack_y,
            cup_dx: rng.gen_range(-1.0..=1.0) * slack_x,
            cup_ry,
            cup_rx,
        }
    }

    fn inside(py: f64, px: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> bool {
        let (dy, dx) = ((py - cy) / ry, (px - cx) / rx);
        dy * dy + dx * dx <= 1.0
    }

    /// Class map: 0 background, 1 disc rim, 2 cup. The cup is clipped to
    /// the disc so nesting holds by construction.
    pub fn render(&self, size: usize) -> LabelMap {
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let disc = Self::inside(py, px, self.center_y, self.center_x, self.disc_ry, self.disc_rx);
                let cup = disc
                    && Self::inside(
                        py,
                        px,
                        self.center_y + self.cup_dy,
                        self.center_x + self.cup_dx,
                        self.cup_ry,
                        self.cup_rx,
                    );
                data.push(u8::from(disc) + u8::from(cup));
            }
        }
        LabelMap {
            height: size,
            width: size,
            data,
        }
    }
}

/// SplitMix64 finaliser, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn box_blur(values: &[f64], size: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return values.to_vec();
    }
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = alloc::vec![0.0; src.len()];
        for y in 0..size {
            for x in 0..size {
                let (lo, hi) = {
                    let c = if horizontal { x } else { y };
                    (c.saturating_sub(radius), (c + radius).min(size - 1))
                };
                let mut acc = 0.0;
                for k in lo..=hi {
                    acc += if horizontal { src[y * size + k] } else { src[k * size + x] };
                }
                out[y * size + x] = acc / (hi - lo + 1) as f64;
            }
        }
        out
    };
    pass(&pass(values, true), false)
}

/// Renders the image of one sample under `spec` from its clean label map.
pub fn render_image<R: Rng + ?Sized>(spec: &DomainSpec, label: &LabelMap, rng: &mut R) -> Vec<f64> {
    let size = label.width;
    let levels = [spec.background_level, spec.disc_level, spec.cup_level];
    let sigma = if spec.noise_spread > 0.0 {
        spec.noise_sigma * (1.0 + spec.noise_spread * (2.0 * rng.gen::<f64>() - 1.0))
    } else {
        spec.noise_sigma
    };
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let noisy: Vec<f64> = label
        .data
        .iter()
        .map(|&c| {
            let v = libm::pow(levels[usize::from(c)], spec.contrast_gamma);
            let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (v + n).clamp(0.0, 1.0)
        })
        .collect();
    let blurred = box_blur(&noisy, size, spec.blur_radius);
    if spec.vignette_strength == 0.0 {
        return blurred;
    }
    let c = size as f64 / 2.0;
    let r_max2 = 2.0 * c * c;
    blurred
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (dy, dx) = ((i / size) as f64 + 0.5 - c, (i % size) as f64 + 0.5 - c);
            (v * (1.0 - spec.vignette_strength * (dy * dy + dx * dx) / r_max2)).clamp(0.0, 1.0)
        })
        .collect()
}

/// One sample, seeded by `(split_seed, id)` only.
pub fn generate_one(spec: &DomainSpec, split_seed: u64, id: u32) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(split_seed, u64::from(id)));
    let geometry = Geometry::sample(&mut rng, IMAGE_SIZE);
    let label = geometry.render(IMAGE_SIZE);
    let pixels = render_image(spec, &label, &mut rng);
    Sample {
        image: Image::new(id, IMAGE_SIZE, IMAGE_SIZE, pixels).expect("square image"),
        label,
    }
}

/// `n` samples with ids `first_id..first_id + n`.
pub fn generate(spec: &DomainSpec, n: usize, split_seed: u64, first_id: u32) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("a split needs at least one sample".into()));
    }
    Ok((0..n as u32).map(|i| generate_one(spec, split_seed, first_id + i)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchmarkSizes {
    pub source_train: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl Default for BenchmarkSizes {
    fn default() -> Self {
        BenchmarkSizes {
            source_train: 400,
            target_train: 99,
            target_test: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    SourceTrain,
    TargetTrain,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::SourceTrain, Split::TargetTrain, Split::TargetTest];

    /// Directory of the split relative to the benchmark root.
    pub fn dir(self) -> &'static str {
        match self {
            Split::SourceTrain => "source/train",
            Split::TargetTrain => "target/train",
            Split::TargetTest => "target/test",
        }
    }

    pub fn split_name(self) -> &'static str {
        match self {
            Split::SourceTrain | Split::TargetTrain => "train",
            Split::TargetTest => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::SourceTrain => 1,
            Split::TargetTrain => 2,
            Split::TargetTest => 3,
        }
    }

    pub fn seed(self, benchmark_seed: u64) -> u64 {
        mix_seed(benchmark_seed, self.stream())
    }
}

/// The three splits of a benchmark; ids are globally unique.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub seed: u64,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub splits: Vec<(Split, Vec<Sample>)>,
}

impl Benchmark {
    pub fn split(&self, split: Split) -> &[Sample] {
        self.splits
            .iter()
            .find(|(s, _)| *s == split)
            .map(|(_, v)| v.as_slice())
            .unwrap_or(&[])
    }
}

pub fn benchmark(source: &DomainSpec, target: &DomainSpec, sizes: BenchmarkSizes, seed: u64) -> Result<Benchmark> {
    source.validate()?;
    target.validate()?;
    if !source.photometrically_differs(target) {
        return Err(Error::Config("source and target specs render identically".into()));
    }
    let mut next_id = 0u32;
    let mut splits = Vec::new();
    for (split, spec, n) in [
        (Split::SourceTrain, source, sizes.source_train),
        (Split::TargetTrain, target, sizes.target_train),
        (Split::TargetTest, target, sizes.target_test),
    ] {
        splits.push((split, generate(spec, n, split.seed(seed), next_id)?));
        next_id += n as u32;
    }
    Ok(Benchmark {
        seed,
        source: source.clone(),
        target: target.clone(),
        splits,
    })
}
