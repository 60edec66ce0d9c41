//! Benchmark directory tree: per-split manifests plus PGM images and labels.
//!
//! ```text
//! <root>/source/train/{manifest.txt, images/, labels/}
//! <root>/target/train/...
//! <root>/target/test/...
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lfc_core::data::{Image, Sample};
use lfc_core::synth::{Benchmark, DomainSpec, Split};

use crate::error::{CliError, CliResult};
use crate::kv::Pairs;
use crate::pgm;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: u32,
    pub image: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub split: Split,
    /// Benchmark seed; the split seed is derived from it.
    pub seed: u64,
    pub spec: DomainSpec,
    pub entries: Vec<ManifestEntry>,
}

fn split_tag(split: Split) -> &'static str {
    match split {
        Split::SourceTrain => "source_train",
        Split::TargetTrain => "target_train",
        Split::TargetTest => "target_test",
    }
}

pub fn spec_to_text(spec: &DomainSpec) -> String {
    format!(
        "name = {}\nbackground_level = {}\ndisc_level = {}\ncup_level = {}\ncontrast_gamma = {}\nnoise_sigma = {}\nnoise_spread = {}\nblur_radius = {}\nvignette_strength = {}\n",
        spec.name,
        spec.background_level,
        spec.disc_level,
        spec.cup_level,
        spec.contrast_gamma,
        spec.noise_sigma,
        spec.noise_spread,
        spec.blur_radius,
        spec.vignette_strength
    )
}

fn spec_from_pairs(pairs: &mut Pairs<'_>) -> CliResult<DomainSpec> {
    Ok(DomainSpec {
        name: pairs.require("name")?,
        background_level: pairs.require("background_level")?,
        disc_level: pairs.require("disc_level")?,
        cup_level: pairs.require("cup_level")?,
        contrast_gamma: pairs.require("contrast_gamma")?,
        noise_sigma: pairs.require("noise_sigma")?,
        noise_spread: pairs.take("noise_spread")?.unwrap_or(0.0),
        blur_radius: pairs.require("blur_radius")?,
        vignette_strength: pairs.require("vignette_strength")?,
    })
}

/// Reads a domain spec file (`key = value`; every field but `noise_spread` is required).
pub fn read_spec(path: &Path) -> CliResult<DomainSpec> {
    let text = fs::read_to_string(path).map_err(CliError::input(path))?;
    let mut pairs = Pairs::parse(&text, path)?;
    let spec = spec_from_pairs(&mut pairs)?;
    pairs.finish()?;
    spec.validate().map_err(|e| CliError::format(path, e.to_string()))?;
    Ok(spec)
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let first = self.entries.first().map_or(0, |e| e.id);
        writeln!(out, "split = {}", split_tag(self.split)).unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        writeln!(out, "split_seed = {}", self.split.seed(self.seed)).unwrap();
        writeln!(out, "first_id = {first}").unwrap();
        writeln!(out, "count = {}", self.entries.len()).unwrap();
        out.push_str(&spec_to_text(&self.spec));
        out.push('\n');
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{}", e.id, e.image, e.label).unwrap();
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> CliResult<Self> {
        let (head, body) = text
            .split_once("\n\n")
            .ok_or_else(|| CliError::format(path, "no blank line between header and entries"))?;
        let mut pairs = Pairs::parse(head, path)?;
        let tag: String = pairs.require("split")?;
        let split = Split::ALL
            .into_iter()
            .find(|s| split_tag(*s) == tag)
            .ok_or_else(|| CliError::format(path, format!("unknown split `{tag}`")))?;
        let seed: u64 = pairs.require("seed")?;
        let split_seed: u64 = pairs.require("split_seed")?;
        let _first: u32 = pairs.require("first_id")?;
        let count: usize = pairs.require("count")?;
        if split_seed != split.seed(seed) {
            return Err(CliError::format(path, "split_seed does not match seed"));
        }
        let spec = spec_from_pairs(&mut pairs)?;
        pairs.finish()?;
        let entries = body
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                let bad = || CliError::format(path, format!("entry {}: expected `id<TAB>image<TAB>label`", i + 1));
                let mut cols = line.split('\t');
                let (Some(id), Some(image), Some(label), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
                    return Err(bad());
                };
                Ok(ManifestEntry {
                    id: id.parse().map_err(|_| bad())?,
                    image: image.into(),
                    label: label.into(),
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        if entries.len() != count {
            return Err(CliError::format(path, format!("header count {count}, {} entries", entries.len())));
        }
        Ok(Manifest {
            split,
            seed,
            spec,
            entries,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(CliError::output(path))
}

/// Writes one split under `root` and returns its manifest.
pub fn write_split(root: &Path, split: Split, seed: u64, spec: &DomainSpec, samples: &[Sample]) -> CliResult<Manifest> {
    let dir = root.join(split.dir());
    for sub in ["images", "labels"] {
        fs::create_dir_all(dir.join(sub)).map_err(CliError::output(dir.join(sub)))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image = format!("images/{:06}.pgm", s.id());
        let label = format!("labels/{:06}.pgm", s.id());
        write_file(&dir.join(&image), &pgm::encode_image(&s.image))?;
        write_file(&dir.join(&label), &pgm::encode_label(&s.label))?;
        entries.push(ManifestEntry { id: s.id(), image, label });
    }
    let manifest = Manifest {
        split,
        seed,
        spec: spec.clone(),
        entries,
    };
    write_file(&dir.join(MANIFEST), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

pub fn write_benchmark(root: &Path, bench: &Benchmark) -> CliResult<()> {
    for (split, samples) in &bench.splits {
        let spec = match split {
            Split::SourceTrain => &bench.source,
            _ => &bench.target,
        };
        write_split(root, *split, bench.seed, spec, samples)?;
    }
    Ok(())
}

pub fn manifest_path(root: &Path, split: Split) -> PathBuf {
    root.join(split.dir()).join(MANIFEST)
}

pub fn read_manifest(root: &Path, split: Split) -> CliResult<Manifest> {
    let path = manifest_path(root, split);
    let text = fs::read_to_string(&path).map_err(CliError::input(&path))?;
    let m = Manifest::parse(&text, &path)?;
    if m.split != split {
        return Err(CliError::format(&path, format!("manifest describes split `{}`", split_tag(m.split))));
    }
    Ok(m)
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(CliError::input(path))
}

/// Loads the labelled samples of one split.
pub fn load_split(root: &Path, split: Split) -> CliResult<Vec<Sample>> {
    let manifest = read_manifest(root, split)?;
    let dir = root.join(split.dir());
    manifest
        .entries
        .iter()
        .map(|e| {
            let ipath = dir.join(&e.image);
            let lpath = dir.join(&e.label);
            let image = pgm::decode_image(&read_bytes(&ipath)?, e.id).map_err(|source| CliError::Pgm { path: ipath, source })?;
            let label = pgm::decode_label(&read_bytes(&lpath)?).map_err(|source| CliError::Pgm {
                path: lpath.clone(),
                source,
            })?;
            if (label.height, label.width) != (image.height(), image.width()) {
                return Err(CliError::format(lpath, "label size differs from its image"));
            }
            Ok(Sample { image, label })
        })
        .collect()
}

/// Images only; labels are never opened.
pub fn load_images(root: &Path, split: Split) -> CliResult<Vec<Image>> {
    let manifest = read_manifest(root, split)?;
    let dir = root.join(split.dir());
    manifest
        .entries
        .iter()
        .map(|e| {
            let path = dir.join(&e.image);
            pgm::decode_image(&read_bytes(&path)?, e.id).map_err(|source| CliError::Pgm { path, source })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            split: Split::TargetTest,
            seed: 42,
            spec: DomainSpec::default_target(),
            entries: vec![ManifestEntry {
                id: 7,
                image: "images/000007.pgm".into(),
                label: "labels/000007.pgm".into(),
            }],
        };
        let text = m.to_text();
        assert!(text.contains("count = 1\n"));
        assert_eq!(Manifest::parse(&text, Path::new("m")).unwrap(), m);
        let bad = text.replace("count = 1", "count = 2");
        assert!(Manifest::parse(&bad, Path::new("m")).is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = DomainSpec::default_source();
        let text = spec_to_text(&spec);
        let p = Path::new("s");
        let mut pairs = Pairs::parse(&text, p).unwrap();
        assert_eq!(spec_from_pairs(&mut pairs).unwrap(), spec);
        pairs.finish().unwrap();
    }
}
