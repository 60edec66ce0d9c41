//! Run configuration file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lfc_core::adapt::{Ablation, AdaptConfig};
use lfc_core::model::SegNetConfig;
use lfc_core::train::SourceTrainConfig;

use crate::error::{CliError, CliResult};
use crate::kv::Pairs;

pub const RESOLVED_CONFIG: &str = "config.resolved";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub r_max: usize,
    pub delta: f64,
    pub ablation: Ablation,
    pub source_epochs: usize,
    pub data: Option<PathBuf>,
    pub source_model: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = AdaptConfig::default();
        RunConfig {
            seed: a.seed,
            epochs: a.epochs,
            batch_size: a.batch_size,
            lr: a.lr,
            tau: a.tau,
            r_max: a.r_max,
            delta: a.delta,
            ablation: a.ablation,
            source_epochs: SourceTrainConfig::default().epochs,
            data: None,
            source_model: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> CliResult<Self> {
        let mut p = Pairs::parse(text, path)?;
        let d = RunConfig::default();
        let cfg = RunConfig {
            seed: p.take("seed")?.unwrap_or(d.seed),
            epochs: p.take("epochs")?.unwrap_or(d.epochs),
            batch_size: p.take("batch_size")?.unwrap_or(d.batch_size),
            lr: p.take("lr")?.unwrap_or(d.lr),
            tau: p.take("tau")?.unwrap_or(d.tau),
            r_max: p.take("r_max")?.unwrap_or(d.r_max),
            delta: p.take("delta")?.unwrap_or(d.delta),
            ablation: p.take("ablation")?.unwrap_or(d.ablation),
            source_epochs: p.take("source_epochs")?.unwrap_or(d.source_epochs),
            data: p.take_str("data").map(PathBuf::from),
            source_model: p.take_str("source_model").map(PathBuf::from),
        };
        p.finish()?;
        cfg.adapt_config()
            .validate()
            .map_err(|e| CliError::format(path, e.to_string()))?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(CliError::input(p))?;
                RunConfig::parse(&text, p)
            }
        }
    }

    /// Every key with its effective value, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "epochs = {}", self.epochs).unwrap();
        writeln!(s, "batch_size = {}", self.batch_size).unwrap();
        writeln!(s, "lr = {}", self.lr).unwrap();
        writeln!(s, "tau = {}", self.tau).unwrap();
        writeln!(s, "r_max = {}", self.r_max).unwrap();
        writeln!(s, "delta = {}", self.delta).unwrap();
        writeln!(s, "ablation = {}", self.ablation).unwrap();
        writeln!(s, "source_epochs = {}", self.source_epochs).unwrap();
        if let Some(d) = &self.data {
            writeln!(s, "data = {}", d.display()).unwrap();
        }
        if let Some(m) = &self.source_model {
            writeln!(s, "source_model = {}", m.display()).unwrap();
        }
        s
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            tau: self.tau,
            r_max: self.r_max,
            delta: self.delta,
            ablation: self.ablation,
        }
    }

    pub fn source_config(&self) -> SourceTrainConfig {
        SourceTrainConfig {
            seed: self.seed,
            epochs: self.source_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            model: SegNetConfig::default(),
        }
    }
}
