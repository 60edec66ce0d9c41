use alloc::boxed::Box;
use alloc::string::String;

use crate::tensor::Shape;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("not a probability map: channel sum {sum} at flat pixel {pixel}")]
    NotNormalized { sum: f64, pixel: usize },
    #[error("graph usage error: {0}")]
    Graph(&'static str),
    #[error("crop {crop_h}x{crop_w} at ({top}, {left}) does not fit a {height}x{width} image")]
    CropOutOfBounds {
        top: usize,
        left: usize,
        crop_h: usize,
        crop_w: usize,
        height: usize,
        width: usize,
    },
    #[error("branches do not share an architecture")]
    ArchitectureMismatch,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {}, step {}", .0.epoch, .0.step)]
    Diverged(Box<DivergenceDump>),
}

/// Distinct failure modes when decoding a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated payload")]
    Truncated,
    #[error("shape mismatch for `{name}`")]
    ShapeMismatch { name: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// State captured when the adaptation loss stops being finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceDump {
    pub epoch: usize,
    pub step: usize,
    pub alpha: f64,
    pub omega: alloc::vec::Vec<f64>,
    pub l_fix: alloc::vec::Vec<f64>,
    pub l_sl: alloc::vec::Vec<f64>,
    pub l_total: f64,
    /// L2 norm of every parameter of the model being trained, in parameter order.
    pub param_norms: alloc::vec::Vec<(String, f64)>,
}

impl core::fmt::Display for DivergenceDump {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        writeln!(f, "epoch={}", self.epoch)?;
        writeln!(f, "step={}", self.step)?;
        writeln!(f, "alpha={}", self.alpha)?;
        writeln!(f, "omega={:?}", self.omega)?;
        writeln!(f, "l_fix={:?}", self.l_fix)?;
        writeln!(f, "l_sl={:?}", self.l_sl)?;
        writeln!(f, "l_total={}", self.l_total)?;
        for (name, norm) in &self.param_norms {
            writeln!(f, "norm[{name}]={norm}")?;
        }
        Ok(())
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
