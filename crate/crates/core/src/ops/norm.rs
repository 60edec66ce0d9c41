//! Batch normalization over the (n, h, w) axes of each channel.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and fold them into the running
    /// statistics with an exponential moving average.
    Train,
    /// Normalize with the running statistics only.
    Eval,
    /// Accumulate an exact pooled mean/variance over every batch seen since
    /// the last reset, and normalize with the statistics accumulated so far.
    Recalibrate,
}

/// Pooled per-channel mean and sum of squared deviations (Chan et al. merge).
#[derive(Debug, Clone, PartialEq)]
pub struct StatsAccumulator {
    pub count: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(channels: usize) -> Self {
        StatsAccumulator {
            count: 0.0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    pub fn merge(&mut self, batch: &BatchStats) {
        let nb = batch.count;
        let total = self.count + nb;
        for c in 0..self.mean.len() {
            let delta = batch.mean[c] - self.mean[c];
            self.mean[c] += delta * nb / total;
            self.m2[c] += batch.var[c] * nb + delta * delta * self.count * nb / total;
        }
        self.count = total;
    }

    /// Unbiased pooled variance.
    pub fn variance(&self) -> Vec<f64> {
        let denom = if self.count > 1.0 { self.count - 1.0 } else { 1.0 };
        self.m2.iter().map(|m| m / denom).collect()
    }
}

/// Per-channel batch mean and biased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub count: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchStats {
    pub fn compute(input: &Tensor4) -> Result<BatchStats> {
        let s = input.shape();
        let count = s.n * s.h * s.w;
        if count == 0 {
            return Err(Error::Degenerate("batch norm over zero pixels"));
        }
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        for c in 0..s.c {
            let mut sum = 0.0;
            for n in 0..s.n {
                sum += input.plane(n, c).iter().sum::<f64>();
            }
            let m = sum / count as f64;
            let mut sq = 0.0;
            for n in 0..s.n {
                sq += input.plane(n, c).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            mean[c] = m;
            var[c] = sq / count as f64;
        }
        Ok(BatchStats {
            count: count as f64,
            mean,
            var,
        })
    }

    fn unbiased_var(&self) -> Vec<f64> {
        if self.count > 1.0 {
            let k = self.count / (self.count - 1.0);
            self.var.iter().map(|v| v * k).collect()
        } else {
            self.var.clone()
        }
    }
}

/// Running statistics of one batch-norm layer. The affine `gamma`/`beta`
/// live with the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub name: String,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    /// Present only while a recalibration pass is in progress.
    pub recalibration: Option<StatsAccumulator>,
}

/// Deferred change to a [`BatchNormState`] produced by a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum BnUpdate {
    Running { mean: Vec<f64>, var: Vec<f64> },
    Recalibrated(StatsAccumulator),
}

impl BatchNormState {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNormState {
            name: name.into(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
            recalibration: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn apply(&mut self, update: BnUpdate) {
        match update {
            BnUpdate::Running { mean, var } => {
                self.running_mean = mean;
                self.running_var = var;
            }
            BnUpdate::Recalibrated(acc) => {
                self.running_mean = acc.mean.clone();
                self.running_var = acc.variance();
                self.recalibration = Some(acc);
            }
        }
    }

    pub fn begin_recalibration(&mut self) {
        self.recalibration = Some(StatsAccumulator::new(self.channels()));
    }

    /// Freezes the accumulated statistics into the running statistics.
    pub fn finish_recalibration(&mut self) {
        if let Some(acc) = self.recalibration.take() {
            if acc.count > 0.0 {
                self.running_mean = acc.mean.clone();
                self.running_var = acc.variance();
            }
        }
    }
}

/// Result of a batch-norm forward pass, with everything backward needs.
#[derive(Debug, Clone)]
pub struct BnForward {
    pub output: Tensor4,
    pub normalized: Tensor4,
    pub inv_std: Vec<f64>,
    /// True when the normalization statistics depend on the batch itself.
    pub batch_dependent: bool,
    pub update: Option<BnUpdate>,
}

pub fn batch_norm_forward(
    input: &Tensor4,
    gamma: &[f64],
    beta: &[f64],
    state: &BatchNormState,
    mode: BnMode,
) -> Result<BnForward> {
    let s = input.shape();
    if s.c != state.channels() || gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            left: s,
            right: Shape::new(1, state.channels(), 1, 1),
        });
    }
    if s.n * s.h * s.w == 0 {
        return Err(Error::Degenerate("batch norm over zero pixels"));
    }
    let (mean, var, batch_dependent, update) = match mode {
        BnMode::Eval => (state.running_mean.clone(), state.running_var.clone(), false, None),
        BnMode::Train => {
            let stats = BatchStats::compute(input)?;
            let m = state.momentum;
            let unbiased = stats.unbiased_var();
            let run_mean = state
                .running_mean
                .iter()
                .zip(&stats.mean)
                .map(|(r, b)| (1.0 - m) * r + m * b)
                .collect();
            let run_var = state
                .running_var
                .iter()
                .zip(&unbiased)
                .map(|(r, b)| (1.0 - m) * r + m * b)
                .collect();
            (
                stats.mean,
                stats.var,
                true,
                Some(BnUpdate::Running {
                    mean: run_mean,
                    var: run_var,
                }),
            )
        }
        BnMode::Recalibrate => {
            let stats = BatchStats::compute(input)?;
            let mut acc = state
                .recalibration
                .clone()
                .unwrap_or_else(|| StatsAccumulator::new(s.c));
            acc.merge(&stats);
            let var = acc.variance();
            (acc.mean.clone(), var, false, Some(BnUpdate::Recalibrated(acc)))
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + state.eps)).collect();
    let mut normalized = Tensor4::zeros(s);
    let mut output = Tensor4::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (m, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            let src = input.plane(n, c);
            let xh = normalized.plane_mut(n, c);
            for (d, &x) in xh.iter_mut().zip(src) {
                *d = (x - m) * is;
            }
            let xh = normalized.plane(n, c);
            let out = output.plane_mut(n, c);
            for (o, &x) in out.iter_mut().zip(xh) {
                *o = g * x + b;
            }
        }
    }
    Ok(BnForward {
        output,
        normalized,
        inv_std,
        batch_dependent,
        update,
    })
}

/// Gradients `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_backward(
    grad_out: &Tensor4,
    normalized: &Tensor4,
    inv_std: &[f64],
    gamma: &[f64],
    batch_dependent: bool,
) -> (Tensor4, Vec<f64>, Vec<f64>) {
    let s = grad_out.shape();
    let count = (s.n * s.h * s.w) as f64;
    let mut d_gamma = vec![0.0; s.c];
    let mut d_beta = vec![0.0; s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            let g = grad_out.plane(n, c);
            let xh = normalized.plane(n, c);
            d_beta[c] += g.iter().sum::<f64>();
            d_gamma[c] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let mut d_input = Tensor4::zeros(s);
    for c in 0..s.c {
        let scale = gamma[c] * inv_std[c];
        for n in 0..s.n {
            let g = grad_out.plane(n, c);
            let xh = normalized.plane(n, c);
            let dst = d_input.plane_mut(n, c);
            if batch_dependent {
                let mg = d_beta[c] / count;
                let mgx = d_gamma[c] / count;
                for i in 0..dst.len() {
                    dst[i] = scale * (g[i] - mg - xh[i] * mgx);
                }
            } else {
                for i in 0..dst.len() {
                    dst[i] = scale * g[i];
                }
            }
        }
    }
    (d_input, d_gamma, d_beta)
}
