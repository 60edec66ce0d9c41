//! Source-free adaptation: frozen source, trainable target and EMA momentum
//! branches trained with curriculum-weighted pseudo-label losses.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::curriculum::{alpha, batch_weights, kl_divergence, predict_probabilities};
use crate::data::{batch_images, batch_ranges, Image, Sample};
use crate::error::{DivergenceDump, Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::evaluate_model;
use crate::model::{adabn_init, ModelBranch, Role};
use crate::ops::activation::{argmax_channels, softmax_channels};
use crate::ops::loss::one_hot;
use crate::ops::norm::BnMode;
use crate::optim::Adam;
use crate::tensor::{Shape, Tensor4};
use crate::transform::{sample_transform, TransformOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// Both curricula.
    Full,
    /// All sample weights forced to one.
    NoEasyToHard,
    /// No momentum branch; only the source pseudo-label loss.
    NoSourceToTarget,
    /// The source model as is.
    NoAdaptation,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoEasyToHard,
        Ablation::NoSourceToTarget,
        Ablation::NoAdaptation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoEasyToHard => "no_easy2hard",
            Ablation::NoSourceToTarget => "no_src2tgt",
            Ablation::NoAdaptation => "no_adaptation",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// EMA decay of the momentum branch.
    pub tau: f64,
    pub r_max: usize,
    pub delta: f64,
    pub ablation: Ablation,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            seed: 0,
            epochs: 10,
            batch_size: 2,
            lr: 1e-3,
            tau: 0.99,
            r_max: crate::curriculum::DEFAULT_R_MAX,
            delta: crate::curriculum::DEFAULT_DELTA,
            ablation: Ablation::Full,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} (config {self:?})")));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1)");
        }
        if self.r_max == 0 {
            return bad("r_max must be at least 1");
        }
        if !self.delta.is_finite() {
            return bad("delta must be finite");
        }
        Ok(())
    }
}

/// `f^m ← τ·f^m + (1 − τ)·f^t` for every parameter and batch-norm statistic.
pub fn ema_update(momentum: &mut ModelBranch, target: &ModelBranch, tau: f64) -> Result<()> {
    if !momentum.same_architecture(target) {
        return Err(Error::ArchitectureMismatch);
    }
    let mix = |m: &mut f64, t: f64| *m = tau * *m + (1.0 - tau) * t;
    for (m, t) in momentum.parameters_mut().iter_mut().zip(target.parameters()) {
        for (a, &b) in m.value.data_mut().iter_mut().zip(t.value.data()) {
            mix(a, b);
        }
    }
    for (m, t) in momentum.bn_states_mut().iter_mut().zip(target.bn_states()) {
        for (a, &b) in m.running_mean.iter_mut().zip(&t.running_mean) {
            mix(a, b);
        }
        for (a, &b) in m.running_var.iter_mut().zip(&t.running_var) {
            mix(a, b);
        }
    }
    Ok(())
}

/// Hard one-hot labels `(n, C, h, w)` from the argmax of `f^s`; ties go to
/// the lowest class.
pub fn pseudo_label_source(source: &ModelBranch, images: &Tensor4) -> Result<Tensor4> {
    let logits = source.infer(images)?;
    let s = logits.shape();
    let parts: Vec<Tensor4> = (0..s.n)
        .map(|n| one_hot(&argmax_channels(&logits, n), s.c, s.h, s.w))
        .collect();
    Tensor4::stack(&parts.iter().collect::<Vec<_>>())
}

/// `softmax(T⁻¹(f^m(T(x))))` for one sample `(1, c, h, w)`, with the mask
/// of pixels the inverse transform recovers.
pub fn pseudo_label_momentum(momentum: &ModelBranch, image: &Tensor4, t: &TransformOp) -> Result<(Tensor4, Tensor4)> {
    let s = image.shape();
    let logits = momentum.infer(&t.apply(image)?)?;
    let (restored, mask) = t.invert(&logits, s.h, s.w)?;
    Ok((softmax_channels(&restored)?, mask))
}

/// Supervision for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelPair {
    /// Cached source labels, one-hot.
    pub y_src: Tensor4,
    /// Momentum-branch soft labels; absent without the momentum branch.
    pub y_psd: Option<Tensor4>,
    pub valid_mask: Option<Tensor4>,
}

/// Loss terms of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub alpha: f64,
    pub omega: Vec<f64>,
    pub l_fix: Vec<f64>,
    /// Empty when the momentum branch is disabled.
    pub l_sl: Vec<f64>,
    pub l_total: f64,
}

/// `Σ_b ω_b(α·l_fix,b + (1 − α)·l_sl,b) / B`, or `Σ_b ω_b·l_fix,b / B` when
/// `l_sl` is empty.
pub fn combine_losses(omega: &[f64], alpha: f64, l_fix: &[f64], l_sl: &[f64]) -> f64 {
    let b = omega.len() as f64;
    if l_sl.is_empty() {
        return omega.iter().zip(l_fix).map(|(w, f)| w * f).sum::<f64>() / b;
    }
    omega
        .iter()
        .zip(l_fix.iter().zip(l_sl))
        .map(|(w, (f, s))| w * (alpha * f + (1.0 - alpha) * s))
        .sum::<f64>()
        / b
}

/// Records the batch objective on `g` from the target probabilities `p_t`.
/// Weights are constants; gradients flow only into `p_t`.
pub fn total_loss(g: &mut Graph, p_t: Var, pair: &PseudoLabelPair, omega: &[f64], alpha: f64) -> Result<(Var, LossBreakdown)> {
    let s = g.value(p_t).shape();
    if omega.len() != s.n {
        return Err(Error::Config(format!("{} weights for a batch of {}", omega.len(), s.n)));
    }
    let b = s.n as f64;
    let full = Tensor4::full(Shape::new(s.n, 1, s.h, s.w), 1.0);
    let ce_fix = g.cross_entropy(p_t, pair.y_src.clone(), full)?;
    let l_fix = g.value(ce_fix).data().to_vec();
    let (loss, l_sl) = match (&pair.y_psd, &pair.valid_mask) {
        (Some(y_psd), Some(mask)) => {
            let ce_sl = g.cross_entropy(p_t, y_psd.clone(), mask.clone())?;
            let l_sl = g.value(ce_sl).data().to_vec();
            let loss = g.weighted_sum(vec![
                (ce_fix, omega.iter().map(|w| w * alpha / b).collect()),
                (ce_sl, omega.iter().map(|w| w * (1.0 - alpha) / b).collect()),
            ])?;
            (loss, l_sl)
        }
        _ => (g.weighted_sum(vec![(ce_fix, omega.iter().map(|w| w / b).collect())])?, Vec::new()),
    };
    let l_total = g.value(loss).data()[0];
    Ok((
        loss,
        LossBreakdown {
            alpha,
            omega: omega.to_vec(),
            l_fix,
            l_sl,
            l_total,
        },
    ))
}

/// FNV-1a over the bit patterns of `tensors`.
pub fn fingerprint<'a>(tensors: impl IntoIterator<Item = &'a Tensor4>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        for d in t.shape().dims() {
            for b in (d as u64).to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
            }
        }
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
            }
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub sample_ids: Vec<u32>,
    pub transforms: Vec<TransformOp>,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub alpha: f64,
    pub mean_omega: f64,
    /// Per-sample means over the epoch.
    pub l_fix: f64,
    pub l_sl: Option<f64>,
    /// Mean batch objective over the epoch's steps.
    pub l_total: f64,
    /// Mean foreground Dice of `f^t` on the monitoring split, if provided.
    pub dice_val: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub target: ModelBranch,
    pub momentum: Option<ModelBranch>,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub ema_updates: usize,
    /// Fingerprints of the cached source labels before the first and after
    /// the last epoch.
    pub y_src_fingerprint: (u64, u64),
}

/// Optional extras of an adaptation run.
#[derive(Default)]
pub struct AdaptHooks<'a> {
    /// Labelled split scored after every epoch (monitoring only).
    pub monitor: Option<&'a [Sample]>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochLog)>,
}

fn divergence(epoch: usize, step: usize, loss: &LossBreakdown, model: &ModelBranch) -> Error {
    Error::Diverged(alloc::boxed::Box::new(DivergenceDump {
        epoch,
        step,
        alpha: loss.alpha,
        omega: loss.omega.clone(),
        l_fix: loss.l_fix.clone(),
        l_sl: loss.l_sl.clone(),
        l_total: loss.l_total,
        param_norms: model.param_norms(),
    }))
}

/// Stream ids that keep the random sequences of a run independent.
const SHUFFLE_STREAM: u64 = 1;
const TRANSFORM_STREAM: u64 = 2;

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Adapts the frozen `source` to the unlabelled `target_train` images.
pub fn adapt(source: &ModelBranch, target_train: &[Image], cfg: &AdaptConfig, hooks: AdaptHooks<'_>) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if target_train.is_empty() {
        return Err(Error::Degenerate("adaptation needs at least one target image"));
    }
    let AdaptHooks { monitor, mut on_epoch } = hooks;
    if cfg.ablation == Ablation::NoAdaptation {
        return Ok(AdaptOutcome {
            target: source.clone(),
            momentum: None,
            epochs: Vec::new(),
            steps: Vec::new(),
            ema_updates: 0,
            y_src_fingerprint: (0, 0),
        });
    }

    let mut target = adabn_init(source, target_train, cfg.batch_size)?;
    let mut momentum = match cfg.ablation {
        Ablation::NoSourceToTarget => None,
        _ => Some(target.clone_into_momentum()),
    };
    let p_source = predict_probabilities(source, target_train, cfg.batch_size)?;
    let mut y_src = Vec::with_capacity(target_train.len());
    for range in batch_ranges(target_train.len(), cfg.batch_size) {
        let labels = pseudo_label_source(source, &batch_images(&target_train[range])?)?;
        for n in 0..labels.shape().n {
            y_src.push(labels.sample(n));
        }
    }
    let y_src_start = fingerprint(&y_src);

    let adam = Adam::with_lr(cfg.lr);
    let multiple = source.config.spatial_multiple();
    let mut shuffle_rng = seeded(cfg.seed, SHUFFLE_STREAM);
    let mut transform_rng = seeded(cfg.seed, TRANSFORM_STREAM);
    let mut order: Vec<usize> = (0..target_train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut ema_updates = 0;

    for epoch in 0..cfg.epochs {
        let a = alpha(epoch, cfg.r_max);
        order.shuffle(&mut shuffle_rng);
        let (mut sum_omega, mut sum_fix, mut sum_sl, mut sum_total, mut seen, mut n_steps) =
            (0.0, 0.0, 0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let step = steps.len();
            let images: Vec<&Image> = chunk.iter().map(|&i| &target_train[i]).collect();
            let x = batch_images(images.iter().copied())?;
            let (h, w) = (x.shape().h, x.shape().w);

            let omega = match cfg.ablation {
                Ablation::NoEasyToHard => vec![1.0; chunk.len()],
                _ => {
                    let p_target = softmax_channels(&target.infer(&x)?)?;
                    let d = chunk
                        .iter()
                        .enumerate()
                        .map(|(b, &i)| kl_divergence(&p_source[i], &p_target.sample(b)))
                        .collect::<Result<Vec<f64>>>()?;
                    batch_weights(&d, a, cfg.delta)
                }
            };

            let y_src_batch = Tensor4::stack(&chunk.iter().map(|&i| &y_src[i]).collect::<Vec<_>>())?;
            let mut transforms = Vec::new();
            let (y_psd, valid_mask) = match &momentum {
                Some(m) => {
                    let (mut probs, mut masks) = (Vec::new(), Vec::new());
                    for b in 0..chunk.len() {
                        let t = sample_transform(&mut transform_rng, h, w, multiple);
                        let (p, mask) = pseudo_label_momentum(m, &x.sample(b), &t)?;
                        transforms.push(t);
                        probs.push(p);
                        masks.push(mask);
                    }
                    (
                        Some(Tensor4::stack(&probs.iter().collect::<Vec<_>>())?),
                        Some(Tensor4::stack(&masks.iter().collect::<Vec<_>>())?),
                    )
                }
                None => (None, None),
            };
            let pair = PseudoLabelPair {
                y_src: y_src_batch,
                y_psd,
                valid_mask,
            };

            let mut g = Graph::new();
            let xv = g.input(x)?;
            let fwd = target.forward(&mut g, xv, BnMode::Train)?;
            let p_t = g.softmax(fwd.logits)?;
            let (loss, breakdown) = total_loss(&mut g, p_t, &pair, &omega, a)?;
            if !breakdown.l_total.is_finite() {
                return Err(divergence(epoch, step, &breakdown, &target));
            }
            g.backward(loss)?;
            target.accumulate_grads(&g, &fwd)?;
            adam.step(target.parameters_mut().iter_mut());
            if target.parameters().iter().any(|p| !p.value.is_finite()) {
                return Err(divergence(epoch, step, &breakdown, &target));
            }
            if let Some(m) = momentum.as_mut() {
                ema_update(m, &target, cfg.tau)?;
                ema_updates += 1;
            }

            sum_omega += breakdown.omega.iter().sum::<f64>();
            sum_fix += breakdown.l_fix.iter().sum::<f64>();
            sum_sl += breakdown.l_sl.iter().sum::<f64>();
            sum_total += breakdown.l_total;
            seen += chunk.len();
            n_steps += 1;
            steps.push(StepLog {
                epoch,
                step,
                sample_ids: images.iter().map(|i| i.id).collect(),
                transforms,
                loss: breakdown,
            });
        }
        let dice_val = match monitor {
            Some(samples) if !samples.is_empty() => Some(evaluate_model(&target, samples)?.mean_dice()),
            _ => None,
        };
        let log = EpochLog {
            epoch,
            alpha: a,
            mean_omega: sum_omega / seen as f64,
            l_fix: sum_fix / seen as f64,
            l_sl: momentum.as_ref().map(|_| sum_sl / seen as f64),
            l_total: sum_total / n_steps as f64,
            dice_val,
        };
        if let Some(cb) = on_epoch.as_mut() {
            cb(&log);
        }
        epochs.push(log);
    }

    Ok(AdaptOutcome {
        target,
        momentum,
        epochs,
        steps,
        ema_updates,
        y_src_fingerprint: (y_src_start, fingerprint(&y_src)),
    })
}

/// Runs one ablation mode; identical to [`adapt`] with `cfg.ablation = mode`.
pub fn ablate(source: &ModelBranch, target_train: &[Image], cfg: &AdaptConfig, mode: Ablation, hooks: AdaptHooks<'_>) -> Result<AdaptOutcome> {
    let cfg = AdaptConfig {
        ablation: mode,
        ..cfg.clone()
    };
    adapt(source, target_train, &cfg, hooks)
}

/// Human-readable role tag used in logs.
pub fn role_name(m: &ModelBranch) -> String {
    String::from(match m.role {
        Role::Source => "f_s",
        Role::Target => "f_t",
        Role::Momentum => "f_m",
    })
}
