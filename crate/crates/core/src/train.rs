//! Supervised source training with pixel-wise cross-entropy.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::adapt::seeded;
use crate::data::{batch_images, Sample};
use crate::error::{DivergenceDump, Error, Result};
use crate::graph::Graph;
use crate::metrics::evaluate_model;
use crate::model::{ModelBranch, Role, SegNetConfig};
use crate::ops::loss::one_hot;
use crate::ops::norm::BnMode;
use crate::optim::Adam;
use crate::tensor::{Shape, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct SourceTrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub model: SegNetConfig,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        SourceTrainConfig {
            seed: 0,
            epochs: 6,
            batch_size: 2,
            lr: 1e-3,
            model: SegNetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub dice_val: Option<f64>,
}

/// Splits labelled samples into train and validation parts. Every tenth
/// sample (by position) is held out.
pub fn holdout_split(samples: &[Sample]) -> (Vec<Sample>, Vec<Sample>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        if i % 10 == 9 {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, val)
}

fn targets(samples: &[&Sample], classes: usize) -> Result<Tensor4> {
    let parts = samples
        .iter()
        .map(|s| {
            if let Some(&bad) = s.label.data.iter().find(|&&v| usize::from(v) >= classes) {
                return Err(Error::Config(alloc::format!("label {bad} in sample {} exceeds {classes} classes", s.id())));
            }
            Ok(one_hot(&s.label.data, classes, s.label.height, s.label.width))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor4::stack(&parts.iter().collect::<Vec<_>>())
}

/// Trains a fresh network on `train` and returns it frozen (role source).
/// `on_epoch` sees each epoch log as soon as it is available.
pub fn train_source(
    train: &[Sample],
    val: &[Sample],
    cfg: &SourceTrainConfig,
    mut on_epoch: impl FnMut(&SourceEpochLog),
) -> Result<(ModelBranch, Vec<SourceEpochLog>)> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Config("lr must be a finite non-negative number".into()));
    }
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::Degenerate("source training needs at least one sample"));
    }
    let mut model = ModelBranch::build(cfg.model, cfg.seed)?;
    model.role = Role::Target;
    let adam = Adam::with_lr(cfg.lr);
    let classes = cfg.model.num_classes;
    let mut rng = seeded(cfg.seed, 3);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let x = batch_images(batch.iter().map(|s| &s.image))?;
            let s = x.shape();
            let y = targets(&batch, classes)?;
            let mut g = Graph::new();
            let xv = g.input(x)?;
            let fwd = model.forward(&mut g, xv, BnMode::Train)?;
            let p = g.softmax(fwd.logits)?;
            let ce = g.cross_entropy(p, y, Tensor4::full(Shape::new(s.n, 1, s.h, s.w), 1.0))?;
            let per_sample = g.value(ce).data().to_vec();
            let loss = g.weighted_sum(vec![(ce, vec![1.0 / s.n as f64; s.n])])?;
            let value = g.value(loss).data()[0];
            let guard = |model: &ModelBranch| {
                Error::Diverged(Box::new(DivergenceDump {
                    epoch,
                    step,
                    alpha: 1.0,
                    omega: vec![1.0; s.n],
                    l_fix: per_sample.clone(),
                    l_sl: Vec::new(),
                    l_total: value,
                    param_norms: model.param_norms(),
                }))
            };
            if !value.is_finite() {
                return Err(guard(&model));
            }
            g.backward(loss)?;
            model.accumulate_grads(&g, &fwd)?;
            adam.step(model.parameters_mut().iter_mut());
            if model.parameters().iter().any(|p| !p.value.is_finite()) {
                return Err(guard(&model));
            }
            total += per_sample.iter().sum::<f64>();
        }
        let dice_val = if val.is_empty() {
            None
        } else {
            Some(evaluate_model(&model, val)?.mean_dice())
        };
        let log = SourceEpochLog {
            epoch,
            loss: total / train.len() as f64,
            dice_val,
        };
        on_epoch(&log);
        logs.push(log);
    }

    model.role = Role::Source;
    for p in model.parameters_mut() {
        p.zero_grad();
        p.adam_m.fill(0.0);
        p.adam_v.fill(0.0);
        p.step_count = 0;
    }
    Ok((model, logs))
}
