//! Compact U-Net used for the source, target and momentum branches.
//!
//! Each level is `conv3×3 → BN → ReLU → conv3×3 → BN → ReLU`. The encoder
//! halves the resolution with 2×2 max pooling `depth` times, the decoder
//! upsamples with nearest neighbour and concatenates the matching skip
//! connection, and a 1×1 convolution produces per-class logits at the
//! input resolution.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{batch_images, batch_ranges, Image};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::conv::ConvGeometry;
use crate::ops::norm::{BatchNormState, BnMode};
use crate::optim::Parameter;
use crate::tensor::{Shape, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_width: usize,
    /// Number of 2× downsamplings.
    pub depth: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            in_channels: 1,
            num_classes: 3,
            base_width: 8,
            depth: 3,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_width == 0 || self.depth == 0 {
            return Err(Error::Config(format!("invalid network config {self:?}")));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Source,
    Target,
    Momentum,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Target => "target",
            Role::Momentum => "momentum",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBranch {
    pub config: SegNetConfig,
    pub role: Role,
    params: Vec<Parameter>,
    bn: Vec<BatchNormState>,
}

/// Handles produced by one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// One graph leaf per model parameter, in parameter order.
    pub params: Vec<Var>,
}

struct Cursor<'a> {
    params: &'a [Parameter],
    bn: &'a [BatchNormState],
    next_param: usize,
    next_bn: usize,
    handles: Vec<Var>,
    updates: Vec<Option<crate::ops::norm::BnUpdate>>,
    trainable: bool,
    mode: BnMode,
}

impl Cursor<'_> {
    fn param(&mut self, g: &mut Graph) -> Result<Var> {
        let v = g.param(&self.params[self.next_param].value, self.trainable)?;
        self.next_param += 1;
        self.handles.push(v);
        Ok(v)
    }

    fn conv(&mut self, g: &mut Graph, x: Var, bias: bool, geom: ConvGeometry) -> Result<Var> {
        let w = self.param(g)?;
        let b = if bias { Some(self.param(g)?) } else { None };
        g.conv2d(x, w, b, geom)
    }

    fn bn_relu(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = self.param(g)?;
        let beta = self.param(g)?;
        let (y, upd) = g.batch_norm(x, gamma, beta, &self.bn[self.next_bn], self.mode)?;
        self.next_bn += 1;
        self.updates.push(upd);
        g.relu(y)
    }

    fn block(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = self.conv(g, x, false, ConvGeometry::same3x3())?;
        let y = self.bn_relu(g, y)?;
        let y = self.conv(g, y, false, ConvGeometry::same3x3())?;
        self.bn_relu(g, y)
    }
}

impl ModelBranch {
    /// He-normal initialization from `seed`; BN affine starts at identity.
    pub fn build(config: SegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut bn = Vec::new();
        let mut conv = |name: String, c_in: usize, c_out: usize, k: usize, params: &mut Vec<Parameter>| {
            let std = libm::sqrt(2.0 / (c_in * k * k) as f64);
            let normal = Normal::new(0.0, std).expect("finite std");
            let shape = Shape::new(c_out, c_in, k, k);
            let data = (0..shape.len()).map(|_| normal.sample(&mut rng)).collect();
            params.push(Parameter::new(
                format!("{name}.weight"),
                Tensor4::from_vec(shape, data).expect("weight shape"),
            ));
        };
        let mut block = |name: &str, c_in: usize, c_out: usize, params: &mut Vec<Parameter>, bn: &mut Vec<BatchNormState>| {
            for (i, ci) in [(1, c_in), (2, c_out)] {
                conv(format!("{name}.conv{i}"), ci, c_out, 3, params);
                let shape = Shape::new(1, c_out, 1, 1);
                params.push(Parameter::new(format!("{name}.bn{i}.gamma"), Tensor4::full(shape, 1.0)));
                params.push(Parameter::new(format!("{name}.bn{i}.beta"), Tensor4::zeros(shape)));
                bn.push(BatchNormState::new(format!("{name}.bn{i}"), c_out));
            }
        };
        for level in 0..config.depth {
            let c_in = if level == 0 { config.in_channels } else { config.width(level - 1) };
            block(&format!("enc{level}"), c_in, config.width(level), &mut params, &mut bn);
        }
        block(
            "bottleneck",
            config.width(config.depth - 1),
            config.width(config.depth),
            &mut params,
            &mut bn,
        );
        for level in (0..config.depth).rev() {
            let c_in = config.width(level + 1) + config.width(level);
            block(&format!("dec{level}"), c_in, config.width(level), &mut params, &mut bn);
        }
        drop(block);
        conv(String::from("head"), config.width(0), config.num_classes, 1, &mut params);
        params.push(Parameter::new(
            "head.bias",
            Tensor4::zeros(Shape::new(1, config.num_classes, 1, 1)),
        ));
        Ok(ModelBranch {
            config,
            role: Role::Source,
            params,
            bn,
        })
    }

    pub fn trainable(&self) -> bool {
        self.role == Role::Target
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bn
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Same layer names and shapes.
    pub fn same_architecture(&self, other: &ModelBranch) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
            && self.bn.len() == other.bn.len()
            && self
                .bn
                .iter()
                .zip(&other.bn)
                .all(|(a, b)| a.name == b.name && a.channels() == b.channels())
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        let m = self.config.spatial_multiple();
        if shape.c != self.config.in_channels {
            return Err(Error::Config(format!(
                "expected {} input channels, got input {shape}",
                self.config.in_channels
            )));
        }
        if shape.h == 0 || shape.w == 0 || shape.h % m != 0 || shape.w % m != 0 {
            return Err(Error::Config(format!(
                "input {shape} spatial dims must be non-zero multiples of {m}"
            )));
        }
        Ok(())
    }

    fn run(&self, g: &mut Graph, x: Var, mode: BnMode) -> Result<(Forward, Vec<Option<crate::ops::norm::BnUpdate>>)> {
        self.check_input(g.value(x).shape())?;
        let mut cur = Cursor {
            params: &self.params,
            bn: &self.bn,
            next_param: 0,
            next_bn: 0,
            handles: Vec::with_capacity(self.params.len()),
            updates: Vec::with_capacity(self.bn.len()),
            trainable: self.trainable(),
            mode,
        };
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x;
        for _ in 0..self.config.depth {
            let y = cur.block(g, h)?;
            skips.push(y);
            h = g.max_pool2(y)?;
        }
        h = cur.block(g, h)?;
        for skip in skips.into_iter().rev() {
            let up = g.upsample2(h)?;
            let cat = g.concat(up, skip)?;
            h = cur.block(g, cat)?;
        }
        let logits = cur.conv(g, h, true, ConvGeometry { stride: 1, padding: 0 })?;
        debug_assert_eq!(cur.next_param, self.params.len());
        Ok((
            Forward {
                logits,
                params: cur.handles,
            },
            cur.updates,
        ))
    }

    /// Records a forward pass. The source branch always normalizes with its
    /// running statistics, whatever `mode` says; statistic updates from
    /// train/recalibrate modes are applied to `self`.
    pub fn forward(&mut self, g: &mut Graph, images: Var, mode: BnMode) -> Result<Forward> {
        let mode = if self.role == Role::Source { BnMode::Eval } else { mode };
        let (fwd, updates) = self.run(g, images, mode)?;
        for (state, upd) in self.bn.iter_mut().zip(updates) {
            if let Some(u) = upd {
                state.apply(u);
            }
        }
        Ok(fwd)
    }

    /// Eval-mode logits without keeping a trace.
    pub fn infer(&self, images: &Tensor4) -> Result<Tensor4> {
        let mut g = Graph::new();
        let x = g.input(images.clone())?;
        let (fwd, _) = self.run(&mut g, x, BnMode::Eval)?;
        Ok(g.value(fwd.logits).clone())
    }

    /// Adds the gradients reached by `g.backward` into each parameter's
    /// `grad`. Frozen branches are left untouched.
    pub fn accumulate_grads(&mut self, g: &Graph, fwd: &Forward) -> Result<()> {
        if !self.trainable() {
            return Ok(());
        }
        if fwd.params.len() != self.params.len() {
            return Err(Error::ArchitectureMismatch);
        }
        for (p, v) in self.params.iter_mut().zip(&fwd.params) {
            if let Some(grad) = g.grad(*v) {
                p.grad.add_assign(grad)?;
            }
        }
        Ok(())
    }

    /// Exact copy acting as the momentum (EMA) branch.
    pub fn clone_into_momentum(&self) -> ModelBranch {
        let mut m = self.clone();
        m.role = Role::Momentum;
        for p in &mut m.params {
            p.zero_grad();
        }
        m
    }

    pub fn param_norms(&self) -> Vec<(String, f64)> {
        self.params.iter().map(|p| (p.name.clone(), p.norm())).collect()
    }

    pub(crate) fn from_parts(
        config: SegNetConfig,
        role: Role,
        params: Vec<Parameter>,
        bn: Vec<BatchNormState>,
    ) -> Self {
        ModelBranch {
            config,
            role,
            params,
            bn,
        }
    }
}

/// AdaBN: a trainable copy of `source` whose batch-norm running statistics
/// are re-estimated as the exact pooled mean/variance of its activations over
/// one full pass of the target images. Weights are copied unchanged.
pub fn adabn_init(source: &ModelBranch, target_images: &[Image], batch_size: usize) -> Result<ModelBranch> {
    if target_images.is_empty() {
        return Err(Error::Degenerate("AdaBN needs at least one target image"));
    }
    let mut target = source.clone();
    target.role = Role::Target;
    for p in target.params.iter_mut() {
        p.zero_grad();
    }
    for state in target.bn.iter_mut() {
        state.begin_recalibration();
    }
    for range in batch_ranges(target_images.len(), batch_size) {
        let batch = batch_images(&target_images[range])?;
        let mut g = Graph::new();
        let x = g.input(batch)?;
        target.forward(&mut g, x, BnMode::Recalibrate)?;
    }
    for state in target.bn.iter_mut() {
        state.finish_recalibration();
    }
    Ok(target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SegNetConfig {
        SegNetConfig {
            in_channels: 1,
            num_classes: 3,
            base_width: 2,
            depth: 2,
        }
    }

    fn image(seed: u64, size: usize) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.5, 0.2).unwrap();
        Tensor4::from_fn(Shape::new(1, 1, size, size), |_, _, _, _| normal.sample(&mut rng))
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let a = ModelBranch::build(SegNetConfig::default(), 7).unwrap();
        let b = ModelBranch::build(SegNetConfig::default(), 7).unwrap();
        let c = ModelBranch::build(SegNetConfig::default(), 8).unwrap();
        assert_eq!(a, b);
        assert!(a.parameters().iter().zip(c.parameters()).any(|(x, y)| x.value != y.value));
    }

    #[test]
    fn default_network_preserves_spatial_size() {
        let m = ModelBranch::build(SegNetConfig::default(), 1).unwrap();
        let x = Tensor4::stack(&[&image(1, 64), &image(2, 64)]).unwrap();
        let y = m.infer(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 64, 64));
        let z = m.infer(&image(3, 16)).unwrap();
        assert_eq!(z.shape(), Shape::new(1, 3, 16, 16));
    }

    #[test]
    fn indivisible_input_is_a_config_error() {
        let m = ModelBranch::build(SegNetConfig::default(), 1).unwrap();
        assert!(matches!(m.infer(&image(1, 60)), Err(Error::Config(_))));
        let two_channel = Tensor4::zeros(Shape::new(1, 2, 64, 64));
        assert!(matches!(m.infer(&two_channel), Err(Error::Config(_))));
    }

    #[test]
    fn source_branch_ignores_train_mode() {
        let mut m = ModelBranch::build(small(), 3).unwrap();
        let before = m.clone();
        let x = image(4, 16);
        let mut g = Graph::new();
        let v = g.input(x.clone()).unwrap();
        let f = m.forward(&mut g, v, BnMode::Train).unwrap();
        assert_eq!(m, before);
        assert_eq!(g.value(f.logits), &m.infer(&x).unwrap());
        assert_eq!(m.infer(&x).unwrap(), m.infer(&x).unwrap());
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let m = ModelBranch::build(small(), 5).unwrap();
        let x = image(9, 16);
        let y = m.infer(&Tensor4::stack(&[&x, &x]).unwrap()).unwrap();
        assert_eq!(y.sample(0), y.sample(1));
        assert_eq!(y.sample(0), m.infer(&x).unwrap());
    }

    #[test]
    fn momentum_clone_is_a_deep_copy() {
        let mut target = ModelBranch::build(small(), 5).unwrap();
        target.role = Role::Target;
        let momentum = target.clone_into_momentum();
        assert_eq!(momentum.role, Role::Momentum);
        assert!(!momentum.trainable());
        let x = image(2, 16);
        assert_eq!(momentum.infer(&x).unwrap(), target.infer(&x).unwrap());
        target.parameters_mut()[0].value.data_mut()[0] += 1.0;
        assert_ne!(momentum.infer(&x).unwrap(), target.infer(&x).unwrap());
        assert_ne!(momentum.parameters()[0].value, target.parameters()[0].value);
    }

    #[test]
    fn adabn_changes_only_statistics() {
        let source = ModelBranch::build(small(), 11).unwrap();
        let imgs: Vec<Image> = (0..5)
            .map(|i| Image {
                id: i,
                pixels: image(100 + i as u64, 16).map(|v| v + 0.3),
            })
            .collect();
        let target = adabn_init(&source, &imgs, 2).unwrap();
        assert_eq!(target.role, Role::Target);
        assert!(target.trainable());
        for (a, b) in source.parameters().iter().zip(target.parameters()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        assert!(target.bn_states().iter().all(|s| s.recalibration.is_none()));
        assert_ne!(source.bn_states()[0].running_mean, target.bn_states()[0].running_mean);
        assert!(matches!(adabn_init(&source, &[], 2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn adabn_first_layer_mean_is_the_exact_pooled_mean() {
        // The first BN sees conv1(x), which does not depend on any statistic,
        // so its recalibrated mean must equal the plain average over all pixels.
        let source = ModelBranch::build(small(), 2).unwrap();
        let imgs: Vec<Image> = (0..3).map(|i| Image { id: i, pixels: image(i as u64, 16) }).collect();
        let target = adabn_init(&source, &imgs, 2).unwrap();
        let w = &source.parameters()[0].value;
        let mut sums = alloc::vec![0.0; w.shape().n];
        for img in &imgs {
            let y = crate::ops::conv2d_forward(&img.pixels, w, None, ConvGeometry::same3x3()).unwrap();
            for (c, s) in sums.iter_mut().enumerate() {
                *s += y.plane(0, c).iter().sum::<f64>();
            }
        }
        for (c, s) in sums.iter().enumerate() {
            let expected = s / (3.0 * 256.0);
            assert!((target.bn_states()[0].running_mean[c] - expected).abs() < 1e-12);
        }
    }
}
