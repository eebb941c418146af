//! Differentiable building blocks: dense layers, the full model bundle,
//! an SGD optimizer with momentum and weight decay, and a central
//! finite-difference harness that checks every analytic gradient in the
//! crate.
//!
//! The computation graph is fixed, so backpropagation is written by hand:
//! each forward pass returns the caches its backward pass needs, and each
//! loss routes gradients only into the parameter blocks it is defined to
//! train.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully-connected layer, weight is `in_dim x out_dim`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Fan-based uniform init in `±sqrt(6 / (in + out))`, zero biases.
    pub fn seeded(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Matrix::from_fn(in_dim, out_dim, |_, _| rng.range(-bound, bound));
        DenseLayer {
            weight,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Square identity map with identity activation.
    pub fn identity_map(dim: usize) -> Self {
        DenseLayer {
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
            activation: Activation::Identity,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Pre-activation `x*W + b`.
    fn preactivation(&self, x: &Matrix) -> Matrix {
        assert_eq!(
            x.cols(),
            self.in_dim(),
            "dense layer expects {} inputs, got {}",
            self.in_dim(),
            x.cols()
        );
        let mut pre = x.matmul(&self.weight);
        for i in 0..pre.rows() {
            for (v, b) in pre.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        pre
    }

    fn activate(&self, pre: &Matrix) -> Matrix {
        match self.activation {
            Activation::Identity => pre.clone(),
            Activation::Relu => {
                let mut out = pre.clone();
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                out
            }
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.activate(&self.preactivation(x))
    }

    pub fn forward_cached(&self, x: &Matrix) -> (Matrix, Matrix) {
        let pre = self.preactivation(x);
        (self.activate(&pre), pre)
    }

    /// Backward pass. `input` and `preact` come from `forward_cached`;
    /// `d_out` is the loss gradient at the layer output. Returns parameter
    /// gradients and the gradient at the layer input. The relu mask is the
    /// strict positivity of the cached pre-activation, matching forward.
    pub fn backward(&self, input: &Matrix, preact: &Matrix, d_out: &Matrix) -> (LayerGrad, Matrix) {
        let mut d_pre = d_out.clone();
        if self.activation == Activation::Relu {
            for (d, p) in d_pre.data_mut().iter_mut().zip(preact.data()) {
                if *p <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let d_weight = input.matmul_at(&d_pre);
        let d_bias = d_pre.col_sums();
        let d_input = d_pre.matmul_bt(&self.weight);
        (
            LayerGrad {
                weight: d_weight,
                bias: d_bias,
            },
            d_input,
        )
    }
}

/// Gradient of one dense layer.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        LayerGrad {
            weight: Matrix::zeros(layer.weight.rows(), layer.weight.cols()),
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn add_scaled(&mut self, other: &LayerGrad, s: f64) {
        self.weight.add_scaled(&other.weight, s);
        for (d, o) in self.bias.iter_mut().zip(&other.bias) {
            *d += s * o;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }
}

/// Forward cache for a stack of dense layers.
pub struct StackCache {
    pub inputs: Vec<Matrix>,
    pub preacts: Vec<Matrix>,
}

pub fn stack_forward(layers: &[DenseLayer], x: &Matrix) -> Matrix {
    layers.iter().fold(x.clone(), |h, l| l.forward(&h))
}

pub fn stack_forward_cached(layers: &[DenseLayer], x: &Matrix) -> (Matrix, StackCache) {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut preacts = Vec::with_capacity(layers.len());
    let mut h = x.clone();
    for layer in layers {
        let (out, pre) = layer.forward_cached(&h);
        inputs.push(h);
        preacts.push(pre);
        h = out;
    }
    (h, StackCache { inputs, preacts })
}

/// Backward through a stack; returns per-layer gradients (same order as
/// the layers) and the gradient at the stack input.
pub fn stack_backward(
    layers: &[DenseLayer],
    cache: &StackCache,
    d_out: &Matrix,
) -> (Vec<LayerGrad>, Matrix) {
    let mut grads: Vec<LayerGrad> = Vec::with_capacity(layers.len());
    let mut d = d_out.clone();
    for i in (0..layers.len()).rev() {
        let (g, d_in) = layers[i].backward(&cache.inputs[i], &cache.preacts[i], &d);
        grads.push(g);
        d = d_in;
    }
    grads.reverse();
    (grads, d)
}

/// Network dimensions, fixed at model construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    /// Width of the first backbone layer.
    pub hidden_dim: usize,
    /// Backbone output width (input to bottleneck and projections).
    pub feat_dim: usize,
    /// Bottleneck output width (semantic feature dimension).
    pub bottleneck_dim: usize,
    pub classes: usize,
    /// Number of unlabeled source domains (K - 1).
    pub unlabeled_domains: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            input_dim: 2,
            hidden_dim: 64,
            feat_dim: 64,
            bottleneck_dim: 32,
            classes: 4,
            unlabeled_domains: 1,
        }
    }
}

/// Every trainable parameter of the pipeline: backbone `g`, bottleneck
/// `b`, classifier `c`, per-domain projections `v_j`, per-domain
/// query/key/value embeddings, and the attention gate `alpha`
/// (initialized at 0 so attention starts as a pass-through).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub dims: ModelDims,
    pub backbone: Vec<DenseLayer>,
    pub bottleneck: Vec<DenseLayer>,
    pub classifier: DenseLayer,
    pub projections: Vec<DenseLayer>,
    pub attn_query: Vec<DenseLayer>,
    pub attn_key: Vec<DenseLayer>,
    pub attn_value: Vec<DenseLayer>,
    pub alpha: f64,
}

impl ModelBundle {
    pub fn new(dims: ModelDims, rng: &mut Rng) -> Self {
        let backbone = vec![
            DenseLayer::seeded(dims.input_dim, dims.hidden_dim, Activation::Relu, rng),
            DenseLayer::seeded(dims.hidden_dim, dims.feat_dim, Activation::Relu, rng),
        ];
        let bottleneck = vec![DenseLayer::seeded(
            dims.feat_dim,
            dims.bottleneck_dim,
            Activation::Relu,
            rng,
        )];
        let classifier =
            DenseLayer::seeded(dims.bottleneck_dim, dims.classes, Activation::Identity, rng);
        let mut projections = Vec::new();
        let mut attn_query = Vec::new();
        let mut attn_key = Vec::new();
        let mut attn_value = Vec::new();
        for _ in 0..dims.unlabeled_domains {
            projections.push(DenseLayer::seeded(
                dims.feat_dim,
                dims.bottleneck_dim,
                Activation::Identity,
                rng,
            ));
            attn_query.push(DenseLayer::seeded(
                dims.bottleneck_dim,
                dims.bottleneck_dim,
                Activation::Identity,
                rng,
            ));
            attn_key.push(DenseLayer::seeded(
                dims.bottleneck_dim,
                dims.bottleneck_dim,
                Activation::Identity,
                rng,
            ));
            attn_value.push(DenseLayer::seeded(
                dims.bottleneck_dim,
                dims.bottleneck_dim,
                Activation::Identity,
                rng,
            ));
        }
        ModelBundle {
            dims,
            backbone,
            bottleneck,
            classifier,
            projections,
            attn_query,
            attn_key,
            attn_value,
            alpha: 0.0,
        }
    }

    /// Backbone output `g(x)`.
    pub fn backbone_features(&self, x: &Matrix) -> Matrix {
        stack_forward(&self.backbone, x)
    }

    /// Semantic features `b(g(x))`.
    pub fn features(&self, x: &Matrix) -> Matrix {
        stack_forward(&self.bottleneck, &self.backbone_features(x))
    }

    /// Classifier logits `c(b(g(x)))`; softmax belongs to the loss layer.
    pub fn logits(&self, x: &Matrix) -> Matrix {
        self.classifier.forward(&self.features(x))
    }

    /// Projection `v_j(g(x))` of an unlabeled domain onto the labeled
    /// domain's semantic feature space. Note the projection reads the
    /// backbone output, not the bottleneck output.
    pub fn projection(&self, unlabeled_idx: usize, x: &Matrix) -> Result<Matrix> {
        let v = self.projections.get(unlabeled_idx).ok_or_else(|| {
            Error::dim(
                "projection",
                format!(
                    "unlabeled domain index {unlabeled_idx} out of range (have {})",
                    self.projections.len()
                ),
            )
        })?;
        Ok(v.forward(&self.backbone_features(x)))
    }

    /// Full forward cache through `g`, `b`, and `c` for one batch.
    pub fn forward_cached(&self, x: &Matrix) -> ForwardCache {
        let (backbone_out, g_cache) = stack_forward_cached(&self.backbone, x);
        let (features, b_cache) = stack_forward_cached(&self.bottleneck, &backbone_out);
        let (logits, c_pre) = self.classifier.forward_cached(&features);
        ForwardCache {
            g_cache,
            b_cache,
            backbone_out,
            features,
            c_pre,
            logits,
        }
    }

    pub fn blocks(&self) -> Vec<Block> {
        let mut blocks = vec![Block::Backbone, Block::Bottleneck, Block::Classifier];
        for j in 0..self.dims.unlabeled_domains {
            blocks.push(Block::Projection(j));
        }
        for j in 0..self.dims.unlabeled_domains {
            blocks.push(Block::AttnQuery(j));
            blocks.push(Block::AttnKey(j));
            blocks.push(Block::AttnValue(j));
        }
        blocks.push(Block::Alpha);
        blocks
    }

    fn block_layers(&self, block: Block) -> &[DenseLayer] {
        match block {
            Block::Backbone => &self.backbone,
            Block::Bottleneck => &self.bottleneck,
            Block::Classifier => std::slice::from_ref(&self.classifier),
            Block::Projection(j) => std::slice::from_ref(&self.projections[j]),
            Block::AttnQuery(j) => std::slice::from_ref(&self.attn_query[j]),
            Block::AttnKey(j) => std::slice::from_ref(&self.attn_key[j]),
            Block::AttnValue(j) => std::slice::from_ref(&self.attn_value[j]),
            Block::Alpha => &[],
        }
    }

    fn block_layers_mut(&mut self, block: Block) -> &mut [DenseLayer] {
        match block {
            Block::Backbone => &mut self.backbone,
            Block::Bottleneck => &mut self.bottleneck,
            Block::Classifier => std::slice::from_mut(&mut self.classifier),
            Block::Projection(j) => std::slice::from_mut(&mut self.projections[j]),
            Block::AttnQuery(j) => std::slice::from_mut(&mut self.attn_query[j]),
            Block::AttnKey(j) => std::slice::from_mut(&mut self.attn_key[j]),
            Block::AttnValue(j) => std::slice::from_mut(&mut self.attn_value[j]),
            Block::Alpha => &mut [],
        }
    }

    /// Number of scalar parameters in a block.
    pub fn block_len(&self, block: Block) -> usize {
        if block == Block::Alpha {
            return 1;
        }
        self.block_layers(block)
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Read one scalar parameter by (block, flat index). Layers inside a
    /// block are concatenated as `[weights..., bias...]` per layer.
    pub fn param(&self, block: Block, mut idx: usize) -> f64 {
        if block == Block::Alpha {
            return self.alpha;
        }
        for layer in self.block_layers(block) {
            let w = layer.weight.data().len();
            if idx < w {
                return layer.weight.data()[idx];
            }
            idx -= w;
            if idx < layer.bias.len() {
                return layer.bias[idx];
            }
            idx -= layer.bias.len();
        }
        panic!("parameter index out of range for {block:?}");
    }

    pub fn set_param(&mut self, block: Block, mut idx: usize, value: f64) {
        if block == Block::Alpha {
            self.alpha = value;
            return;
        }
        for layer in self.block_layers_mut(block) {
            let w = layer.weight.data().len();
            if idx < w {
                layer.weight.data_mut()[idx] = value;
                return;
            }
            idx -= w;
            if idx < layer.bias.len() {
                layer.bias[idx] = value;
                return;
            }
            idx -= layer.bias.len();
        }
        panic!("parameter index out of range for {block:?}");
    }

    pub fn all_params_finite(&self) -> bool {
        self.blocks()
            .into_iter()
            .all(|b| (0..self.block_len(b)).all(|i| self.param(b, i).is_finite()))
    }
}

/// Cached intermediates of one `c(b(g(x)))` forward pass.
pub struct ForwardCache {
    pub g_cache: StackCache,
    pub b_cache: StackCache,
    pub backbone_out: Matrix,
    pub features: Matrix,
    pub c_pre: Matrix,
    pub logits: Matrix,
}

/// Parameter block identifiers, mirrored by [`GradBundle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Backbone,
    Bottleneck,
    Classifier,
    Projection(usize),
    AttnQuery(usize),
    AttnKey(usize),
    AttnValue(usize),
    Alpha,
}

impl Block {
    pub fn name(&self) -> String {
        match self {
            Block::Backbone => "backbone".into(),
            Block::Bottleneck => "bottleneck".into(),
            Block::Classifier => "classifier".into(),
            Block::Projection(j) => format!("projection[{j}]"),
            Block::AttnQuery(j) => format!("attn_query[{j}]"),
            Block::AttnKey(j) => format!("attn_key[{j}]"),
            Block::AttnValue(j) => format!("attn_value[{j}]"),
            Block::Alpha => "alpha".into(),
        }
    }
}

/// Which block groups a gradient bundle actually populates. Losses with
/// stop-gradient conventions leave the frozen groups inactive, and the
/// optimizer and the finite-difference harness both honor the flags.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ActiveBlocks {
    pub backbone: bool,
    pub bottleneck: bool,
    pub classifier: bool,
    pub projections: bool,
    pub attention: bool,
    pub alpha: bool,
}

impl ActiveBlocks {
    pub fn union(self, other: ActiveBlocks) -> ActiveBlocks {
        ActiveBlocks {
            backbone: self.backbone || other.backbone,
            bottleneck: self.bottleneck || other.bottleneck,
            classifier: self.classifier || other.classifier,
            projections: self.projections || other.projections,
            attention: self.attention || other.attention,
            alpha: self.alpha || other.alpha,
        }
    }

    pub fn contains(&self, block: Block) -> bool {
        match block {
            Block::Backbone => self.backbone,
            Block::Bottleneck => self.bottleneck,
            Block::Classifier => self.classifier,
            Block::Projection(_) => self.projections,
            Block::AttnQuery(_) | Block::AttnKey(_) | Block::AttnValue(_) => self.attention,
            Block::Alpha => self.alpha,
        }
    }
}

/// Gradients for every parameter block, shape-matched to a model.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub backbone: Vec<LayerGrad>,
    pub bottleneck: Vec<LayerGrad>,
    pub classifier: LayerGrad,
    pub projections: Vec<LayerGrad>,
    pub attn_query: Vec<LayerGrad>,
    pub attn_key: Vec<LayerGrad>,
    pub attn_value: Vec<LayerGrad>,
    pub alpha: f64,
    pub active: ActiveBlocks,
}

impl GradBundle {
    pub fn zeros_like(model: &ModelBundle) -> Self {
        GradBundle {
            backbone: model.backbone.iter().map(LayerGrad::zeros_like).collect(),
            bottleneck: model.bottleneck.iter().map(LayerGrad::zeros_like).collect(),
            classifier: LayerGrad::zeros_like(&model.classifier),
            projections: model.projections.iter().map(LayerGrad::zeros_like).collect(),
            attn_query: model.attn_query.iter().map(LayerGrad::zeros_like).collect(),
            attn_key: model.attn_key.iter().map(LayerGrad::zeros_like).collect(),
            attn_value: model.attn_value.iter().map(LayerGrad::zeros_like).collect(),
            alpha: 0.0,
            active: ActiveBlocks::default(),
        }
    }

    /// `self += s * other`, taking the union of active flags.
    pub fn add_scaled(&mut self, other: &GradBundle, s: f64) {
        for (d, o) in self.backbone.iter_mut().zip(&other.backbone) {
            d.add_scaled(o, s);
        }
        for (d, o) in self.bottleneck.iter_mut().zip(&other.bottleneck) {
            d.add_scaled(o, s);
        }
        self.classifier.add_scaled(&other.classifier, s);
        for (d, o) in self.projections.iter_mut().zip(&other.projections) {
            d.add_scaled(o, s);
        }
        for (d, o) in self.attn_query.iter_mut().zip(&other.attn_query) {
            d.add_scaled(o, s);
        }
        for (d, o) in self.attn_key.iter_mut().zip(&other.attn_key) {
            d.add_scaled(o, s);
        }
        for (d, o) in self.attn_value.iter_mut().zip(&other.attn_value) {
            d.add_scaled(o, s);
        }
        self.alpha += s * other.alpha;
        self.active = self.active.union(other.active);
    }

    /// Drop the classifier contribution (used when a loss flows through
    /// the classifier but is not allowed to train it).
    pub fn zero_classifier(&mut self) {
        self.classifier = LayerGrad {
            weight: Matrix::zeros(
                self.classifier.weight.rows(),
                self.classifier.weight.cols(),
            ),
            bias: vec![0.0; self.classifier.bias.len()],
        };
        self.active.classifier = false;
    }

    fn block_grads(&self, block: Block) -> &[LayerGrad] {
        match block {
            Block::Backbone => &self.backbone,
            Block::Bottleneck => &self.bottleneck,
            Block::Classifier => std::slice::from_ref(&self.classifier),
            Block::Projection(j) => std::slice::from_ref(&self.projections[j]),
            Block::AttnQuery(j) => std::slice::from_ref(&self.attn_query[j]),
            Block::AttnKey(j) => std::slice::from_ref(&self.attn_key[j]),
            Block::AttnValue(j) => std::slice::from_ref(&self.attn_value[j]),
            Block::Alpha => &[],
        }
    }

    /// Read one gradient coordinate with the same addressing as
    /// [`ModelBundle::param`].
    pub fn param(&self, block: Block, mut idx: usize) -> f64 {
        if block == Block::Alpha {
            return self.alpha;
        }
        for g in self.block_grads(block) {
            let w = g.weight.data().len();
            if idx < w {
                return g.weight.data()[idx];
            }
            idx -= w;
            if idx < g.bias.len() {
                return g.bias[idx];
            }
            idx -= g.bias.len();
        }
        panic!("gradient index out of range for {block:?}");
    }

    /// First block containing a non-finite value, if any.
    pub fn find_non_finite(&self, model: &ModelBundle) -> Option<Block> {
        model.blocks().into_iter().find(|&b| {
            if b == Block::Alpha {
                !self.alpha.is_finite()
            } else {
                self.block_grads(b).iter().any(|g| !g.is_finite())
            }
        })
    }
}

/// SGD hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.001,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Momentum buffers, shape-matched to the model.
pub struct SgdState {
    velocity: GradBundle,
}

impl SgdState {
    pub fn new(model: &ModelBundle) -> Self {
        SgdState {
            velocity: GradBundle::zeros_like(model),
        }
    }
}

/// One SGD step over the bundle's active blocks:
/// `v <- momentum*v + grad + weight_decay*p`, then `p <- p - lr*v`.
/// `alpha` is a gate initialized at zero and is exempt from weight decay,
/// which would otherwise pin it there. Inactive blocks are untouched,
/// including their momentum buffers.
pub fn sgd_step(
    model: &mut ModelBundle,
    grads: &GradBundle,
    cfg: &SgdConfig,
    state: &mut SgdState,
) -> Result<()> {
    if let Some(block) = grads.find_non_finite(model) {
        return Err(Error::NonFiniteGradient { block: block.name() });
    }
    for block in model.blocks() {
        if !grads.active.contains(block) {
            continue;
        }
        if block == Block::Alpha {
            let v = cfg.momentum * state.velocity.alpha + grads.alpha;
            state.velocity.alpha = v;
            model.alpha -= cfg.learning_rate * v;
            continue;
        }
        let n = model.block_len(block);
        for i in 0..n {
            let p = model.param(block, i);
            let g = grads.param(block, i) + cfg.weight_decay * p;
            let v = cfg.momentum * velocity_at(&state.velocity, block, i) + g;
            set_velocity(&mut state.velocity, block, i, v);
            model.set_param(block, i, p - cfg.learning_rate * v);
        }
    }
    Ok(())
}

fn velocity_at(v: &GradBundle, block: Block, idx: usize) -> f64 {
    v.param(block, idx)
}

fn set_velocity(v: &mut GradBundle, block: Block, mut idx: usize, value: f64) {
    if block == Block::Alpha {
        v.alpha = value;
        return;
    }
    let grads: &mut [LayerGrad] = match block {
        Block::Backbone => &mut v.backbone,
        Block::Bottleneck => &mut v.bottleneck,
        Block::Classifier => std::slice::from_mut(&mut v.classifier),
        Block::Projection(j) => std::slice::from_mut(&mut v.projections[j]),
        Block::AttnQuery(j) => std::slice::from_mut(&mut v.attn_query[j]),
        Block::AttnKey(j) => std::slice::from_mut(&mut v.attn_key[j]),
        Block::AttnValue(j) => std::slice::from_mut(&mut v.attn_value[j]),
        Block::Alpha => unreachable!(),
    };
    for g in grads {
        let w = g.weight.data().len();
        if idx < w {
            g.weight.data_mut()[idx] = value;
            return;
        }
        idx -= w;
        if idx < g.bias.len() {
            g.bias[idx] = value;
            return;
        }
        idx -= g.bias.len();
    }
    panic!("velocity index out of range for {block:?}");
}

/// Central finite-difference check of an analytic gradient.
///
/// Samples up to `max_coords` coordinates (all of them when the bundle is
/// small) from the bundle's active blocks, perturbs each by `±h`, and
/// returns the maximum relative error with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
///
/// Central differences carry an irreducible rounding noise of about
/// `eps * scale / (2h)`, where `scale` is the magnitude of the terms the
/// loss accumulates (at least unit scale here: every loss sums order-one
/// log or square terms, even when the final value cancels to near zero,
/// as the information term does). A difference below a small multiple of
/// that floor is indistinguishable from agreement and is scored as zero.
/// Without the floor, parameters whose true gradient is exactly zero (the
/// key and query embeddings: the domain softmax makes the aggregate map
/// constant) or tiny would flag pure float noise; the probe for that
/// failure mode is that the mismatch wanders with `h` instead of
/// shrinking quadratically.
///
/// The loss closure must bake in the same stop-gradient conventions as
/// the analytic gradient: branches a loss treats as constants are
/// precomputed once from the unperturbed model and captured by the
/// closure, so both sides differentiate the same scalar function.
pub fn finite_diff_check(
    model: &ModelBundle,
    analytic: &GradBundle,
    mut loss: impl FnMut(&ModelBundle) -> f64,
    h: f64,
    rng: &mut Rng,
    max_coords: usize,
) -> f64 {
    let mut coords: Vec<(Block, usize)> = Vec::new();
    for block in model.blocks() {
        if !analytic.active.contains(block) {
            continue;
        }
        for i in 0..model.block_len(block) {
            coords.push((block, i));
        }
    }
    if coords.len() > max_coords {
        rng.shuffle(&mut coords);
        coords.truncate(max_coords);
    }

    let mut scratch = model.clone();
    let mut max_rel = 0.0f64;
    for (block, i) in coords {
        let base = scratch.param(block, i);
        scratch.set_param(block, i, base + h);
        let plus = loss(&scratch);
        scratch.set_param(block, i, base - h);
        let minus = loss(&scratch);
        scratch.set_param(block, i, base);
        let numeric = (plus - minus) / (2.0 * h);
        let exact = analytic.param(block, i);
        let scale = plus.abs().max(minus.abs()).max(1.0);
        let noise_floor = 256.0 * f64::EPSILON * scale / (2.0 * h);
        let diff = (exact - numeric).abs();
        if diff <= noise_floor {
            continue;
        }
        let rel = diff / exact.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    max_rel
}

/// Checkpoint container; the version gate keeps old dumps from being
/// silently misread.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: ModelBundle,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Write the model as a JSON checkpoint. Parameter values survive the
/// round trip bit-exactly (shortest-representation float printing).
pub fn save_checkpoint(model: &ModelBundle, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        model: model.clone(),
    };
    let json = serde_json::to_string_pretty(&ckpt)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(json.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if ckpt.format_version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            path: path.display().to_string(),
            detail: format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.format_version
            ),
        });
    }
    Ok(ckpt.model)
}
