//! Encoder + classifier model with per-domain batch normalization.
//!
//! The encoder is a small MLP. Each stack stage is affine -> optional
//! domain-specific batch norm -> activation; the last stage projects to
//! the feature dimension. An optional bottleneck (affine + batch norm, no
//! activation) follows the stack. Affine layers immediately followed by
//! batch norm carry no bias: the shift would be removed by the mean
//! subtraction, leaving a parameter with an identically zero gradient.
//!
//! Features are L2-normalized per row for everything contrastive; the
//! classifier is a linear map on the un-normalized features. Preparing the
//! model for source-data-free adaptation drops the classifier bias, scales
//! each class row to unit norm, and freezes it so the rows can double as
//! class prototypes.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchStats, Gradients, NodeId, Tape};
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, Matrix};

/// Weight on the current batch when folding statistics into running
/// estimates.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidConfig(format!(
                "unknown activation '{other}' (expected relu or tanh)"
            ))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::InvalidConfig(format!(
                "unknown domain '{other}' (expected source or target)"
            ))),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

/// Whether a forward pass uses batch statistics (Train) or running
/// statistics (Eval). Train-mode encoding also updates the running
/// estimates for the batch's domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    /// Insert batch norm after every stack affine, with separate parameters
    /// and running statistics per domain. When false the stack has no
    /// normalization and both domains share every layer.
    pub per_domain_bn: bool,
    /// Append an affine + batch norm stage after the stack.
    pub bottleneck: bool,
}

impl EncoderConfig {
    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be >= 1".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be >= 1".into()));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("hidden_dims entries must be >= 1".into()));
        }
        Ok(())
    }

    /// Output width of every stack stage: hidden layers then the feature
    /// projection.
    fn stack_dims(&self) -> Vec<usize> {
        let mut dims = self.hidden_dims.clone();
        dims.push(self.feature_dim);
        dims
    }
}

#[derive(Debug, Clone)]
pub struct AffineLayer {
    /// in_dim x out_dim.
    pub w: Matrix,
    /// Absent when batch norm immediately follows.
    pub b: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct BnLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub run_mean: Vec<f64>,
    pub run_var: Vec<f64>,
}

impl BnLayer {
    fn new(dim: usize) -> Self {
        BnLayer {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            run_mean: vec![0.0; dim],
            run_var: vec![1.0; dim],
        }
    }
}

/// One normalization site: a single shared layer, or one layer per domain.
#[derive(Debug, Clone)]
pub struct BnStage {
    layers: Vec<BnLayer>,
}

impl BnStage {
    fn new(dim: usize, per_domain: bool) -> Self {
        let n = if per_domain { 2 } else { 1 };
        BnStage {
            layers: (0..n).map(|_| BnLayer::new(dim)).collect(),
        }
    }

    fn index(&self, domain: Domain) -> usize {
        if self.layers.len() == 1 {
            0
        } else {
            match domain {
                Domain::Source => 0,
                Domain::Target => 1,
            }
        }
    }

    pub fn layer(&self, domain: Domain) -> &BnLayer {
        &self.layers[self.index(domain)]
    }

    fn layer_mut(&mut self, domain: Domain) -> &mut BnLayer {
        let i = self.index(domain);
        &mut self.layers[i]
    }

    fn names(&self) -> &'static [&'static str] {
        if self.layers.len() == 1 {
            &["shared"]
        } else {
            &["source", "target"]
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub affine: AffineLayer,
    pub bn: BnStage,
}

/// Encoded batch: raw features, unit-norm features, labels (or
/// pseudo-labels; may be empty for unlabeled batches), and the domain tag.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub raw: Matrix,
    pub z: Matrix,
    pub labels: Vec<i32>,
    pub domain: Domain,
}

/// Learning-rate group a parameter tensor belongs to. Layers trained from
/// scratch for the transfer task (bottleneck, classifier) take a larger
/// step than the backbone stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrGroup {
    Backbone,
    NewLayers,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub len: usize,
    pub group: LrGroup,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: EncoderConfig,
    pub classes: usize,
    pub stack: Vec<AffineLayer>,
    /// Parallel to `stack` when per_domain_bn is set; empty otherwise.
    pub stack_bn: Vec<BnStage>,
    pub bottleneck: Option<Bottleneck>,
    /// classes x feature_dim.
    pub classifier_w: Matrix,
    pub classifier_b: Option<Vec<f64>>,
    pub classifier_frozen: bool,
}

/// Nodes for every model tensor on one tape. Bind once per tape and reuse
/// across forward passes so gradients accumulate into the same leaves.
pub struct TapeBinding {
    stack: Vec<(NodeId, Option<NodeId>)>,
    stack_bn: Vec<Vec<(NodeId, NodeId)>>,
    bottleneck: Option<(NodeId, Vec<(NodeId, NodeId)>)>,
    classifier_w: NodeId,
    classifier_b: Option<NodeId>,
}

/// Where a batch-norm statistics update applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnSite {
    Stack(usize),
    Bottleneck,
}

#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub site: BnSite,
    pub domain: Domain,
    pub stats: BatchStats,
}

/// Result of one tape forward pass.
pub struct ForwardPass {
    pub raw: NodeId,
    pub z: NodeId,
    pub bn_updates: Vec<BnUpdate>,
}

fn init_affine(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, bias: bool) -> AffineLayer {
    let s = (1.0 / in_dim as f64).sqrt();
    let data = (0..in_dim * out_dim).map(|_| rng.gen_range(-s..s)).collect();
    AffineLayer {
        w: Matrix::from_vec(in_dim, out_dim, data),
        b: bias.then(|| vec![0.0; out_dim]),
    }
}

impl Model {
    /// Fresh model with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights,
    /// zero biases, identity batch-norm parameters. Deterministic in `seed`.
    pub fn init(cfg: &EncoderConfig, classes: usize, seed: u64) -> Result<Model> {
        cfg.validate()?;
        if classes < 2 {
            return Err(Error::InvalidConfig("classes must be >= 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stack = Vec::new();
        let mut stack_bn = Vec::new();
        let mut prev = cfg.input_dim;
        for &dim in &cfg.stack_dims() {
            stack.push(init_affine(&mut rng, prev, dim, !cfg.per_domain_bn));
            if cfg.per_domain_bn {
                stack_bn.push(BnStage::new(dim, true));
            }
            prev = dim;
        }
        let bottleneck = if cfg.bottleneck {
            Some(Bottleneck {
                affine: init_affine(&mut rng, cfg.feature_dim, cfg.feature_dim, false),
                bn: BnStage::new(cfg.feature_dim, cfg.per_domain_bn),
            })
        } else {
            None
        };
        let s = (1.0 / cfg.feature_dim as f64).sqrt();
        let wdata = (0..classes * cfg.feature_dim).map(|_| rng.gen_range(-s..s)).collect();
        Ok(Model {
            cfg: cfg.clone(),
            classes,
            stack,
            stack_bn,
            bottleneck,
            classifier_w: Matrix::from_vec(classes, cfg.feature_dim, wdata),
            classifier_b: Some(vec![0.0; classes]),
            classifier_frozen: false,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    /// Create tape leaves for every tensor, in canonical order.
    pub fn bind(&self, tape: &mut Tape) -> TapeBinding {
        let mut stack = Vec::new();
        let mut stack_bn = Vec::new();
        for (i, layer) in self.stack.iter().enumerate() {
            let w = tape.leaf(layer.w.clone());
            let b = layer.b.as_ref().map(|b| tape.leaf(Matrix::row_vector(b)));
            stack.push((w, b));
            if self.cfg.per_domain_bn {
                let mut nodes = Vec::new();
                for bn in &self.stack_bn[i].layers {
                    let g = tape.leaf(Matrix::row_vector(&bn.gamma));
                    let be = tape.leaf(Matrix::row_vector(&bn.beta));
                    nodes.push((g, be));
                }
                stack_bn.push(nodes);
            }
        }
        let bottleneck = self.bottleneck.as_ref().map(|bt| {
            let w = tape.leaf(bt.affine.w.clone());
            let mut nodes = Vec::new();
            for bn in &bt.bn.layers {
                let g = tape.leaf(Matrix::row_vector(&bn.gamma));
                let be = tape.leaf(Matrix::row_vector(&bn.beta));
                nodes.push((g, be));
            }
            (w, nodes)
        });
        let classifier_w = tape.leaf(self.classifier_w.clone());
        let classifier_b = self
            .classifier_b
            .as_ref()
            .map(|b| tape.leaf(Matrix::row_vector(b)));
        TapeBinding {
            stack,
            stack_bn,
            bottleneck,
            classifier_w,
            classifier_b,
        }
    }

    /// Encoder forward pass on the tape. Returns raw and normalized feature
    /// nodes plus the batch-norm statistics observed (Train mode only);
    /// the caller decides when to fold them into the running estimates.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        x: &Matrix,
        domain: Domain,
        mode: Mode,
    ) -> Result<ForwardPass> {
        if x.cols != self.cfg.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.input_dim,
                got: x.cols,
                context: "encoder input",
            });
        }
        if x.rows == 0 {
            return Err(Error::EmptyInput("encoder batch"));
        }
        let mut bn_updates = Vec::new();
        let mut h = tape.leaf(x.clone());
        for (i, (w, b)) in binding.stack.iter().enumerate() {
            h = tape.matmul(h, *w);
            if let Some(b) = b {
                h = tape.add_bias(h, *b);
            }
            if self.cfg.per_domain_bn {
                let stage = &self.stack_bn[i];
                let (g, be) = binding.stack_bn[i][stage.index(domain)];
                h = match mode {
                    Mode::Train => {
                        let (out, stats) = tape.batch_norm_train(h, g, be);
                        bn_updates.push(BnUpdate {
                            site: BnSite::Stack(i),
                            domain,
                            stats,
                        });
                        out
                    }
                    Mode::Eval => {
                        let bn = stage.layer(domain);
                        tape.batch_norm_eval(h, g, be, &bn.run_mean, &bn.run_var)
                    }
                };
            }
            h = match self.cfg.activation {
                Activation::Relu => tape.relu(h),
                Activation::Tanh => tape.tanh(h),
            };
        }
        if let (Some(bt), Some((w, bn_nodes))) = (&self.bottleneck, &binding.bottleneck) {
            h = tape.matmul(h, *w);
            let (g, be) = bn_nodes[bt.bn.index(domain)];
            h = match mode {
                Mode::Train => {
                    let (out, stats) = tape.batch_norm_train(h, g, be);
                    bn_updates.push(BnUpdate {
                        site: BnSite::Bottleneck,
                        domain,
                        stats,
                    });
                    out
                }
                Mode::Eval => {
                    let bn = bt.bn.layer(domain);
                    tape.batch_norm_eval(h, g, be, &bn.run_mean, &bn.run_var)
                }
            };
        }
        let z = tape.normalize_rows(h)?;
        Ok(ForwardPass {
            raw: h,
            z,
            bn_updates,
        })
    }

    /// Linear classifier on the tape: features * W^T (+ bias).
    pub fn classify_on_tape(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        features: NodeId,
    ) -> NodeId {
        let logits = tape.matmul_nt(features, binding.classifier_w);
        match binding.classifier_b {
            Some(b) => tape.add_bias(logits, b),
            None => logits,
        }
    }

    /// Prototype logits for the source-free loss: z * W^T / tau, with the
    /// frozen classifier rows as class prototypes.
    pub fn prototype_logits_on_tape(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        z: NodeId,
        tau: f64,
    ) -> Result<NodeId> {
        if !self.classifier_frozen {
            return Err(Error::NotPrepared);
        }
        let sims = tape.matmul_nt(z, binding.classifier_w);
        Ok(tape.scale(sims, 1.0 / tau))
    }

    /// Fold observed batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let layer = match u.site {
                BnSite::Stack(i) => self.stack_bn[i].layer_mut(u.domain),
                BnSite::Bottleneck => self
                    .bottleneck
                    .as_mut()
                    .expect("bottleneck stats for model without bottleneck")
                    .bn
                    .layer_mut(u.domain),
            };
            for (r, &b) in layer.run_mean.iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, &b) in layer.run_var.iter_mut().zip(&u.stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    /// Encode a batch. Train mode normalizes with batch statistics and
    /// updates the running estimates for `domain`; Eval mode uses the
    /// stored running statistics and leaves the model untouched.
    pub fn encode(
        &mut self,
        x: &Matrix,
        labels: &[i32],
        domain: Domain,
        mode: Mode,
    ) -> Result<FeatureBatch> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let pass = self.forward(&mut tape, &binding, x, domain, mode)?;
        if mode == Mode::Train {
            self.apply_bn_updates(&pass.bn_updates);
        }
        Self::feature_batch(&tape, &pass, labels, domain, x.rows)
    }

    /// Eval-mode encoding through `&self`; never mutates the model.
    pub fn encode_eval(&self, x: &Matrix, labels: &[i32], domain: Domain) -> Result<FeatureBatch> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let pass = self.forward(&mut tape, &binding, x, domain, Mode::Eval)?;
        Self::feature_batch(&tape, &pass, labels, domain, x.rows)
    }

    fn feature_batch(
        tape: &Tape,
        pass: &ForwardPass,
        labels: &[i32],
        domain: Domain,
        rows: usize,
    ) -> Result<FeatureBatch> {
        if !labels.is_empty() && labels.len() != rows {
            return Err(Error::DimensionMismatch {
                expected: rows,
                got: labels.len(),
                context: "labels per batch row",
            });
        }
        Ok(FeatureBatch {
            raw: tape.value(pass.raw).clone(),
            z: tape.value(pass.z).clone(),
            labels: labels.to_vec(),
            domain,
        })
    }

    /// Logits for already-encoded features: features * W^T (+ bias).
    pub fn classify(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols != self.cfg.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.feature_dim,
                got: features.cols,
                context: "classifier input",
            });
        }
        let mut logits = features.matmul_nt(&self.classifier_w);
        if let Some(b) = &self.classifier_b {
            for r in 0..logits.rows {
                for (o, &add) in logits.row_mut(r).iter_mut().zip(b) {
                    *o += add;
                }
            }
        }
        Ok(logits)
    }

    /// Predicted class per row (argmax of logits; ties pick the lowest
    /// index). Uses Eval-mode encoding.
    pub fn predict(&self, x: &Matrix, domain: Domain) -> Result<Vec<usize>> {
        let fb = self.encode_eval(x, &[], domain)?;
        let logits = self.classify(&fb.raw)?;
        Ok((0..logits.rows).map(|r| argmax(logits.row(r))).collect())
    }

    /// Switch to source-data-free form: drop the classifier bias, scale
    /// each class row to unit norm, and freeze the classifier. Idempotent.
    pub fn prepare_source_free(&mut self) -> Result<()> {
        if self.classifier_frozen {
            return Ok(());
        }
        let mut w = Matrix::zeros(self.classes, self.cfg.feature_dim);
        for m in 0..self.classes {
            let row = l2_normalize(self.classifier_w.row(m))?;
            w.row_mut(m).copy_from_slice(&row);
        }
        self.classifier_w = w;
        self.classifier_b = None;
        self.classifier_frozen = true;
        Ok(())
    }

    /// Trainable tensor layout in canonical order. The frozen classifier is
    /// excluded.
    pub fn layout(&self) -> Vec<ParamEntry> {
        let mut out = Vec::new();
        let mut push = |name: String, len: usize, group: LrGroup| {
            out.push(ParamEntry { name, len, group });
        };
        for (i, layer) in self.stack.iter().enumerate() {
            push(format!("layer{i}.w"), layer.w.rows * layer.w.cols, LrGroup::Backbone);
            if let Some(b) = &layer.b {
                push(format!("layer{i}.b"), b.len(), LrGroup::Backbone);
            }
            if self.cfg.per_domain_bn {
                for (name, bn) in self.stack_bn[i].names().iter().zip(&self.stack_bn[i].layers) {
                    push(format!("layer{i}.bn.{name}.gamma"), bn.gamma.len(), LrGroup::Backbone);
                    push(format!("layer{i}.bn.{name}.beta"), bn.beta.len(), LrGroup::Backbone);
                }
            }
        }
        if let Some(bt) = &self.bottleneck {
            push(
                "bottleneck.w".into(),
                bt.affine.w.rows * bt.affine.w.cols,
                LrGroup::NewLayers,
            );
            for (name, bn) in bt.bn.names().iter().zip(&bt.bn.layers) {
                push(format!("bottleneck.bn.{name}.gamma"), bn.gamma.len(), LrGroup::NewLayers);
                push(format!("bottleneck.bn.{name}.beta"), bn.beta.len(), LrGroup::NewLayers);
            }
        }
        if !self.classifier_frozen {
            push(
                "classifier.w".into(),
                self.classifier_w.rows * self.classifier_w.cols,
                LrGroup::NewLayers,
            );
            if let Some(b) = &self.classifier_b {
                push("classifier.b".into(), b.len(), LrGroup::NewLayers);
            }
        }
        out
    }

    fn trainable_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (i, layer) in self.stack.iter().enumerate() {
            out.push(layer.w.as_slice());
            if let Some(b) = &layer.b {
                out.push(b);
            }
            if self.cfg.per_domain_bn {
                for bn in &self.stack_bn[i].layers {
                    out.push(&bn.gamma);
                    out.push(&bn.beta);
                }
            }
        }
        if let Some(bt) = &self.bottleneck {
            out.push(bt.affine.w.as_slice());
            for bn in &bt.bn.layers {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        if !self.classifier_frozen {
            out.push(self.classifier_w.as_slice());
            if let Some(b) = &self.classifier_b {
                out.push(b);
            }
        }
        out
    }

    fn trainable_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let per_domain = self.cfg.per_domain_bn;
        let mut out: Vec<&mut [f64]> = Vec::new();
        let mut bn_iter = self.stack_bn.iter_mut();
        for layer in self.stack.iter_mut() {
            out.push(layer.w.as_mut_slice());
            if let Some(b) = &mut layer.b {
                out.push(b);
            }
            if per_domain {
                let stage = bn_iter.next().expect("bn stage per stack layer");
                for bn in &mut stage.layers {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
            }
        }
        if let Some(bt) = &mut self.bottleneck {
            out.push(bt.affine.w.as_mut_slice());
            for bn in &mut bt.bn.layers {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        if !self.classifier_frozen {
            out.push(self.classifier_w.as_mut_slice());
            if let Some(b) = &mut self.classifier_b {
                out.push(b);
            }
        }
        out
    }

    /// All trainable parameters as one flat vector, in layout order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        self.trainable_slices().concat()
    }

    /// Overwrite trainable parameters from a flat vector (layout order).
    pub fn set_trainable(&mut self, vals: &[f64]) -> Result<()> {
        let total: usize = self.layout().iter().map(|e| e.len).sum();
        if vals.len() != total {
            return Err(Error::DimensionMismatch {
                expected: total,
                got: vals.len(),
                context: "trainable parameter vector",
            });
        }
        let mut offset = 0;
        for slice in self.trainable_slices_mut() {
            slice.copy_from_slice(&vals[offset..offset + slice.len()]);
            offset += slice.len();
        }
        Ok(())
    }

    /// Gradients of one tape backward pass, flattened in layout order.
    /// Unreached tensors (e.g. batch norm of the domain not in the batch)
    /// contribute zeros.
    pub fn grad_vector(&self, binding: &TapeBinding, grads: &Gradients) -> Vec<f64> {
        let mut nodes: Vec<(NodeId, usize)> = Vec::new();
        for (i, (w, b)) in binding.stack.iter().enumerate() {
            let layer = &self.stack[i];
            nodes.push((*w, layer.w.rows * layer.w.cols));
            if let (Some(b), Some(bv)) = (b, &layer.b) {
                nodes.push((*b, bv.len()));
            }
            if self.cfg.per_domain_bn {
                for (j, (g, be)) in binding.stack_bn[i].iter().enumerate() {
                    let bn = &self.stack_bn[i].layers[j];
                    nodes.push((*g, bn.gamma.len()));
                    nodes.push((*be, bn.beta.len()));
                }
            }
        }
        if let (Some(bt), Some((w, bn_nodes))) = (&self.bottleneck, &binding.bottleneck) {
            nodes.push((*w, bt.affine.w.rows * bt.affine.w.cols));
            for (j, (g, be)) in bn_nodes.iter().enumerate() {
                let bn = &bt.bn.layers[j];
                nodes.push((*g, bn.gamma.len()));
                nodes.push((*be, bn.beta.len()));
            }
        }
        if !self.classifier_frozen {
            nodes.push((binding.classifier_w, self.classes * self.cfg.feature_dim));
            if let Some(b) = binding.classifier_b {
                nodes.push((b, self.classes));
            }
        }
        let mut out = Vec::new();
        for (node, len) in nodes {
            match grads.wrt(node) {
                Some(g) => {
                    debug_assert_eq!(g.rows * g.cols, len);
                    out.extend_from_slice(g.as_slice());
                }
                None => out.extend(std::iter::repeat(0.0).take(len)),
            }
        }
        out
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// -------------------------------------------------------------------------
// Checkpoint I/O: plain text, exact f64 round-trip.

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_tensor(out: &mut String, name: &str, rows: usize, cols: usize, data: &[f64]) {
    use fmt::Write;
    writeln!(out, "tensor {name} {rows} {cols}").unwrap();
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols].iter().map(|&x| fmt_f64(x)).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
}

fn bn_tensor_names(site: &str, bn_name: &str) -> [String; 4] {
    [
        format!("{site}.bn.{bn_name}.gamma"),
        format!("{site}.bn.{bn_name}.beta"),
        format!("{site}.bn.{bn_name}.run_mean"),
        format!("{site}.bn.{bn_name}.run_var"),
    ]
}

impl Model {
    /// Serialize every tensor (including running statistics) as text.
    /// Values print with 17 significant digits, so loading reproduces the
    /// exact bits.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let all = self.flatten_trainable();
        if !all.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        let mut out = String::new();
        out.push_str("CDCL-CKPT v1\n");
        let dims: Vec<String> = self.cfg.hidden_dims.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!(
            "meta classes={} input_dim={} hidden_dims={} feature_dim={} activation={} per_domain_bn={} bottleneck={} classifier_bias={} classifier_frozen={}\n",
            self.classes,
            self.cfg.input_dim,
            dims.join(","),
            self.cfg.feature_dim,
            self.cfg.activation,
            self.cfg.per_domain_bn as u8,
            self.cfg.bottleneck as u8,
            self.classifier_b.is_some() as u8,
            self.classifier_frozen as u8,
        ));
        for (i, layer) in self.stack.iter().enumerate() {
            write_tensor(&mut out, &format!("layer{i}.w"), layer.w.rows, layer.w.cols, layer.w.as_slice());
            if let Some(b) = &layer.b {
                write_tensor(&mut out, &format!("layer{i}.b"), 1, b.len(), b);
            }
            if self.cfg.per_domain_bn {
                for (name, bn) in self.stack_bn[i].names().iter().zip(&self.stack_bn[i].layers) {
                    let names = bn_tensor_names(&format!("layer{i}"), name);
                    for (tname, vals) in names.iter().zip([&bn.gamma, &bn.beta, &bn.run_mean, &bn.run_var]) {
                        write_tensor(&mut out, tname, 1, vals.len(), vals);
                    }
                }
            }
        }
        if let Some(bt) = &self.bottleneck {
            write_tensor(&mut out, "bottleneck.w", bt.affine.w.rows, bt.affine.w.cols, bt.affine.w.as_slice());
            for (name, bn) in bt.bn.names().iter().zip(&bt.bn.layers) {
                let names = bn_tensor_names("bottleneck", name);
                for (tname, vals) in names.iter().zip([&bn.gamma, &bn.beta, &bn.run_mean, &bn.run_var]) {
                    write_tensor(&mut out, tname, 1, vals.len(), vals);
                }
            }
        }
        write_tensor(
            &mut out,
            "classifier.w",
            self.classifier_w.rows,
            self.classifier_w.cols,
            self.classifier_w.as_slice(),
        );
        if let Some(b) = &self.classifier_b {
            write_tensor(&mut out, "classifier.b", 1, b.len(), b);
        }
        out.push_str("end\n");
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut reader = CkptReader {
            path,
            lines: text.lines().enumerate(),
        };
        let (_, header) = reader.next_line()?;
        if header.trim() != "CDCL-CKPT v1" {
            return Err(Error::format(path, 1, "expected header 'CDCL-CKPT v1'"));
        }
        let (meta_no, meta_line) = reader.next_line()?;
        let meta = parse_meta(path, meta_no, meta_line)?;

        let cfg = EncoderConfig {
            input_dim: meta.input_dim,
            hidden_dims: meta.hidden_dims.clone(),
            feature_dim: meta.feature_dim,
            activation: meta.activation,
            per_domain_bn: meta.per_domain_bn,
            bottleneck: meta.bottleneck,
        };
        cfg.validate()?;
        let mut model = Model::init(&cfg, meta.classes, 0)?;
        if !meta.classifier_bias {
            model.classifier_b = None;
        }
        model.classifier_frozen = meta.classifier_frozen;

        let mut prev = cfg.input_dim;
        for (i, &dim) in cfg.stack_dims().iter().enumerate() {
            model.stack[i].w = reader.tensor(&format!("layer{i}.w"), prev, dim)?;
            if model.stack[i].b.is_some() {
                model.stack[i].b = Some(reader.tensor(&format!("layer{i}.b"), 1, dim)?.into_data());
            }
            if cfg.per_domain_bn {
                for (j, name) in ["source", "target"].iter().enumerate() {
                    let names = bn_tensor_names(&format!("layer{i}"), name);
                    let bn = &mut model.stack_bn[i].layers[j];
                    bn.gamma = reader.tensor(&names[0], 1, dim)?.into_data();
                    bn.beta = reader.tensor(&names[1], 1, dim)?.into_data();
                    bn.run_mean = reader.tensor(&names[2], 1, dim)?.into_data();
                    bn.run_var = reader.tensor(&names[3], 1, dim)?.into_data();
                }
            }
            prev = dim;
        }
        if cfg.bottleneck {
            let bt = model.bottleneck.as_mut().expect("constructed with bottleneck");
            bt.affine.w = reader.tensor("bottleneck.w", cfg.feature_dim, cfg.feature_dim)?;
            let names: Vec<&str> = if cfg.per_domain_bn {
                vec!["source", "target"]
            } else {
                vec!["shared"]
            };
            for (j, name) in names.iter().enumerate() {
                let tn = bn_tensor_names("bottleneck", name);
                let bn = &mut bt.bn.layers[j];
                bn.gamma = reader.tensor(&tn[0], 1, cfg.feature_dim)?.into_data();
                bn.beta = reader.tensor(&tn[1], 1, cfg.feature_dim)?.into_data();
                bn.run_mean = reader.tensor(&tn[2], 1, cfg.feature_dim)?.into_data();
                bn.run_var = reader.tensor(&tn[3], 1, cfg.feature_dim)?.into_data();
            }
        }
        model.classifier_w = reader.tensor("classifier.w", meta.classes, cfg.feature_dim)?;
        if meta.classifier_bias {
            model.classifier_b = Some(reader.tensor("classifier.b", 1, meta.classes)?.into_data());
        }
        let (no, last) = reader.next_line()?;
        if last.trim() != "end" {
            return Err(Error::format(path, no, "expected trailing 'end'"));
        }
        Ok(model)
    }
}

struct Meta {
    classes: usize,
    input_dim: usize,
    hidden_dims: Vec<usize>,
    feature_dim: usize,
    activation: Activation,
    per_domain_bn: bool,
    bottleneck: bool,
    classifier_bias: bool,
    classifier_frozen: bool,
}

fn parse_meta(path: &Path, line_no: usize, line: &str) -> Result<Meta> {
    let body = line
        .strip_prefix("meta ")
        .ok_or_else(|| Error::format(path, line_no, "expected 'meta' line"))?;
    let mut fields = std::collections::BTreeMap::new();
    for part in body.split_whitespace() {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::format(path, line_no, "meta entries must be key=value"))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<String> {
        fields
            .get(k)
            .cloned()
            .ok_or_else(|| Error::format(path, line_no, format!("meta missing '{k}'")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(path, line_no, format!("meta '{k}' is not an integer")))
    };
    let parse_bool = |k: &str| -> Result<bool> {
        match get(k)?.as_str() {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(Error::format(path, line_no, format!("meta '{k}' must be 0 or 1"))),
        }
    };
    let dims_raw = get("hidden_dims")?;
    let hidden_dims = if dims_raw.is_empty() {
        Vec::new()
    } else {
        dims_raw
            .split(',')
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| Error::format(path, line_no, "bad hidden_dims entry"))
            })
            .collect::<Result<Vec<usize>>>()?
    };
    Ok(Meta {
        classes: parse_usize("classes")?,
        input_dim: parse_usize("input_dim")?,
        hidden_dims,
        feature_dim: parse_usize("feature_dim")?,
        activation: Activation::parse(&get("activation")?)?,
        per_domain_bn: parse_bool("per_domain_bn")?,
        bottleneck: parse_bool("bottleneck")?,
        classifier_bias: parse_bool("classifier_bias")?,
        classifier_frozen: parse_bool("classifier_frozen")?,
    })
}

struct CkptReader<'a> {
    path: &'a Path,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> CkptReader<'a> {
    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        match self.lines.next() {
            Some((i, line)) => Ok((i + 1, line)),
            None => Err(Error::format(self.path, 0, "unexpected end of file")),
        }
    }

    fn tensor(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let (no, header) = self.next_line()?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "tensor" {
            return Err(Error::format(self.path, no, format!("expected tensor header for '{name}'")));
        }
        if parts[1] != name {
            return Err(Error::format(
                self.path,
                no,
                format!("expected tensor '{name}', found '{}'", parts[1]),
            ));
        }
        let r: usize = parts[2]
            .parse()
            .map_err(|_| Error::format(self.path, no, "bad tensor row count"))?;
        let c: usize = parts[3]
            .parse()
            .map_err(|_| Error::format(self.path, no, "bad tensor column count"))?;
        if (r, c) != (rows, cols) {
            return Err(Error::format(
                self.path,
                no,
                format!("tensor '{name}' has shape {r}x{c}, expected {rows}x{cols}"),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (no, line) = self.next_line()?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != cols {
                return Err(Error::format(
                    self.path,
                    no,
                    format!("tensor '{name}' row has {} values, expected {cols}", vals.len()),
                ));
            }
            for v in vals {
                data.push(
                    v.parse::<f64>()
                        .map_err(|_| Error::format(self.path, no, "unparseable float"))?,
                );
            }
        }
        Ok(Matrix::from_vec(rows, cols, data))
    }
}
