//! Training loops: supervised pretraining on the source domain, the
//! adaptation loop with the contrastive alignment term, the source-free
//! variant, and evaluation.
//!
//! All loops share the same optimizer: SGD with classic momentum
//! (v <- m v + g, theta <- theta - lr v) and a polynomially decaying
//! learning rate, with the bottleneck and classifier stepping at a
//! higher base rate than the backbone stack.
//!
//! Determinism: every stream of random decisions (split, batch order per
//! sampler) has its own seed derived from the run seed, so changing one
//! part of the procedure, like disabling the contrastive term, leaves
//! the others bit-for-bit unchanged.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::autodiff::Tape;
use crate::data::{split_train_val, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::losses::{cdc_on_tape, PairMode, PairSelection};
use crate::model::{Domain, EncoderConfig, Mode, Model};
use crate::numerics::Matrix;
use crate::pseudolabel::{generate_pseudo_labels, LabelingMode, PseudoLabelConfig};

#[derive(Debug, Clone)]
pub struct HyperParams {
    pub tau: f64,
    pub lambda: f64,
    /// Pseudo-labels below this assigned similarity are discarded.
    pub confidence_threshold: f64,
    pub lr_backbone: f64,
    pub lr_new_layers: f64,
    /// Decay exponent of the learning-rate schedule.
    pub schedule_b: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub pair_mode: PairMode,
    /// Reuse the classification batch as the source contrastive batch
    /// instead of sampling an independent one.
    pub share_ce_batch: bool,
    /// Fraction of the source data used for training during pretraining;
    /// the rest selects the best snapshot.
    pub train_split: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            tau: 0.05,
            lambda: 1.6,
            confidence_threshold: 0.0,
            lr_backbone: 1e-3,
            lr_new_layers: 1e-2,
            schedule_b: 0.75,
            momentum: 0.9,
            epochs: 15,
            iters_per_epoch: 12,
            batch_size: 32,
            seed: 7,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
            pair_mode: PairMode::CrossDomain,
            share_ce_batch: false,
            train_split: 0.9,
        }
    }
}

impl HyperParams {
    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::TemperatureNonPositive(self.tau));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.epochs > 0 && self.iters_per_epoch == 0 {
            return Err(Error::InvalidConfig(
                "iters_per_epoch must be positive when epochs > 0".into(),
            ));
        }
        if !(self.lr_backbone > 0.0 && self.lr_new_layers > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.schedule_b < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "schedule_b must be nonnegative, got {}",
                self.schedule_b
            )));
        }
        Ok(())
    }

    fn pseudo_cfg(&self) -> PseudoLabelConfig {
        PseudoLabelConfig {
            confidence_threshold: self.confidence_threshold,
            max_iters: self.kmeans_max_iters,
            tol: self.kmeans_tol,
        }
    }
}

/// Decayed learning rate at training progress `p` in [0, 1]:
/// eta0 * (1 + 10 p)^(-b).
pub fn lr_schedule(eta0: f64, p: f64, b: f64) -> f64 {
    eta0 * (1.0 + 10.0 * p).powf(-b)
}

// derived seeds for the independent random streams
const STREAM_SPLIT: u64 = 1;
const STREAM_CE: u64 = 2;
const STREAM_CONTRASTIVE_SOURCE: u64 = 3;
const STREAM_TARGET: u64 = 4;

fn stream_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 over base xor stream
    let mut x = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

/// One momentum SGD step over the flattened trainable parameters.
/// `velocity` may start empty; it is sized on first use and must keep
/// the same length afterwards.
pub fn sgd_step(
    model: &mut Model,
    grads: &[f64],
    lr_backbone: f64,
    lr_new_layers: f64,
    momentum: f64,
    velocity: &mut Vec<f64>,
) -> Result<()> {
    let layout = model.layout();
    let total: usize = layout.iter().map(|e| e.len).sum();
    if grads.len() != total {
        return Err(Error::DimensionMismatch {
            expected: total,
            got: grads.len(),
            context: "gradient vector",
        });
    }
    if velocity.is_empty() {
        velocity.resize(total, 0.0);
    }
    if velocity.len() != total {
        return Err(Error::DimensionMismatch {
            expected: total,
            got: velocity.len(),
            context: "velocity vector",
        });
    }
    let mut theta = model.flatten_trainable();
    let mut off = 0;
    for entry in &layout {
        let lr = match entry.group {
            crate::model::LrGroup::Backbone => lr_backbone,
            crate::model::LrGroup::NewLayers => lr_new_layers,
        };
        for k in off..off + entry.len {
            velocity[k] = momentum * velocity[k] + grads[k];
            theta[k] -= lr * velocity[k];
        }
        off += entry.len;
    }
    model.set_trainable(&theta)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Indexed by class; classes absent from the data report 0.
    pub per_class_accuracy: Vec<f64>,
    /// Mean of the per-class accuracies over classes present in the data.
    pub mean_class_accuracy: f64,
    pub samples: usize,
}

/// Accuracy of eval-mode predictions against ground-truth labels.
pub fn evaluate(model: &Model, features: &Matrix, truth: &[i32], domain: Domain) -> Result<EvalReport> {
    if truth.is_empty() {
        return Err(Error::EmptyInput("evaluation labels"));
    }
    if truth.len() != features.rows {
        return Err(Error::DimensionMismatch {
            expected: features.rows,
            got: truth.len(),
            context: "evaluation labels per row",
        });
    }
    if truth.iter().any(|&y| y < 0) {
        return Err(Error::LabelsRequired("evaluation"));
    }
    if let Some(&y) = truth.iter().find(|&&y| y as usize >= model.classes) {
        return Err(Error::LabelOutOfRange {
            label: y as i64,
            classes: model.classes,
        });
    }
    let pred = model.predict(features, domain)?;
    let mut correct = vec![0usize; model.classes];
    let mut count = vec![0usize; model.classes];
    let mut hits = 0usize;
    for (p, &y) in pred.iter().zip(truth) {
        let y = y as usize;
        count[y] += 1;
        if *p == y {
            correct[y] += 1;
            hits += 1;
        }
    }
    let per_class: Vec<f64> = (0..model.classes)
        .map(|m| if count[m] == 0 { 0.0 } else { correct[m] as f64 / count[m] as f64 })
        .collect();
    let present = count.iter().filter(|&&c| c > 0).count();
    let mean_class = (0..model.classes)
        .filter(|&m| count[m] > 0)
        .map(|m| per_class[m])
        .sum::<f64>()
        / present as f64;
    Ok(EvalReport {
        accuracy: hits as f64 / truth.len() as f64,
        per_class_accuracy: per_class,
        mean_class_accuracy: mean_class,
        samples: truth.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub seed: u64,
    /// Mean training cross-entropy per epoch.
    pub train_losses: Vec<f64>,
    /// Validation accuracy before training and after each epoch.
    pub val_accuracy: Vec<f64>,
    /// Index into `val_accuracy` of the kept snapshot (0 = untrained).
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub config: BTreeMap<String, String>,
}

fn to_usize_labels(labels: &[i32]) -> Vec<usize> {
    labels.iter().map(|&y| y as usize).collect()
}

fn check_finite(value: f64, what: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{what} loss is {value}")));
    }
    Ok(())
}

/// Supervised pretraining on labeled source data. The source set is
/// split for snapshot selection; the returned model is the one with the
/// best validation accuracy (earliest epoch on ties, with the untrained
/// model as the first candidate).
pub fn pretrain_source(
    source: &Dataset,
    enc_cfg: &EncoderConfig,
    hyper: &HyperParams,
) -> Result<(Model, PretrainReport)> {
    hyper.validate()?;
    if !source.is_labeled() {
        return Err(Error::LabelsRequired("pretraining source dataset"));
    }
    let (train, val) = split_train_val(source, hyper.train_split, stream_seed(hyper.seed, STREAM_SPLIT))?;
    let mut model = Model::init(enc_cfg, source.classes, hyper.seed)?;
    let mut velocity = Vec::new();
    let mut sampler = BatchSampler::over_all(
        train.len(),
        hyper.batch_size.min(train.len()),
        true,
        stream_seed(hyper.seed, STREAM_CE),
    )?;

    let mut best = model.clone();
    let mut best_acc = evaluate(&model, &val.features, &val.labels, Domain::Source)?.accuracy;
    let mut best_epoch = 0usize;
    let mut val_accuracy = vec![best_acc];
    let mut train_losses = Vec::with_capacity(hyper.epochs);

    let total_steps = (hyper.epochs * hyper.iters_per_epoch).max(1);
    let mut step = 0usize;
    for epoch in 0..hyper.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..hyper.iters_per_epoch {
            let idx = sampler.next_batch();
            let batch = train.select(&idx);
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let pass = model.forward(&mut tape, &binding, &batch.features, Domain::Source, Mode::Train)?;
            let logits = model.classify_on_tape(&mut tape, &binding, pass.raw);
            let loss = tape.cross_entropy_mean(logits, to_usize_labels(&batch.labels));
            let lv = tape.scalar(loss);
            check_finite(lv, "pretraining")?;
            let grads = tape.backward(loss);
            let g = model.grad_vector(&binding, &grads);
            let p = step as f64 / total_steps as f64;
            sgd_step(
                &mut model,
                &g,
                lr_schedule(hyper.lr_backbone, p, hyper.schedule_b),
                lr_schedule(hyper.lr_new_layers, p, hyper.schedule_b),
                hyper.momentum,
                &mut velocity,
            )?;
            model.apply_bn_updates(&pass.bn_updates);
            step += 1;
            epoch_loss += lv;
        }
        train_losses.push(epoch_loss / hyper.iters_per_epoch as f64);
        let acc = evaluate(&model, &val.features, &val.labels, Domain::Source)?.accuracy;
        val_accuracy.push(acc);
        if acc > best_acc {
            best_acc = acc;
            best = model.clone();
            best_epoch = epoch + 1;
        }
    }

    Ok((
        best,
        PretrainReport {
            epochs: hyper.epochs,
            seed: hyper.seed,
            train_losses,
            val_accuracy,
            best_epoch,
            best_val_accuracy: best_acc,
            config: BTreeMap::new(),
        },
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLoss {
    pub total: f64,
    pub ce: f64,
    pub cdc_source: f64,
    pub cdc_target: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub mode: String,
    pub epochs: usize,
    pub seed: u64,
    /// Per-epoch means of the loss components.
    pub losses: Vec<EpochLoss>,
    /// Fraction of target samples surviving confidence filtering, per
    /// epoch. Empty when no pseudo-labeling ran.
    pub retained_fraction: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class_accuracy: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_class_accuracy: Option<f64>,
    pub config: BTreeMap<String, String>,
    /// Per-iteration classification loss, for exact-equivalence checks.
    #[serde(skip)]
    pub ce_trace: Vec<f64>,
    #[serde(skip)]
    pub total_trace: Vec<f64>,
}

impl TrainReport {
    fn new(mode: &str, hyper: &HyperParams) -> Self {
        TrainReport {
            mode: mode.to_string(),
            epochs: hyper.epochs,
            seed: hyper.seed,
            losses: Vec::new(),
            retained_fraction: Vec::new(),
            target_accuracy: None,
            per_class_accuracy: None,
            mean_class_accuracy: None,
            config: BTreeMap::new(),
            ce_trace: Vec::new(),
            total_trace: Vec::new(),
        }
    }
}

struct EpochAccumulator {
    total: f64,
    ce: f64,
    cdc_source: f64,
    cdc_target: f64,
    n: usize,
}

impl EpochAccumulator {
    fn new() -> Self {
        EpochAccumulator { total: 0.0, ce: 0.0, cdc_source: 0.0, cdc_target: 0.0, n: 0 }
    }

    fn push(&mut self, total: f64, ce: f64, cs: f64, ct: f64) {
        self.total += total;
        self.ce += ce;
        self.cdc_source += cs;
        self.cdc_target += ct;
        self.n += 1;
    }

    fn mean(&self) -> EpochLoss {
        let n = self.n.max(1) as f64;
        EpochLoss {
            total: self.total / n,
            ce: self.ce / n,
            cdc_source: self.cdc_source / n,
            cdc_target: self.cdc_target / n,
        }
    }
}

/// Adaptation with the bidirectional contrastive term. Each epoch
/// refreshes the target pseudo-labels; each iteration takes one
/// classification batch and, when any target samples survive filtering,
/// one contrastive batch per domain.
pub fn train_uda(
    mut model: Model,
    source: &Dataset,
    target: &Dataset,
    hyper: &HyperParams,
) -> Result<(Model, TrainReport)> {
    hyper.validate()?;
    if !source.is_labeled() {
        return Err(Error::LabelsRequired("adaptation source dataset"));
    }
    if source.classes != model.classes {
        return Err(Error::DimensionMismatch {
            expected: model.classes,
            got: source.classes,
            context: "source dataset classes",
        });
    }
    if target.is_empty() {
        return Err(Error::EmptyInput("target dataset"));
    }
    let mut report = TrainReport::new("standard", hyper);
    let mut velocity = Vec::new();
    let mut ce_sampler = BatchSampler::over_all(
        source.len(),
        hyper.batch_size.min(source.len()),
        true,
        stream_seed(hyper.seed, STREAM_CE),
    )?;
    let mut cs_sampler = if hyper.share_ce_batch {
        None
    } else {
        Some(BatchSampler::over_all(
            source.len(),
            hyper.batch_size.min(source.len()),
            true,
            stream_seed(hyper.seed, STREAM_CONTRASTIVE_SOURCE),
        )?)
    };
    let plc = hyper.pseudo_cfg();
    let total_steps = (hyper.epochs * hyper.iters_per_epoch).max(1);
    let mut step = 0usize;

    for epoch in 0..hyper.epochs {
        let pseudo = generate_pseudo_labels(
            &model,
            &target.features,
            LabelingMode::Standard,
            Some((&source.features, &source.labels)),
            &plc,
        )?;
        let retained: Vec<usize> =
            (0..target.len()).filter(|&i| pseudo.retained[i]).collect();
        report
            .retained_fraction
            .push(retained.len() as f64 / target.len() as f64);
        let mut t_sampler = if retained.is_empty() {
            None
        } else {
            Some(BatchSampler::new(
                retained.clone(),
                hyper.batch_size.min(retained.len()),
                true,
                stream_seed(stream_seed(hyper.seed, STREAM_TARGET), epoch as u64),
            )?)
        };

        let mut acc = EpochAccumulator::new();
        for _ in 0..hyper.iters_per_epoch {
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let mut bn_updates = Vec::new();

            let ce_idx = ce_sampler.next_batch();
            let ce_batch = source.select(&ce_idx);
            let ce_pass =
                model.forward(&mut tape, &binding, &ce_batch.features, Domain::Source, Mode::Train)?;
            bn_updates.extend(ce_pass.bn_updates.iter().cloned());
            let logits = model.classify_on_tape(&mut tape, &binding, ce_pass.raw);
            let ce_node = tape.cross_entropy_mean(logits, to_usize_labels(&ce_batch.labels));

            let (cdc_s_node, cdc_t_node) = match &mut t_sampler {
                Some(ts) => {
                    let (zs_node, cs_labels) = match &mut cs_sampler {
                        Some(cs) => {
                            let cs_idx = cs.next_batch();
                            let cs_batch = source.select(&cs_idx);
                            let pass = model.forward(
                                &mut tape,
                                &binding,
                                &cs_batch.features,
                                Domain::Source,
                                Mode::Train,
                            )?;
                            bn_updates.extend(pass.bn_updates.iter().cloned());
                            (pass.z, cs_batch.labels)
                        }
                        None => (ce_pass.z, ce_batch.labels.clone()),
                    };
                    let t_idx = ts.next_batch();
                    let t_feats = target.select(&t_idx).features;
                    let t_labels: Vec<i32> = t_idx.iter().map(|&i| pseudo.labels[i]).collect();
                    let t_pass =
                        model.forward(&mut tape, &binding, &t_feats, Domain::Target, Mode::Train)?;
                    bn_updates.extend(t_pass.bn_updates.iter().cloned());
                    let selection = PairSelection::build(
                        hyper.pair_mode,
                        &cs_labels,
                        &t_labels,
                        &vec![true; t_labels.len()],
                    )?;
                    cdc_on_tape(&mut tape, zs_node, t_pass.z, &selection, hyper.tau)?
                }
                None => (tape.scalar_leaf(0.0), tape.scalar_leaf(0.0)),
            };

            let cdc_sum = tape.add(cdc_s_node, cdc_t_node);
            let scaled = tape.scale(cdc_sum, hyper.lambda);
            let total = tape.add(ce_node, scaled);

            let total_v = tape.scalar(total);
            let ce_v = tape.scalar(ce_node);
            let cs_v = tape.scalar(cdc_s_node);
            let ct_v = tape.scalar(cdc_t_node);
            check_finite(total_v, "adaptation")?;

            let grads = tape.backward(total);
            let g = model.grad_vector(&binding, &grads);
            let p = step as f64 / total_steps as f64;
            sgd_step(
                &mut model,
                &g,
                lr_schedule(hyper.lr_backbone, p, hyper.schedule_b),
                lr_schedule(hyper.lr_new_layers, p, hyper.schedule_b),
                hyper.momentum,
                &mut velocity,
            )?;
            model.apply_bn_updates(&bn_updates);
            step += 1;

            acc.push(total_v, ce_v, cs_v, ct_v);
            report.ce_trace.push(ce_v);
            report.total_trace.push(total_v);
        }
        report.losses.push(acc.mean());
    }
    Ok((model, report))
}

/// The classification-only loop: identical batch stream, schedule, and
/// updates as `train_uda`, with the contrastive machinery absent.
pub fn train_source_only(
    mut model: Model,
    source: &Dataset,
    hyper: &HyperParams,
) -> Result<(Model, TrainReport)> {
    hyper.validate()?;
    if !source.is_labeled() {
        return Err(Error::LabelsRequired("source dataset"));
    }
    let mut report = TrainReport::new("source-only", hyper);
    let mut velocity = Vec::new();
    let mut ce_sampler = BatchSampler::over_all(
        source.len(),
        hyper.batch_size.min(source.len()),
        true,
        stream_seed(hyper.seed, STREAM_CE),
    )?;
    let total_steps = (hyper.epochs * hyper.iters_per_epoch).max(1);
    let mut step = 0usize;
    for _ in 0..hyper.epochs {
        let mut acc = EpochAccumulator::new();
        for _ in 0..hyper.iters_per_epoch {
            let idx = ce_sampler.next_batch();
            let batch = source.select(&idx);
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let pass = model.forward(&mut tape, &binding, &batch.features, Domain::Source, Mode::Train)?;
            let logits = model.classify_on_tape(&mut tape, &binding, pass.raw);
            let loss = tape.cross_entropy_mean(logits, to_usize_labels(&batch.labels));
            let lv = tape.scalar(loss);
            check_finite(lv, "training")?;
            let grads = tape.backward(loss);
            let g = model.grad_vector(&binding, &grads);
            let p = step as f64 / total_steps as f64;
            sgd_step(
                &mut model,
                &g,
                lr_schedule(hyper.lr_backbone, p, hyper.schedule_b),
                lr_schedule(hyper.lr_new_layers, p, hyper.schedule_b),
                hyper.momentum,
                &mut velocity,
            )?;
            model.apply_bn_updates(&pass.bn_updates);
            step += 1;
            acc.push(lv, lv, 0.0, 0.0);
            report.ce_trace.push(lv);
            report.total_trace.push(lv);
        }
        report.losses.push(acc.mean());
    }
    Ok((model, report))
}

/// Source-free adaptation: the classifier rows become fixed class
/// prototypes and only the encoder trains, on pseudo-labeled target
/// batches. Epochs where nothing survives confidence filtering perform
/// no updates.
pub fn train_sdf(
    mut model: Model,
    target: &Dataset,
    hyper: &HyperParams,
) -> Result<(Model, TrainReport)> {
    hyper.validate()?;
    if target.is_empty() {
        return Err(Error::EmptyInput("target dataset"));
    }
    model.prepare_source_free()?;
    let mut report = TrainReport::new("source-free", hyper);
    let mut velocity = Vec::new();
    let plc = hyper.pseudo_cfg();
    let total_steps = (hyper.epochs * hyper.iters_per_epoch).max(1);
    let mut step = 0usize;

    for epoch in 0..hyper.epochs {
        let pseudo =
            generate_pseudo_labels(&model, &target.features, LabelingMode::SourceFree, None, &plc)?;
        let retained: Vec<usize> =
            (0..target.len()).filter(|&i| pseudo.retained[i]).collect();
        report
            .retained_fraction
            .push(retained.len() as f64 / target.len() as f64);
        if retained.is_empty() {
            report.losses.push(EpochAccumulator::new().mean());
            continue;
        }
        let mut sampler = BatchSampler::new(
            retained.clone(),
            hyper.batch_size.min(retained.len()),
            true,
            stream_seed(stream_seed(hyper.seed, STREAM_TARGET), epoch as u64),
        )?;
        let mut acc = EpochAccumulator::new();
        for _ in 0..hyper.iters_per_epoch {
            let idx = sampler.next_batch();
            let feats = target.select(&idx).features;
            let labels: Vec<usize> = idx.iter().map(|&i| pseudo.labels[i] as usize).collect();
            let mut tape = Tape::new();
            let binding = model.bind(&mut tape);
            let pass = model.forward(&mut tape, &binding, &feats, Domain::Target, Mode::Train)?;
            let logits = model.prototype_logits_on_tape(&mut tape, &binding, pass.z, hyper.tau)?;
            let loss = tape.cross_entropy_mean(logits, labels);
            let lv = tape.scalar(loss);
            check_finite(lv, "source-free adaptation")?;
            let grads = tape.backward(loss);
            let g = model.grad_vector(&binding, &grads);
            let p = step as f64 / total_steps as f64;
            sgd_step(
                &mut model,
                &g,
                lr_schedule(hyper.lr_backbone, p, hyper.schedule_b),
                lr_schedule(hyper.lr_new_layers, p, hyper.schedule_b),
                hyper.momentum,
                &mut velocity,
            )?;
            model.apply_bn_updates(&pass.bn_updates);
            step += 1;
            acc.push(lv, 0.0, 0.0, lv);
            report.total_trace.push(lv);
        }
        report.losses.push(acc.mean());
    }
    Ok((model, report))
}
