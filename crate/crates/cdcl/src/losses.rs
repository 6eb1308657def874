//! Training objectives: classification cross-entropy, pairwise InfoNCE,
//! and the cross-domain contrastive (CDC) losses built from pseudo-labeled
//! pair selections.
//!
//! Two denominator conventions coexist here, deliberately. `info_nce`
//! scores each positive against itself plus the negatives only. The CDC
//! anchor losses put every candidate, positives included, in the
//! denominator and average the log-ratios over the anchor's positive set.
//! With a single positive the two coincide.
//!
//! Value-returning functions delegate to the same tape ops the trainer
//! differentiates, so the number a test sees is the number training sees.

use std::fmt;

use serde::Serialize;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{Domain, FeatureBatch, Model};
use crate::numerics::{dot, Matrix};

/// How contrastive pairs are drawn between the source and target batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    /// Anchors in each domain, candidates only in the other.
    CrossDomain,
    /// Anchors and candidates in the same domain (anchor excluded).
    InDomain,
    /// Candidates from both domains (anchor excluded).
    CombinedDomain,
    /// Cross-domain pairs, source anchors only.
    CrossSourceAnchorsOnly,
    /// Cross-domain pairs, target anchors only.
    CrossTargetAnchorsOnly,
}

impl PairMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cross-domain" => Ok(PairMode::CrossDomain),
            "in-domain" => Ok(PairMode::InDomain),
            "combined-domain" => Ok(PairMode::CombinedDomain),
            "cross-source-anchors" => Ok(PairMode::CrossSourceAnchorsOnly),
            "cross-target-anchors" => Ok(PairMode::CrossTargetAnchorsOnly),
            other => Err(Error::InvalidConfig(format!(
                "unknown pair mode '{other}' (expected cross-domain, in-domain, \
                 combined-domain, cross-source-anchors, or cross-target-anchors)"
            ))),
        }
    }
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairMode::CrossDomain => "cross-domain",
            PairMode::InDomain => "in-domain",
            PairMode::CombinedDomain => "combined-domain",
            PairMode::CrossSourceAnchorsOnly => "cross-source-anchors",
            PairMode::CrossTargetAnchorsOnly => "cross-target-anchors",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub domain: Domain,
    pub index: usize,
}

/// Per-anchor positive and candidate sets for one pair of batches.
///
/// Anchors whose positive set is empty stay in the list and contribute a
/// zero loss. Target samples that did not survive confidence filtering
/// appear nowhere: not as anchors, not as candidates.
#[derive(Debug, Clone)]
pub struct PairSelection {
    pub mode: PairMode,
    pub anchors: Vec<SampleRef>,
    /// Parallel to `anchors`.
    pub positives: Vec<Vec<SampleRef>>,
    /// Parallel to `anchors`; superset of the positives.
    pub candidates: Vec<Vec<SampleRef>>,
    n_source: usize,
    n_target: usize,
}

impl PairSelection {
    /// Build the selection from batch labels. `target_labels` are
    /// pseudo-labels; `target_retained` marks which target samples
    /// survived confidence filtering (pass all-true when the batch was
    /// already drawn from retained samples).
    pub fn build(
        mode: PairMode,
        source_labels: &[i32],
        target_labels: &[i32],
        target_retained: &[bool],
    ) -> Result<PairSelection> {
        if source_labels.iter().any(|&y| y < 0) {
            return Err(Error::LabelsRequired("source batch in pair selection"));
        }
        if target_labels.len() != target_retained.len() {
            return Err(Error::DimensionMismatch {
                expected: target_labels.len(),
                got: target_retained.len(),
                context: "target retained mask",
            });
        }
        if target_retained
            .iter()
            .zip(target_labels)
            .any(|(&keep, &y)| keep && y < 0)
        {
            return Err(Error::MissingPseudoLabels);
        }
        let src = |i: usize| SampleRef { domain: Domain::Source, index: i };
        let tgt = |j: usize| SampleRef { domain: Domain::Target, index: j };
        let kept: Vec<usize> = (0..target_labels.len()).filter(|&j| target_retained[j]).collect();

        let mut anchors = Vec::new();
        let mut positives = Vec::new();
        let mut candidates = Vec::new();

        let source_anchors = !matches!(mode, PairMode::CrossTargetAnchorsOnly);
        let target_anchors = !matches!(mode, PairMode::CrossSourceAnchorsOnly);

        if source_anchors {
            for (i, &y) in source_labels.iter().enumerate() {
                let mut pos = Vec::new();
                let mut cand = Vec::new();
                match mode {
                    PairMode::CrossDomain | PairMode::CrossSourceAnchorsOnly => {
                        for &j in &kept {
                            cand.push(tgt(j));
                            if target_labels[j] == y {
                                pos.push(tgt(j));
                            }
                        }
                    }
                    PairMode::InDomain => {
                        for (k, &yk) in source_labels.iter().enumerate() {
                            if k == i {
                                continue;
                            }
                            cand.push(src(k));
                            if yk == y {
                                pos.push(src(k));
                            }
                        }
                    }
                    PairMode::CombinedDomain => {
                        for (k, &yk) in source_labels.iter().enumerate() {
                            if k == i {
                                continue;
                            }
                            cand.push(src(k));
                            if yk == y {
                                pos.push(src(k));
                            }
                        }
                        for &j in &kept {
                            cand.push(tgt(j));
                            if target_labels[j] == y {
                                pos.push(tgt(j));
                            }
                        }
                    }
                    PairMode::CrossTargetAnchorsOnly => unreachable!(),
                }
                anchors.push(src(i));
                positives.push(pos);
                candidates.push(cand);
            }
        }

        if target_anchors {
            for &j in &kept {
                let y = target_labels[j];
                let mut pos = Vec::new();
                let mut cand = Vec::new();
                match mode {
                    PairMode::CrossDomain | PairMode::CrossTargetAnchorsOnly => {
                        for (i, &yi) in source_labels.iter().enumerate() {
                            cand.push(src(i));
                            if yi == y {
                                pos.push(src(i));
                            }
                        }
                    }
                    PairMode::InDomain => {
                        for &k in &kept {
                            if k == j {
                                continue;
                            }
                            cand.push(tgt(k));
                            if target_labels[k] == y {
                                pos.push(tgt(k));
                            }
                        }
                    }
                    PairMode::CombinedDomain => {
                        for (i, &yi) in source_labels.iter().enumerate() {
                            cand.push(src(i));
                            if yi == y {
                                pos.push(src(i));
                            }
                        }
                        for &k in &kept {
                            if k == j {
                                continue;
                            }
                            cand.push(tgt(k));
                            if target_labels[k] == y {
                                pos.push(tgt(k));
                            }
                        }
                    }
                    PairMode::CrossSourceAnchorsOnly => unreachable!(),
                }
                anchors.push(tgt(j));
                positives.push(pos);
                candidates.push(cand);
            }
        }

        Ok(PairSelection {
            mode,
            anchors,
            positives,
            candidates,
            n_source: source_labels.len(),
            n_target: target_labels.len(),
        })
    }
}

/// One objective evaluation, split into its components.
/// total = ce + lambda * (cdc_source + cdc_target).
#[derive(Debug, Clone, Serialize)]
pub struct LossValue {
    pub total: f64,
    pub ce: f64,
    pub cdc_source: f64,
    pub cdc_target: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::TemperatureNonPositive(tau));
    }
    Ok(())
}

/// InfoNCE over one anchor embedding and explicit positive/negative
/// embeddings. Each positive contributes -log of its probability against
/// itself plus all negatives (other positives stay out of the ratio):
/// sum over positives, no averaging.
pub fn info_nce(
    anchor: &[f64],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    if positives.is_empty() {
        return Err(Error::EmptyPositives);
    }
    for v in positives.iter().chain(negatives) {
        if v.len() != anchor.len() {
            return Err(Error::DimensionMismatch {
                expected: anchor.len(),
                got: v.len(),
                context: "info_nce embedding",
            });
        }
    }
    let mut sims = Vec::with_capacity(positives.len() + negatives.len());
    for v in positives.iter().chain(negatives) {
        sims.push(dot(anchor, v));
    }
    let mut tape = Tape::new();
    let s = tape.leaf(Matrix::row_vector(&sims));
    let node = tape.info_nce_pairs(s, positives.len(), tau);
    Ok(tape.scalar(node))
}

/// Contrastive loss for one anchor. `candidates` rows are the full
/// comparison set; `positive_indices` selects the rows sharing the
/// anchor's class. The log-denominator runs over every candidate;
/// the positive log-ratios are averaged. Empty positive set gives 0.
pub fn cdc_anchor_loss(
    anchor: &[f64],
    candidates: &Matrix,
    positive_indices: &[usize],
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    if candidates.cols != anchor.len() {
        return Err(Error::DimensionMismatch {
            expected: anchor.len(),
            got: candidates.cols,
            context: "cdc candidate embedding",
        });
    }
    if positive_indices.is_empty() {
        return Ok(0.0);
    }
    for &p in positive_indices {
        if p >= candidates.rows {
            return Err(Error::DimensionMismatch {
                expected: candidates.rows,
                got: p,
                context: "cdc positive index",
            });
        }
    }
    let sims: Vec<f64> = (0..candidates.rows).map(|r| dot(anchor, candidates.row(r))).collect();
    let n = sims.len();
    let mut pos = vec![false; n];
    for &p in positive_indices {
        pos[p] = true;
    }
    let mut tape = Tape::new();
    let s = tape.leaf(Matrix::from_vec(1, n, sims));
    let node = tape.contrastive_anchors(s, pos, vec![true; n], tau);
    Ok(tape.scalar(node))
}

/// Mean cross-entropy of logits against integer labels.
pub fn cross_entropy(logits: &Matrix, labels: &[i32]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("cross_entropy labels"));
    }
    if logits.rows != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: logits.rows,
            got: labels.len(),
            context: "cross_entropy labels per row",
        });
    }
    let mut idx = Vec::with_capacity(labels.len());
    for &y in labels {
        if y < 0 || y as usize >= logits.cols {
            return Err(Error::LabelOutOfRange {
                label: y as i64,
                classes: logits.cols,
            });
        }
        idx.push(y as usize);
    }
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let node = tape.cross_entropy_mean(l, idx);
    Ok(tape.scalar(node))
}

/// Column index of a sample ref inside the candidate block for a mode.
/// In-domain and cross-domain blocks are single-domain; combined blocks
/// lay source columns first.
fn block_col(mode: PairMode, anchor_domain: Domain, r: SampleRef, n_source: usize) -> usize {
    match mode {
        PairMode::CombinedDomain => match r.domain {
            Domain::Source => r.index,
            Domain::Target => n_source + r.index,
        },
        PairMode::InDomain => r.index,
        _ => {
            debug_assert_ne!(r.domain, anchor_domain);
            r.index
        }
    }
}

/// Similarity block for the anchors of one domain on the tape.
fn anchor_block(
    tape: &mut Tape,
    zs: NodeId,
    zt: NodeId,
    mode: PairMode,
    anchor_domain: Domain,
) -> NodeId {
    let own = match anchor_domain {
        Domain::Source => zs,
        Domain::Target => zt,
    };
    let other = match anchor_domain {
        Domain::Source => zt,
        Domain::Target => zs,
    };
    match mode {
        PairMode::CrossDomain | PairMode::CrossSourceAnchorsOnly | PairMode::CrossTargetAnchorsOnly => {
            tape.matmul_nt(own, other)
        }
        PairMode::InDomain => tape.matmul_nt(own, own),
        PairMode::CombinedDomain => {
            let ss = tape.matmul_nt(own, zs);
            let st = tape.matmul_nt(own, zt);
            tape.concat_cols(ss, st)
        }
    }
}

/// Build the per-domain CDC loss nodes for a pair selection. Returns
/// (source-anchor sum, target-anchor sum); a side with no anchors is a
/// constant zero.
pub fn cdc_on_tape(
    tape: &mut Tape,
    zs: NodeId,
    zt: NodeId,
    selection: &PairSelection,
    tau: f64,
) -> Result<(NodeId, NodeId)> {
    check_tau(tau)?;
    let (ns, nt) = (tape.value(zs).rows, tape.value(zt).rows);
    if ns != selection.n_source || nt != selection.n_target {
        return Err(Error::DimensionMismatch {
            expected: selection.n_source,
            got: ns,
            context: "pair selection batch size",
        });
    }
    let mut out = Vec::with_capacity(2);
    for anchor_domain in [Domain::Source, Domain::Target] {
        let rows = match anchor_domain {
            Domain::Source => ns,
            Domain::Target => nt,
        };
        let has_anchors = selection.anchors.iter().any(|a| a.domain == anchor_domain);
        if !has_anchors || rows == 0 {
            out.push(tape.scalar_leaf(0.0));
            continue;
        }
        let sims = anchor_block(tape, zs, zt, selection.mode, anchor_domain);
        let cols = tape.value(sims).cols;
        let mut pos = vec![false; rows * cols];
        let mut valid = vec![false; rows * cols];
        for (a, anchor) in selection.anchors.iter().enumerate() {
            if anchor.domain != anchor_domain {
                continue;
            }
            let r = anchor.index;
            for &c in &selection.candidates[a] {
                valid[r * cols + block_col(selection.mode, anchor_domain, c, ns)] = true;
            }
            for &p in &selection.positives[a] {
                pos[r * cols + block_col(selection.mode, anchor_domain, p, ns)] = true;
            }
        }
        out.push(tape.contrastive_anchors(sims, pos, valid, tau));
    }
    Ok((out[0], out[1]))
}

/// Bidirectional CDC loss over two encoded batches: sum of the per-anchor
/// terms for source anchors and for target anchors, reported separately.
pub fn cdc_bidirectional(
    source: &FeatureBatch,
    target: &FeatureBatch,
    selection: &PairSelection,
    tau: f64,
) -> Result<(f64, f64)> {
    if source.z.rows == 0 {
        return Err(Error::EmptyInput("source batch"));
    }
    if target.z.rows == 0 {
        return Err(Error::EmptyInput("target batch"));
    }
    let mut tape = Tape::new();
    let zs = tape.leaf(source.z.clone());
    let zt = tape.leaf(target.z.clone());
    let (s, t) = cdc_on_tape(&mut tape, zs, zt, selection, tau)?;
    Ok((tape.scalar(s), tape.scalar(t)))
}

/// Full adaptation objective: source cross-entropy plus
/// lambda * bidirectional CDC.
pub fn uda_objective(
    model: &Model,
    source: &FeatureBatch,
    target: &FeatureBatch,
    selection: &PairSelection,
    tau: f64,
    lambda: f64,
) -> Result<LossValue> {
    let logits = model.classify(&source.raw)?;
    let ce = cross_entropy(&logits, &source.labels)?;
    let (cdc_source, cdc_target) = cdc_bidirectional(source, target, selection, tau)?;
    Ok(LossValue {
        total: ce + lambda * (cdc_source + cdc_target),
        ce,
        cdc_source,
        cdc_target,
    })
}

/// Source-free contrastive loss: mean cross-entropy of z * W^T / tau
/// against the pseudo-labels, with the frozen unit-norm classifier rows
/// acting as class prototypes.
pub fn sdf_cdc_loss(model: &Model, target: &FeatureBatch, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if !model.classifier_frozen {
        return Err(Error::NotPrepared);
    }
    if target.labels.is_empty() || target.labels.iter().any(|&y| y < 0) {
        return Err(Error::MissingPseudoLabels);
    }
    let sims = target.z.matmul_nt(&model.classifier_w);
    let mut scaled = sims.clone();
    for v in scaled.as_mut_slice() {
        *v /= tau;
    }
    cross_entropy(&scaled, &target.labels)
}
