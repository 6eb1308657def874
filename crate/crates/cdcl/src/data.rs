//! Synthetic domain-shift benchmarks, dataset file formats, splits, and
//! batch sampling.
//!
//! A benchmark pair is a Gaussian mixture (class centers equally spaced
//! on a circle in the first two input dimensions) observed twice: the
//! source domain directly, the target domain through a rigid transform
//! (rotation in the first two dimensions plus a translation). Target
//! samples are fresh draws, not transformed copies of the source ones.
//!
//! Text formats, all line-oriented:
//!   dataset    `CDCL-DS v1 N D M DOMAIN` then N lines `label f_1 .. f_D`
//!   labels     `CDCL-LBL v1 N M` then N lines of integers
//! Floats are written with enough digits to round-trip f64 exactly.
//! A label of -1 marks an unlabeled sample.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::Domain;
use crate::numerics::Matrix;

pub const SENTINEL_UNLABELED: i32 = -1;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Matrix,
    /// Per-row class, or -1 when unknown.
    pub labels: Vec<i32>,
    pub classes: usize,
    pub domain: Domain,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.rows
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows == 0
    }

    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty() && self.labels.iter().all(|&y| y >= 0)
    }

    /// New dataset holding the given rows, in order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        select_rows(self, idx)
    }
}

/// Parameters of one synthetic source/target benchmark pair.
#[derive(Debug, Clone)]
pub struct ShiftConfig {
    pub classes: usize,
    pub input_dim: usize,
    pub per_class_count: usize,
    /// Circle radius for the class centers.
    pub class_center_radius: f64,
    /// Isotropic standard deviation of each class cluster.
    pub cluster_stddev: f64,
    /// Target-domain rotation in the first two dimensions, radians.
    pub rotation_angle: f64,
    /// Target-domain translation: one entry per dimension, a single
    /// entry broadcast to all dimensions, or empty for none.
    pub translation: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct GeneratedPair {
    pub source: Dataset,
    /// Target features with every label set to -1.
    pub target: Dataset,
    /// The labels the target samples were drawn with.
    pub target_truth: Vec<i32>,
}

fn class_center(cfg: &ShiftConfig, m: usize) -> Vec<f64> {
    let angle = 2.0 * std::f64::consts::PI * m as f64 / cfg.classes as f64;
    let mut c = vec![0.0; cfg.input_dim];
    c[0] = cfg.class_center_radius * angle.cos();
    c[1] = cfg.class_center_radius * angle.sin();
    c
}

fn draw_mixture(cfg: &ShiftConfig, rng: &mut ChaCha8Rng) -> (Matrix, Vec<i32>) {
    let n = cfg.classes * cfg.per_class_count;
    let mut x = Matrix::zeros(n, cfg.input_dim);
    let mut y = Vec::with_capacity(n);
    let mut r = 0;
    for m in 0..cfg.classes {
        let center = class_center(cfg, m);
        for _ in 0..cfg.per_class_count {
            for (o, &c) in x.row_mut(r).iter_mut().zip(&center) {
                let e: f64 = rng.sample(StandardNormal);
                *o = c + cfg.cluster_stddev * e;
            }
            y.push(m as i32);
            r += 1;
        }
    }
    (x, y)
}

fn resolved_translation(cfg: &ShiftConfig) -> Result<Vec<f64>> {
    match cfg.translation.len() {
        0 => Ok(vec![0.0; cfg.input_dim]),
        1 => Ok(vec![cfg.translation[0]; cfg.input_dim]),
        d if d == cfg.input_dim => Ok(cfg.translation.clone()),
        d => Err(Error::InvalidConfig(format!(
            "translation has {d} entries; expected 1, {}, or none",
            cfg.input_dim
        ))),
    }
}

/// Rotate the first two coordinates and translate, in place.
fn apply_shift(x: &mut Matrix, angle: f64, translation: &[f64]) {
    let (c, s) = (angle.cos(), angle.sin());
    for r in 0..x.rows {
        let row = x.row_mut(r);
        let (a, b) = (row[0], row[1]);
        row[0] = c * a - s * b;
        row[1] = s * a + c * b;
        for (v, &t) in row.iter_mut().zip(translation) {
            *v += t;
        }
    }
}

/// Generate a source/target pair. The raw draws depend only on the seed
/// and the mixture shape, never on the shift, so two configs differing
/// only in rotation or translation produce targets related by exactly
/// that rigid transform.
pub fn generate_shifted_pair(cfg: &ShiftConfig) -> Result<GeneratedPair> {
    if cfg.classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 classes, got {}",
            cfg.classes
        )));
    }
    if cfg.input_dim < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 input dimensions, got {}",
            cfg.input_dim
        )));
    }
    if cfg.per_class_count == 0 {
        return Err(Error::InvalidConfig("per_class_count must be positive".into()));
    }
    if !(cfg.cluster_stddev > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "cluster_stddev must be positive, got {}",
            cfg.cluster_stddev
        )));
    }
    let translation = resolved_translation(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (sx, sy) = draw_mixture(cfg, &mut rng);
    let (mut tx, ty) = draw_mixture(cfg, &mut rng);
    apply_shift(&mut tx, cfg.rotation_angle, &translation);
    Ok(GeneratedPair {
        source: Dataset {
            features: sx,
            labels: sy,
            classes: cfg.classes,
            domain: Domain::Source,
        },
        target: Dataset {
            features: tx,
            labels: vec![SENTINEL_UNLABELED; ty.len()],
            classes: cfg.classes,
            domain: Domain::Target,
        },
        target_truth: ty,
    })
}

// ------------------------------------------------------------------
// file formats

fn write_file(path: &Path, content: String) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(content.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if !ds.features.all_finite() {
        return Err(Error::NonFinite(format!("dataset for {}", path.display())));
    }
    let mut out = String::new();
    out.push_str(&format!(
        "CDCL-DS v1 {} {} {} {}\n",
        ds.len(),
        ds.features.cols,
        ds.classes,
        ds.domain
    ));
    for r in 0..ds.len() {
        out.push_str(&ds.labels[r].to_string());
        for v in ds.features.row(r) {
            out.push_str(&format!(" {v:.16e}"));
        }
        out.push('\n');
    }
    write_file(path, out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(path, 1, "empty file"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 6 || parts[0] != "CDCL-DS" || parts[1] != "v1" {
        return Err(Error::format(path, 1, "expected header 'CDCL-DS v1 N D M DOMAIN'"));
    }
    let n: usize = parts[2]
        .parse()
        .map_err(|_| Error::format(path, 1, "bad sample count"))?;
    let dim: usize = parts[3]
        .parse()
        .map_err(|_| Error::format(path, 1, "bad dimension"))?;
    let classes: usize = parts[4]
        .parse()
        .map_err(|_| Error::format(path, 1, "bad class count"))?;
    let domain = Domain::parse(parts[5]).map_err(|_| {
        Error::format(path, 1, format!("bad domain '{}'", parts[5]))
    })?;
    let mut features = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| Error::format(path, r + 2, "unexpected end of file"))?;
        let lineno = idx + 1;
        let mut fields = line.split_whitespace();
        let label: i32 = fields
            .next()
            .ok_or_else(|| Error::format(path, lineno, "missing label"))?
            .parse()
            .map_err(|_| Error::format(path, lineno, "bad label"))?;
        if label < SENTINEL_UNLABELED || label as i64 >= classes as i64 {
            return Err(Error::format(
                path,
                lineno,
                format!("label {label} out of range for {classes} classes"),
            ));
        }
        labels.push(label);
        let row = features.row_mut(r);
        for c in 0..dim {
            let v: f64 = fields
                .next()
                .ok_or_else(|| Error::format(path, lineno, format!("expected {dim} features")))?
                .parse()
                .map_err(|_| Error::format(path, lineno, "bad feature value"))?;
            if !v.is_finite() {
                return Err(Error::format(path, lineno, "non-finite feature value"));
            }
            row[c] = v;
        }
        if fields.next().is_some() {
            return Err(Error::format(path, lineno, format!("expected {dim} features")));
        }
    }
    Ok(Dataset {
        features,
        labels,
        classes,
        domain,
    })
}

pub fn save_labels(labels: &[i32], classes: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("CDCL-LBL v1 {} {}\n", labels.len(), classes);
    for y in labels {
        out.push_str(&y.to_string());
        out.push('\n');
    }
    write_file(path, out)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<(Vec<i32>, usize)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, 1, "empty file"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "CDCL-LBL" || parts[1] != "v1" {
        return Err(Error::format(path, 1, "expected header 'CDCL-LBL v1 N M'"));
    }
    let n: usize = parts[2]
        .parse()
        .map_err(|_| Error::format(path, 1, "bad label count"))?;
    let classes: usize = parts[3]
        .parse()
        .map_err(|_| Error::format(path, 1, "bad class count"))?;
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let lineno = r + 2;
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, lineno, "unexpected end of file"))?;
        let y: i32 = line
            .trim()
            .parse()
            .map_err(|_| Error::format(path, lineno, "bad label"))?;
        if y < SENTINEL_UNLABELED || y as i64 >= classes as i64 {
            return Err(Error::format(
                path,
                lineno,
                format!("label {y} out of range for {classes} classes"),
            ));
        }
        labels.push(y);
    }
    Ok((labels, classes))
}

/// One row of the embeddings export.
#[derive(Debug, Clone)]
pub struct EmbeddingRow {
    pub id: usize,
    pub domain: Domain,
    /// Ground-truth label if known, else -1.
    pub label: i32,
    /// Assigned pseudo-label if any, else -1.
    pub pseudo_label: i32,
    pub confidence: f64,
    pub z: Vec<f64>,
}

/// Tab-separated embeddings with a header row, for external analysis.
pub fn write_embeddings_tsv(path: impl AsRef<Path>, rows: &[EmbeddingRow]) -> Result<()> {
    let path = path.as_ref();
    if rows.is_empty() {
        return Err(Error::EmptyInput("embedding rows"));
    }
    let dim = rows[0].z.len();
    let mut out = String::from("id\tdomain\tlabel\tpseudo_label\tconfidence");
    for c in 0..dim {
        out.push_str(&format!("\tz_{}", c + 1));
    }
    out.push('\n');
    for row in rows {
        if row.z.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: row.z.len(),
                context: "embedding row width",
            });
        }
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.16e}",
            row.id, row.domain, row.label, row.pseudo_label, row.confidence
        ));
        for v in &row.z {
            out.push_str(&format!("\t{v:.16e}"));
        }
        out.push('\n');
    }
    write_file(path, out)
}

// ------------------------------------------------------------------
// splitting and sampling

fn select_rows(ds: &Dataset, idx: &[usize]) -> Dataset {
    let mut features = Matrix::zeros(idx.len(), ds.features.cols);
    let mut labels = Vec::with_capacity(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        features.row_mut(r).copy_from_slice(ds.features.row(i));
        labels.push(ds.labels[i]);
    }
    Dataset {
        features,
        labels,
        classes: ds.classes,
        domain: ds.domain,
    }
}

/// Split a dataset by a seeded shuffle. The train side gets
/// `round(ratio * n)` samples, clamped so both sides stay nonempty.
pub fn split_train_val(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidRatio(ratio));
    }
    let n = ds.len();
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "cannot split a dataset of {n} samples"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    Ok((
        select_rows(ds, &order[..n_train]),
        select_rows(ds, &order[n_train..]),
    ))
}

/// Endless minibatch stream over a fixed index set: each epoch is a fresh
/// seeded shuffle visited without replacement.
#[derive(Debug)]
pub struct BatchSampler {
    indices: Vec<usize>,
    batch_size: usize,
    drop_last: bool,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(indices: Vec<usize>, batch_size: usize, drop_last: bool, seed: u64) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("sampler indices"));
        }
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if drop_last && indices.len() < batch_size {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} exceeds the {} available samples",
                batch_size,
                indices.len()
            )));
        }
        let mut s = BatchSampler {
            indices,
            batch_size,
            drop_last,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        Ok(s)
    }

    pub fn over_all(n: usize, batch_size: usize, drop_last: bool, seed: u64) -> Result<Self> {
        Self::new((0..n).collect(), batch_size, drop_last, seed)
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn reshuffle(&mut self) {
        self.order = self.indices.clone();
        let n = self.order.len();
        for i in (1..n).rev() {
            let j = self.rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.cursor = 0;
    }

    fn remaining(&self) -> usize {
        self.order.len() - self.cursor
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.remaining() == 0 || (self.drop_last && self.remaining() < self.batch_size) {
            self.epoch += 1;
            self.reshuffle();
        }
        let take = self.batch_size.min(self.remaining());
        let batch = self.order[self.cursor..self.cursor + take].to_vec();
        self.cursor += take;
        batch
    }
}
