//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records eagerly-evaluated operations; [`Tape::backward`] walks
//! the record in reverse and accumulates exact gradients for every node.
//! The op set is exactly what the encoder and the training objectives need:
//! affine maps, activations, batch normalization (batch statistics in Train
//! mode, running statistics in Eval mode), row-wise L2 normalization, and
//! the softmax-style loss reductions.
//!
//! Scalars are represented as 1x1 matrices.

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, norm2, Matrix, ZERO_NORM_EPS};

/// Epsilon added to variances before taking the inverse square root.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Batch statistics produced by a Train-mode batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    /// a (n,k) * b (k,m)
    MatMul(NodeId, NodeId),
    /// a (n,k) * b^T with b (m,k)
    MatMulNt(NodeId, NodeId),
    /// x (r,c) + row-broadcast b (1,c)
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    /// Rows scaled to unit L2 norm; saved pre-normalization norms.
    NormalizeRows(NodeId, Vec<f64>),
    /// Per-column batch statistics; xhat saved for backward.
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        var: Vec<f64>,
        xhat: Matrix,
    },
    /// Per-column affine using fixed (running) statistics.
    BatchNormEval {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    GatherRows(NodeId, Vec<usize>),
    ConcatCols(NodeId, NodeId),
    /// Mean over rows of -log softmax(logits)[label].
    CrossEntropyMean { logits: NodeId, labels: Vec<usize> },
    /// One anchor row of similarities: first `n_pos` entries are positives,
    /// the rest negatives. Each positive is scored against itself plus all
    /// negatives.
    InfoNcePairs {
        sims: NodeId,
        n_pos: usize,
        tau: f64,
    },
    /// Per-anchor contrastive terms over a similarity matrix. For each row
    /// with a nonempty positive set the denominator runs over every valid
    /// candidate, positives included; rows without positives contribute 0.
    ContrastiveAnchors {
        sims: NodeId,
        pos: Vec<bool>,
        valid: Vec<bool>,
        tau: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients of one scalar root with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient w.r.t. the node, or None when the root does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!((v.rows, v.cols), (1, 1), "node is not a scalar");
        v.get(0, 0)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> NodeId {
        self.leaf(Matrix::from_vec(1, 1, vec![value]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(bv.rows, 1);
        assert_eq!(xv.cols, bv.cols);
        let mut v = xv.clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            for (o, &add) in row.iter_mut().zip(bv.row(0)) {
                *o += add;
            }
        }
        self.push(v, Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols));
        let mut v = av.clone();
        for (o, &x) in v.as_mut_slice().iter_mut().zip(bv.iter()) {
            *o += x;
        }
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.value(a).clone();
        for o in v.as_mut_slice() {
            *o *= c;
        }
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for o in v.as_mut_slice() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for o in v.as_mut_slice() {
            *o = o.tanh();
        }
        self.push(v, Op::Tanh(a))
    }

    /// Scale every row to unit L2 norm. Errors if any row norm is ~zero.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let mut v = av.clone();
        let mut norms = Vec::with_capacity(av.rows);
        for r in 0..v.rows {
            let n = norm2(v.row(r));
            if n <= ZERO_NORM_EPS {
                return Err(Error::ZeroVector { norm: n });
            }
            for o in v.row_mut(r) {
                *o /= n;
            }
            norms.push(n);
        }
        Ok(self.push(v, Op::NormalizeRows(a, norms)))
    }

    /// Batch-norm forward using the batch's own per-column statistics.
    /// Returns the output node plus the batch statistics so the caller can
    /// fold them into running estimates.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> (NodeId, BatchStats) {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        assert!(rows > 0);
        assert_eq!(self.value(gamma).cols, cols);
        assert_eq!(self.value(beta).cols, cols);
        let mut mean = vec![0.0; cols];
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for (j, &v) in xv.row(r).iter().enumerate() {
                mean[j] += v;
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        for r in 0..rows {
            for (j, &v) in xv.row(r).iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= rows as f64;
        }
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let gv = self.value(gamma).row(0).to_vec();
        let bv = self.value(beta).row(0).to_vec();
        for r in 0..rows {
            for j in 0..cols {
                let inv = 1.0 / (var[j] + BN_EPS).sqrt();
                let h = (self.value(x).get(r, j) - mean[j]) * inv;
                xhat.set(r, j, h);
                out.set(r, j, gv[j] * h + bv[j]);
            }
        }
        let stats = BatchStats {
            mean,
            var: var.clone(),
        };
        let id = self.push(out, Op::BatchNormTrain { x, gamma, beta, var, xhat });
        (id, stats)
    }

    /// Batch-norm forward using fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
    ) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        assert_eq!(mean.len(), cols);
        assert_eq!(var.len(), cols);
        let gv = self.value(gamma).row(0).to_vec();
        let bv = self.value(beta).row(0).to_vec();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for j in 0..cols {
                let inv = 1.0 / (var[j] + BN_EPS).sqrt();
                out.set(r, j, gv[j] * (xv.get(r, j) - mean[j]) * inv + bv[j]);
            }
        }
        self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                var: var.to_vec(),
            },
        )
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let av = self.value(a);
        let mut out = Matrix::zeros(indices.len(), av.cols);
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        self.push(out, Op::GatherRows(a, indices))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows);
        let mut out = Matrix::zeros(av.rows, av.cols + bv.cols);
        for r in 0..av.rows {
            out.row_mut(r)[..av.cols].copy_from_slice(av.row(r));
            out.row_mut(r)[av.cols..].copy_from_slice(bv.row(r));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    /// Mean over batch rows of `-log softmax(logits_row)[label]`.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows, labels.len());
        assert!(!labels.is_empty());
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            assert!(y < lv.cols, "label out of range");
            let row = lv.row(r);
            let lse = log_sum_exp(row).expect("nonempty row");
            total += lse - row[y];
        }
        let v = Matrix::from_vec(1, 1, vec![total / labels.len() as f64]);
        self.push(v, Op::CrossEntropyMean { logits, labels })
    }

    /// Loss over one anchor's similarity row: entries `0..n_pos` are positive
    /// similarities, the rest negative. Each positive term normalizes over
    /// itself and all negatives.
    pub fn info_nce_pairs(&mut self, sims: NodeId, n_pos: usize, tau: f64) -> NodeId {
        let sv = self.value(sims);
        assert_eq!(sv.rows, 1);
        assert!(n_pos >= 1 && n_pos <= sv.cols);
        assert!(tau > 0.0);
        let row = sv.row(0);
        let negs: Vec<f64> = row[n_pos..].iter().map(|s| s / tau).collect();
        let mut total = 0.0;
        for p in 0..n_pos {
            let sp = row[p] / tau;
            let mut set = Vec::with_capacity(1 + negs.len());
            set.push(sp);
            set.extend_from_slice(&negs);
            total += log_sum_exp(&set).expect("nonempty") - sp;
        }
        let v = Matrix::from_vec(1, 1, vec![total]);
        self.push(v, Op::InfoNcePairs { sims, n_pos, tau })
    }

    /// Sum over anchor rows of the per-anchor contrastive term. Rows whose
    /// positive set is empty contribute nothing.
    pub fn contrastive_anchors(
        &mut self,
        sims: NodeId,
        pos: Vec<bool>,
        valid: Vec<bool>,
        tau: f64,
    ) -> NodeId {
        let sv = self.value(sims);
        let (rows, cols) = (sv.rows, sv.cols);
        assert_eq!(pos.len(), rows * cols);
        assert_eq!(valid.len(), rows * cols);
        assert!(tau > 0.0);
        debug_assert!(pos.iter().zip(&valid).all(|(p, v)| !*p || *v), "positives must be valid");
        let mut total = 0.0;
        for r in 0..rows {
            let row = sv.row(r);
            let prow = &pos[r * cols..(r + 1) * cols];
            let vrow = &valid[r * cols..(r + 1) * cols];
            let n_pos = prow.iter().filter(|p| **p).count();
            if n_pos == 0 {
                continue;
            }
            let scaled: Vec<f64> = row
                .iter()
                .zip(vrow)
                .filter(|(_, v)| **v)
                .map(|(s, _)| s / tau)
                .collect();
            let lse = log_sum_exp(&scaled).expect("valid set nonempty");
            let mut pos_sum = 0.0;
            for (j, &is_pos) in prow.iter().enumerate() {
                if is_pos {
                    pos_sum += row[j] / tau;
                }
            }
            total += lse - pos_sum / n_pos as f64;
        }
        let v = Matrix::from_vec(1, 1, vec![total]);
        self.push(v, Op::ContrastiveAnchors { sims, pos, valid, tau })
    }

    /// Accumulate gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let rv = self.value(root);
        assert_eq!((rv.rows, rv.cols), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for idx in (0..=root.0).rev() {
            let gy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn add_grad(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
        match &mut grads[id.0] {
            Some(g) => {
                debug_assert_eq!((g.rows, g.cols), (delta.rows, delta.cols));
                for (o, &d) in g.as_mut_slice().iter_mut().zip(delta.iter()) {
                    *o += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn accumulate(&self, idx: usize, gy: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = gy.matmul_nt(self.value(*b));
                let db = self.value(*a).matmul_tn(gy);
                Self::add_grad(grads, *a, da);
                Self::add_grad(grads, *b, db);
            }
            Op::MatMulNt(a, b) => {
                let da = gy.matmul(self.value(*b));
                let db = gy.matmul_tn(self.value(*a));
                Self::add_grad(grads, *a, da);
                Self::add_grad(grads, *b, db);
            }
            Op::AddBias(x, b) => {
                let mut db = Matrix::zeros(1, gy.cols);
                for r in 0..gy.rows {
                    for (j, &g) in gy.row(r).iter().enumerate() {
                        db.set(0, j, db.get(0, j) + g);
                    }
                }
                Self::add_grad(grads, *x, gy.clone());
                Self::add_grad(grads, *b, db);
            }
            Op::Add(a, b) => {
                Self::add_grad(grads, *a, gy.clone());
                Self::add_grad(grads, *b, gy.clone());
            }
            Op::Scale(a, c) => {
                let mut da = gy.clone();
                for o in da.as_mut_slice() {
                    *o *= c;
                }
                Self::add_grad(grads, *a, da);
            }
            Op::Relu(a) => {
                let xv = self.value(*a);
                let mut da = gy.clone();
                for (o, &x) in da.as_mut_slice().iter_mut().zip(xv.iter()) {
                    if x <= 0.0 {
                        *o = 0.0;
                    }
                }
                Self::add_grad(grads, *a, da);
            }
            Op::Tanh(a) => {
                let yv = &self.nodes[idx].value;
                let mut da = gy.clone();
                for (o, &y) in da.as_mut_slice().iter_mut().zip(yv.iter()) {
                    *o *= 1.0 - y * y;
                }
                Self::add_grad(grads, *a, da);
            }
            Op::NormalizeRows(a, norms) => {
                let zv = &self.nodes[idx].value;
                let mut da = Matrix::zeros(zv.rows, zv.cols);
                for r in 0..zv.rows {
                    let z = zv.row(r);
                    let g = gy.row(r);
                    let zg = dot(z, g);
                    let out = da.row_mut(r);
                    for j in 0..z.len() {
                        out[j] = (g[j] - z[j] * zg) / norms[r];
                    }
                }
                Self::add_grad(grads, *a, da);
            }
            Op::BatchNormTrain { x, gamma, beta, var, xhat } => {
                let (rows, cols) = (gy.rows, gy.cols);
                let gv = self.value(*gamma).row(0).to_vec();
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                for r in 0..rows {
                    for j in 0..cols {
                        let g = gy.get(r, j);
                        dgamma.set(0, j, dgamma.get(0, j) + g * xhat.get(r, j));
                        dbeta.set(0, j, dbeta.get(0, j) + g);
                    }
                }
                // dxhat = gy * gamma;  dx restores the coupling through the
                // batch mean and variance.
                let n = rows as f64;
                let mut dx = Matrix::zeros(rows, cols);
                for j in 0..cols {
                    let inv = 1.0 / (var[j] + BN_EPS).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for r in 0..rows {
                        let dxh = gy.get(r, j) * gv[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat.get(r, j);
                    }
                    for r in 0..rows {
                        let dxh = gy.get(r, j) * gv[j];
                        let v = inv * (dxh - sum_dxhat / n - xhat.get(r, j) * sum_dxhat_xhat / n);
                        dx.set(r, j, v);
                    }
                }
                Self::add_grad(grads, *x, dx);
                Self::add_grad(grads, *gamma, dgamma);
                Self::add_grad(grads, *beta, dbeta);
            }
            Op::BatchNormEval { x, gamma, beta, mean, var } => {
                let (rows, cols) = (gy.rows, gy.cols);
                let xv = self.value(*x);
                let gv = self.value(*gamma).row(0).to_vec();
                let mut dx = Matrix::zeros(rows, cols);
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                for j in 0..cols {
                    let inv = 1.0 / (var[j] + BN_EPS).sqrt();
                    for r in 0..rows {
                        let g = gy.get(r, j);
                        let xh = (xv.get(r, j) - mean[j]) * inv;
                        dx.set(r, j, g * gv[j] * inv);
                        dgamma.set(0, j, dgamma.get(0, j) + g * xh);
                        dbeta.set(0, j, dbeta.get(0, j) + g);
                    }
                }
                Self::add_grad(grads, *x, dx);
                Self::add_grad(grads, *gamma, dgamma);
                Self::add_grad(grads, *beta, dbeta);
            }
            Op::GatherRows(a, indices) => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows, av.cols);
                for (r, &i) in indices.iter().enumerate() {
                    let src = gy.row(r);
                    let dst = da.row_mut(i);
                    for (o, &g) in dst.iter_mut().zip(src) {
                        *o += g;
                    }
                }
                Self::add_grad(grads, *a, da);
            }
            Op::ConcatCols(a, b) => {
                let ac = self.value(*a).cols;
                let bc = self.value(*b).cols;
                let mut da = Matrix::zeros(gy.rows, ac);
                let mut db = Matrix::zeros(gy.rows, bc);
                for r in 0..gy.rows {
                    da.row_mut(r).copy_from_slice(&gy.row(r)[..ac]);
                    db.row_mut(r).copy_from_slice(&gy.row(r)[ac..]);
                }
                Self::add_grad(grads, *a, da);
                Self::add_grad(grads, *b, db);
            }
            Op::CrossEntropyMean { logits, labels } => {
                let g = gy.get(0, 0);
                let lv = self.value(*logits);
                let n = labels.len() as f64;
                let mut dl = Matrix::zeros(lv.rows, lv.cols);
                for (r, &y) in labels.iter().enumerate() {
                    let row = lv.row(r);
                    let lse = log_sum_exp(row).expect("nonempty");
                    for j in 0..lv.cols {
                        let p = (row[j] - lse).exp();
                        let delta = if j == y { 1.0 } else { 0.0 };
                        dl.set(r, j, g * (p - delta) / n);
                    }
                }
                Self::add_grad(grads, *logits, dl);
            }
            Op::InfoNcePairs { sims, n_pos, tau } => {
                let g = gy.get(0, 0);
                let sv = self.value(*sims);
                let row = sv.row(0);
                let n = row.len();
                let mut ds = Matrix::zeros(1, n);
                let negs: Vec<f64> = row[*n_pos..].iter().map(|s| s / tau).collect();
                for p in 0..*n_pos {
                    let sp = row[p] / tau;
                    let mut set = Vec::with_capacity(1 + negs.len());
                    set.push(sp);
                    set.extend_from_slice(&negs);
                    let lse = log_sum_exp(&set).expect("nonempty");
                    // d/ds_p of (lse - s_p) and d/ds_k for each negative k.
                    let qp = (sp - lse).exp();
                    ds.set(0, p, ds.get(0, p) + g * (qp - 1.0) / tau);
                    for (k, &sk) in negs.iter().enumerate() {
                        let qk = (sk - lse).exp();
                        let j = *n_pos + k;
                        ds.set(0, j, ds.get(0, j) + g * qk / tau);
                    }
                }
                Self::add_grad(grads, *sims, ds);
            }
            Op::ContrastiveAnchors { sims, pos, valid, tau } => {
                let g = gy.get(0, 0);
                let sv = self.value(*sims);
                let (rows, cols) = (sv.rows, sv.cols);
                let mut ds = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let srow = sv.row(r);
                    let prow = &pos[r * cols..(r + 1) * cols];
                    let vrow = &valid[r * cols..(r + 1) * cols];
                    let n_pos = prow.iter().filter(|p| **p).count();
                    if n_pos == 0 {
                        continue;
                    }
                    let scaled: Vec<f64> = srow
                        .iter()
                        .zip(vrow)
                        .filter(|(_, v)| **v)
                        .map(|(s, _)| s / tau)
                        .collect();
                    let lse = log_sum_exp(&scaled).expect("nonempty");
                    for j in 0..cols {
                        if !vrow[j] {
                            continue;
                        }
                        let q = (srow[j] / tau - lse).exp();
                        let mut d = q / tau;
                        if prow[j] {
                            d -= 1.0 / (n_pos as f64 * tau);
                        }
                        ds.set(r, j, g * d);
                    }
                }
                Self::add_grad(grads, *sims, ds);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Matrix::from_vec(rows, cols, data)
    }

    /// Gradient-check d(scalar readout)/d(input a) for an op under a fixed
    /// random linear functional of the op output.
    fn check_unary<F>(build: F, rows: usize, cols: usize, seed: u64)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a0 = rand_matrix(&mut rng, rows, cols);
        let eval = |vals: &[f64]| -> f64 {
            let mut t = Tape::new();
            let a = t.leaf(Matrix::from_vec(rows, cols, vals.to_vec()));
            let out = build(&mut t, a);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let a = t.leaf(a0.clone());
        let out = build(&mut t, a);
        let grads = t.backward(out);
        let ga = grads.wrt(a).unwrap().as_slice().to_vec();
        let rep = finite_diff_check(eval, &ga, a0.as_slice(), 1e-6, 1e-5);
        assert!(rep.passed, "max_rel_error={} at {}", rep.max_rel_error, rep.worst_index);
    }

    fn readout(t: &mut Tape, node: NodeId, seed: u64) -> NodeId {
        // Contract the output with fixed pseudo-random weights, one per
        // entry, so every entry influences the scalar independently.
        let v = t.value(node).clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let mut acc = None;
        for i in 0..v.rows {
            let wi = t.leaf(rand_matrix(&mut rng, 1, v.cols));
            let ri = t.gather_rows(node, vec![i]);
            let s = t.matmul_nt(ri, wi);
            acc = Some(match acc {
                None => s,
                Some(a) => t.add(a, s),
            });
        }
        acc.unwrap()
    }

    #[test]
    fn grad_matmul_chain() {
        for seed in 0..5 {
            check_unary(
                |t, a| {
                    let mut rng = ChaCha8Rng::seed_from_u64(99);
                    let b = t.leaf(rand_matrix(&mut rng, 4, 3));
                    let m = t.matmul(a, b);
                    readout(t, m, seed)
                },
                3,
                4,
                seed,
            );
        }
    }

    #[test]
    fn grad_matmul_nt_both_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = rand_matrix(&mut rng, 3, 4);
        let b0 = rand_matrix(&mut rng, 5, 4);
        let build = |av: &Matrix, bv: &Matrix| -> (Tape, NodeId, NodeId, NodeId) {
            let mut t = Tape::new();
            let a = t.leaf(av.clone());
            let b = t.leaf(bv.clone());
            let m = t.matmul_nt(a, b);
            let r = readout(&mut t, m, 3);
            (t, a, b, r)
        };
        let (t, a, b, r) = build(&a0, &b0);
        let grads = t.backward(r);
        let ga = grads.wrt(a).unwrap().as_slice().to_vec();
        let gb = grads.wrt(b).unwrap().as_slice().to_vec();
        let rep_a = finite_diff_check(
            |vals| {
                let (t, _, _, r) = build(&Matrix::from_vec(3, 4, vals.to_vec()), &b0);
                t.scalar(r)
            },
            &ga,
            a0.as_slice(),
            1e-6,
            1e-5,
        );
        assert!(rep_a.passed, "a side: {}", rep_a.max_rel_error);
        let rep_b = finite_diff_check(
            |vals| {
                let (t, _, _, r) = build(&a0, &Matrix::from_vec(5, 4, vals.to_vec()));
                t.scalar(r)
            },
            &gb,
            b0.as_slice(),
            1e-6,
            1e-5,
        );
        assert!(rep_b.passed, "b side: {}", rep_b.max_rel_error);
    }

    #[test]
    fn grad_activations_and_normalize() {
        for seed in 0..5 {
            check_unary(
                |t, a| {
                    let h = t.tanh(a);
                    let z = t.normalize_rows(h).unwrap();
                    readout(t, z, seed)
                },
                4,
                3,
                seed,
            );
            // ReLU at random (non-kink) points.
            check_unary(
                |t, a| {
                    let h = t.relu(a);
                    readout(t, h, seed)
                },
                4,
                3,
                seed + 100,
            );
        }
    }

    #[test]
    fn grad_batch_norm_train_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x0 = rand_matrix(&mut rng, 6, 3);
        let g0 = rand_matrix(&mut rng, 1, 3);
        let b0 = rand_matrix(&mut rng, 1, 3);
        let build = |xv: &Matrix, gv: &Matrix, bv: &Matrix| {
            let mut t = Tape::new();
            let x = t.leaf(xv.clone());
            let g = t.leaf(gv.clone());
            let b = t.leaf(bv.clone());
            let (y, _) = t.batch_norm_train(x, g, b);
            let r = readout(&mut t, y, 11);
            (t, x, g, b, r)
        };
        let (t, x, g, b, r) = build(&x0, &g0, &b0);
        let grads = t.backward(r);
        for (name, node, val, rows, cols) in [
            ("x", x, &x0, 6, 3),
            ("gamma", g, &g0, 1, 3),
            ("beta", b, &b0, 1, 3),
        ] {
            let analytic = grads.wrt(node).unwrap().as_slice().to_vec();
            let rep = finite_diff_check(
                |vals| {
                    let m = Matrix::from_vec(rows, cols, vals.to_vec());
                    let (t, _, _, _, r) = match name {
                        "x" => build(&m, &g0, &b0),
                        "gamma" => build(&x0, &m, &b0),
                        _ => build(&x0, &g0, &m),
                    };
                    t.scalar(r)
                },
                &analytic,
                val.as_slice(),
                1e-6,
                1e-5,
            );
            assert!(rep.passed, "{name}: {}", rep.max_rel_error);
        }
    }

    #[test]
    fn grad_batch_norm_eval() {
        let mean = vec![0.3, -0.2, 0.1];
        let var = vec![1.2, 0.8, 2.0];
        for seed in 0..3 {
            check_unary(
                |t, a| {
                    let g = t.leaf(Matrix::from_vec(1, 3, vec![1.1, 0.9, 1.3]));
                    let b = t.leaf(Matrix::from_vec(1, 3, vec![0.1, -0.2, 0.0]));
                    let y = t.batch_norm_eval(a, g, b, &mean, &var);
                    readout(t, y, seed)
                },
                5,
                3,
                seed,
            );
        }
    }

    #[test]
    fn grad_loss_reductions() {
        // cross entropy
        check_unary(
            |t, a| t.cross_entropy_mean(a, vec![0, 2, 1, 2]),
            4,
            3,
            5,
        );
        // info-nce pair row: 2 positives, 3 negatives
        check_unary(|t, a| t.info_nce_pairs(a, 2, 0.31), 1, 5, 6);
        // contrastive anchors with one empty-positive row
        check_unary(
            |t, a| {
                let pos = vec![
                    true, false, false, true, //
                    false, false, false, false, //
                    false, true, false, false,
                ];
                let valid = vec![
                    true, true, true, true, //
                    true, true, false, true, //
                    true, true, true, false,
                ];
                t.contrastive_anchors(a, pos, valid, 0.42)
            },
            3,
            4,
            7,
        );
    }

    #[test]
    fn grad_gather_and_concat() {
        for seed in 0..3 {
            check_unary(
                |t, a| {
                    let g = t.gather_rows(a, vec![2, 0, 2, 1]);
                    readout(t, g, seed)
                },
                3,
                4,
                seed,
            );
            check_unary(
                |t, a| {
                    let mut rng = ChaCha8Rng::seed_from_u64(4);
                    let b = t.leaf(rand_matrix(&mut rng, 3, 2));
                    let c = t.concat_cols(a, b);
                    readout(t, c, seed)
                },
                3,
                4,
                seed + 50,
            );
        }
    }

    #[test]
    fn backward_ignores_unreachable_nodes() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::from_vec(1, 2, vec![1.0, 2.0]));
        let unused = t.leaf(Matrix::from_vec(1, 2, vec![3.0, 4.0]));
        let s = t.info_nce_pairs(a, 1, 1.0);
        let grads = t.backward(s);
        assert!(grads.wrt(unused).is_none());
        assert!(grads.wrt(a).is_some());
    }
}
