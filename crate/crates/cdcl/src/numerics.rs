//! Dense row-major matrices, stable reductions, and a finite-difference
//! gradient checker.
//!
//! Everything here is pure and allocation-happy on purpose: batches and
//! parameter counts stay small (a few thousand entries), so clarity wins
//! over BLAS tricks.

use crate::error::{Error, Result};

/// Norms below this are treated as zero when normalizing.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Floor for the relative-error denominator in gradient checking.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape/data mismatch");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    /// Single-row matrix wrapping a vector.
    pub fn row_vector(v: &[f64]) -> Self {
        Matrix::from_vec(1, v.len(), v.to_vec())
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// `self * other`, shapes `(n,k) x (k,m) -> (n,m)`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`, shapes `(n,k) x (m,k) -> (n,m)`.
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_nt shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                out.set(i, j, dot(arow, other.row(j)));
            }
        }
        out
    }

    /// `self^T * other`, shapes `(k,n) x (k,m) -> (n,m)`.
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_tn shape mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scale `v` to unit Euclidean length.
///
/// Fails with `ZeroVector` when the norm is at or below [`ZERO_NORM_EPS`].
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm2(v);
    if n <= ZERO_NORM_EPS {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `log(sum(exp(xs)))` with max-subtraction so large inputs do not overflow.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("log_sum_exp"));
    }
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Ok(m);
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    Ok(m + s.ln())
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Compare `analytic_grad` against central differences of `f` at `point`.
///
/// Per-coordinate relative error uses `max(|analytic|, |numeric|, 1e-8)` as
/// the denominator; the report passes iff the worst error is below `tol`.
pub fn finite_diff_check<F>(
    f: F,
    analytic_grad: &[f64],
    point: &[f64],
    h: f64,
    tol: f64,
) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(analytic_grad.len(), point.len());
    let mut max_rel_error = 0.0_f64;
    let mut worst_index = 0;
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic_grad[i];
        let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_error,
        worst_index,
        passed: max_rel_error < tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_pythagorean() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15);
        assert!((v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_symmetric() {
        let v = l2_normalize(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        for x in v {
            assert!((x - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_zero_vector_errors() {
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn lse_two_zeros_is_ln2() {
        let v = log_sum_exp(&[0.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn lse_survives_large_inputs() {
        let v = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn lse_matches_direct_evaluation() {
        // High-precision value of log(e^1 + e^2 + e^3).
        let expected = 3.407_605_964_444_380_3;
        let v = log_sum_exp(&[1.0, 2.0, 3.0]).unwrap();
        assert!((v - expected).abs() < 1e-14);
        // Independent direct route at small magnitudes.
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((v - direct).abs() < 1e-14);
    }

    #[test]
    fn lse_empty_errors() {
        assert!(matches!(log_sum_exp(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn gradcheck_quadratic_passes() {
        let rep = finite_diff_check(|x| x[0] * x[0], &[2.0], &[1.0], 1e-5, 1e-6);
        assert!(rep.passed, "max_rel_error={}", rep.max_rel_error);
    }

    #[test]
    fn gradcheck_scaled_gradient_fails() {
        // Negative control: a 10%-off gradient must be flagged.
        let rep = finite_diff_check(|x| x[0] * x[0], &[2.2], &[1.0], 1e-5, 1e-4);
        assert!(!rep.passed);
        assert_eq!(rep.worst_index, 0);
    }

    #[test]
    fn matmul_small() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.as_slice(), &[58.0, 64.0, 139.0, 154.0]);
        let d = a.matmul_nt(&Matrix::from_vec(2, 3, vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]));
        assert_eq!(d.as_slice(), &[58.0, 64.0, 139.0, 154.0]);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(v in proptest::collection::vec(-100.0f64..100.0, 1..8)) {
            prop_assume!(norm2(&v) > 1e-6);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((norm2(&once) - 1.0).abs() < 1e-9);
            // Positively parallel: dot with the original is the original's norm.
            prop_assert!(dot(&once, &v) > 0.0);
        }

        #[test]
        fn lse_shift_invariance(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..10),
            c in -100.0f64..100.0,
        ) {
            let base = log_sum_exp(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let v = log_sum_exp(&shifted).unwrap();
            prop_assert!((v - (base + c)).abs() < 1e-10);
        }

        #[test]
        fn lse_bounds(xs in proptest::collection::vec(-50.0f64..50.0, 1..10)) {
            let v = log_sum_exp(&xs).unwrap();
            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= m - 1e-12);
            prop_assert!(v <= m + (xs.len() as f64).ln() + 1e-12);
        }
    }
}
