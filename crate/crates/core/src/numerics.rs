//! Dense row-major matrices, temperature softmax, KL divergence and a
//! central-difference gradient oracle.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Smallest probability fed to `ln` inside [`kl_divergence`].
pub const KL_PROB_FLOOR: f64 = 1e-300;

/// Deterministic generator for a `(seed, stream)` pair. ChaCha output is
/// specified independently of platform and crate version, which keeps golden
/// values stable.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Row-major dense `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure("matrix data contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. An empty slice yields `0 x 0`.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(invalid(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Appends the rows of `other` below `self`.
    pub fn append_rows(&mut self, other: &Matrix) -> Result<()> {
        if self.rows == 0 && self.data.is_empty() {
            self.cols = other.cols;
        }
        if other.cols != self.cols {
            return Err(invalid(format!(
                "cannot stack {} columns under {}",
                other.cols, self.cols
            )));
        }
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
        Ok(())
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(invalid(format!(
                "matmul shape mismatch: {:?} x {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`, the shape of an affine layer applied to a batch.
    pub fn matmul_bt(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(invalid(format!(
                "matmul_bt shape mismatch: {:?} x {:?}ᵀ",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs`
    pub fn matmul_at(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(invalid(format!(
                "matmul_at shape mismatch: {:?}ᵀ x {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let b = rhs.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(invalid(format!(
                "matvec shape mismatch: {:?} x {}",
                self.shape(),
                v.len()
            )));
        }
        Ok(self.iter_rows().map(|r| dot(r, v)).collect())
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    /// `self += k * other`
    pub fn add_scaled(&mut self, other: &Matrix, k: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(invalid(format!(
                "add shape mismatch: {:?} + {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A probability vector: entries in `[0, 1]` summing to one within `1e-12`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOLERANCE: f64 = 1e-12;

    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("probability vector is empty"));
        }
        if entries.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("probability entries must lie in [0, 1]"));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(entries))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn check_range(len: usize, range: &Range<usize>, tau: f64) -> Result<()> {
    if range.is_empty() {
        return Err(invalid("softmax over an empty class range"));
    }
    if range.end > len {
        return Err(invalid(format!(
            "class range {range:?} exceeds {len} logits"
        )));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `ln Σ_{k∈range} exp(z_k/τ)`, computed with max subtraction.
pub fn log_sum_exp_range(logits: &[f64], range: Range<usize>, tau: f64) -> Result<f64> {
    check_range(logits.len(), &range, tau)?;
    let zs = &logits[range];
    let max = zs.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z / tau));
    let sum: f64 = zs.iter().map(|&z| (z / tau - max).exp()).sum();
    let out = max + sum.ln();
    if !out.is_finite() {
        return Err(Error::NumericFailure("log-sum-exp is not finite".into()));
    }
    Ok(out)
}

/// Log-probabilities of the temperature softmax restricted to `range`.
pub fn log_softmax_range(logits: &[f64], range: Range<usize>, tau: f64) -> Result<Vec<f64>> {
    let lse = log_sum_exp_range(logits, range.clone(), tau)?;
    Ok(logits[range].iter().map(|&z| z / tau - lse).collect())
}

/// Temperature softmax using only the logits in `range`; entries outside the
/// range are never read.
pub fn softmax_range(logits: &[f64], range: Range<usize>, tau: f64) -> Result<ProbVector> {
    check_range(logits.len(), &range, tau)?;
    let zs = &logits[range];
    let max = zs.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z / tau));
    let mut out: Vec<f64> = zs.iter().map(|&z| (z / tau - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    if !sum.is_finite() || sum <= 0.0 {
        return Err(Error::NumericFailure("softmax normaliser is not finite".into()));
    }
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(ProbVector(out))
}

/// `KL(q ‖ p) = Σ q_k ln(q_k / p_k)` with `0 ln 0 = 0`. Entries of `p` are
/// floored at [`KL_PROB_FLOOR`] before the logarithm.
pub fn kl_divergence(q: &ProbVector, p: &ProbVector) -> Result<f64> {
    if q.len() != p.len() {
        return Err(invalid(format!(
            "KL length mismatch: {} vs {}",
            q.len(),
            p.len()
        )));
    }
    let kl: f64 = q
        .as_slice()
        .iter()
        .zip(p.as_slice())
        .filter(|(&qk, _)| qk > 0.0)
        .map(|(&qk, &pk)| qk * (qk.ln() - pk.max(KL_PROB_FLOOR).ln()))
        .sum();
    // rounding can leave a negative residue of order 1e-17
    Ok(kl.max(0.0))
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericFailure(format!(
                "function is not finite around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|, floor)`. The floor keeps coordinates whose true
/// derivative is ~0 from turning rounding noise into a large ratio.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_uniform_logits() {
        let p = softmax_range(&[5.0; 4], 0..4, 1.0).unwrap();
        assert!(close(p.as_slice(), &[0.25; 4], 1e-15));
    }

    #[test]
    fn softmax_six_three_one() {
        let z = [6f64.ln(), 3f64.ln(), 0.0];
        let p = softmax_range(&z, 0..3, 1.0).unwrap();
        assert!(close(p.as_slice(), &[0.6, 0.3, 0.1], 1e-15));
    }

    #[test]
    fn softmax_temperature_two() {
        let e = std::f64::consts::E;
        let p = softmax_range(&[2.0, 0.0], 0..2, 2.0).unwrap();
        assert!(close(p.as_slice(), &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-15));
        assert!((p.as_slice()[0] - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn softmax_ignores_entries_outside_range() {
        let p = softmax_range(&[f64::MAX, 1.0, 1.0, f64::MIN], 1..3, 1.0).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax_range(&[1e308, 1e308 - 1e292], 0..2, 1.0).unwrap();
        assert!(p.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_bad_arguments() {
        assert!(matches!(softmax_range(&[1.0], 0..0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(softmax_range(&[1.0], 0..1, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(softmax_range(&[1.0], 0..1, -1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(softmax_range(&[1.0], 0..2, 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn kl_examples() {
        let half = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(kl_divergence(&half, &half).unwrap(), 0.0);

        let eps = 1e-15;
        let q = ProbVector::new(vec![1.0 - eps, eps]).unwrap();
        assert!((kl_divergence(&q, &half).unwrap() - 2f64.ln()).abs() < 1e-9);

        let r = ProbVector::new(vec![0.6, 0.3, 0.1]).unwrap();
        assert_eq!(kl_divergence(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn kl_clamps_zero_probabilities() {
        let q = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let p = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let kl = kl_divergence(&q, &p).unwrap();
        assert!(kl.is_finite());
        let expected = 0.5 * (0.5f64.ln() - 0.0) + 0.5 * (0.5f64.ln() - KL_PROB_FLOOR.ln());
        assert!((kl - expected).abs() < 1e-9);
    }

    #[test]
    fn kl_length_mismatch() {
        let a = ProbVector::new(vec![1.0]).unwrap();
        let b = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(kl_divergence(&a, &b), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![]).is_err());
        assert!(ProbVector::new(vec![0.7, 0.7]).is_err());
        assert!(ProbVector::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|x| x[0] + x[1], &[1.0, 2.0], 1e-5).unwrap();
        assert!(close(&g, &[1.0, 1.0], 1e-8));
    }

    #[test]
    fn finite_diff_reports_non_finite() {
        let r = finite_diff_grad(|x| 1.0 / x[0], &[0.0], 1e-5);
        assert!(r.is_ok());
        let r = finite_diff_grad(|x| (x[0]).ln(), &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::NumericFailure(_))));
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn matrix_products_agree() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.as_slice(), &[4.0, 5.0, 10.0, 11.0]);
        assert_eq!(a.matmul_bt(&b.transpose()).unwrap(), ab);
        assert_eq!(a.transpose().matmul_at(&b).unwrap(), ab);
        assert_eq!(a.matvec(&[1.0, 1.0, 1.0]).unwrap(), vec![6.0, 15.0]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn matrix_rejects_bad_data() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            Matrix::from_vec(1, 1, vec![f64::NAN]),
            Err(Error::NumericFailure(_))
        ));
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn matmul_is_associative_on_random_instances() {
        let mut rng = seeded_rng(11, 0);
        for _ in 0..50 {
            let mut rand_m = |r, c| {
                Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap()
            };
            let a = rand_m(8, 8);
            let b = rand_m(8, 8);
            let v: Vec<f64> = rand_m(1, 8).into_vec();
            let left = a.matmul(&b).unwrap().matvec(&v).unwrap();
            let right = a.matvec(&b.matvec(&v).unwrap()).unwrap();
            assert!(close(&left, &right, 1e-9));
        }
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(
            z in prop::collection::vec(-30.0f64..30.0, 1..12),
            shift in -100.0f64..100.0,
            tau in 0.1f64..10.0,
        ) {
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let a = softmax_range(&z, 0..z.len(), tau).unwrap();
            let b = softmax_range(&shifted, 0..z.len(), tau).unwrap();
            prop_assert!(close(a.as_slice(), b.as_slice(), 1e-12));
            let s: f64 = a.as_slice().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn softmax_flattens_at_high_temperature(z in prop::collection::vec(-5.0f64..5.0, 1..12)) {
            let p = softmax_range(&z, 0..z.len(), 1e6).unwrap();
            let max = p.as_slice().iter().cloned().fold(f64::MIN, f64::max);
            let min = p.as_slice().iter().cloned().fold(f64::MAX, f64::min);
            prop_assert!(max - min < 1e-5);
        }

        #[test]
        fn kl_is_nonnegative_and_zero_only_on_equality(
            a in prop::collection::vec(-5.0f64..5.0, 2..8),
            b in prop::collection::vec(-5.0f64..5.0, 2..8),
        ) {
            let n = a.len().min(b.len());
            let q = softmax_range(&a[..n], 0..n, 1.0).unwrap();
            let p = softmax_range(&b[..n], 0..n, 1.0).unwrap();
            let kl = kl_divergence(&q, &p).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
            let max_gap = q.as_slice().iter().zip(p.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if max_gap > 1e-6 {
                prop_assert!(kl > 1e-12);
            }
        }
    }
}
