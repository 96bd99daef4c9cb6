//! Dense symmetric-matrix primitives.
//!
//! Every log-determinant in this crate is carried in base 2 so that rates come
//! out in bits without conversion sites.

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative pivot floor used by [`chol_logdet2`] and friends: pivots at or
/// below `PD_FLOOR_REL * trace / n` abort the factorization.
pub const PD_FLOOR_REL: f64 = 1e-12;

const EIGH_EPS: f64 = 1e-15;
const EIGH_MAX_SWEEPS: usize = 10_000;

/// A real symmetric matrix of order at least one.
///
/// Construction always symmetrizes with `(m + m^T) / 2`, so
/// `entries[i][j] == entries[j][i]` holds exactly.
#[derive(Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidParameter("matrix order must be at least 1".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("matrix has non-finite entries".into()));
        }
        Ok(Self::symmetrized(m))
    }

    /// Symmetrizes without validation. Callers guarantee a non-empty square input.
    pub(crate) fn symmetrized(m: DMatrix<f64>) -> Self {
        debug_assert_eq!(m.nrows(), m.ncols());
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch("rows must all have length n".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn identity(n: usize) -> Self {
        assert!(n >= 1, "matrix order must be at least 1");
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        assert!(n >= 1, "matrix order must be at least 1");
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        Self::new(DMatrix::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 }))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        assert!(n >= 1, "matrix order must be at least 1");
        SymMatrix(DMatrix::identity(n, n) * s)
    }

    pub fn order(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix::symmetrized(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix::symmetrized(&self.0 - &other.0)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(&self.0 * s)
    }

    /// `a * self * a^T`, symmetrized.
    pub fn congruence(&self, a: &DMatrix<f64>) -> SymMatrix {
        SymMatrix::symmetrized(a * &self.0 * a.transpose())
    }

    /// Relative Frobenius distance `||self - other||_F / max(||other||_F, tiny)`.
    pub fn rel_frobenius_err(&self, other: &SymMatrix) -> f64 {
        let denom = other.0.norm().max(f64::MIN_POSITIVE);
        (&self.0 - &other.0).norm() / denom
    }
}

impl fmt::Debug for SymMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SymMatrix{}", self.0)
    }
}

/// Strictly lower-triangular matrix stored by its `n(n-1)/2` free entries in
/// row-major order of the strictly lower positions `(1,0), (2,0), (2,1), ...`.
#[derive(Clone, Debug, PartialEq)]
pub struct StrictLowerTri {
    order: usize,
    free: Vec<f64>,
}

impl StrictLowerTri {
    pub fn zeros(order: usize) -> Self {
        assert!(order >= 1, "matrix order must be at least 1");
        StrictLowerTri { order, free: vec![0.0; Self::free_len(order)] }
    }

    pub fn from_free(order: usize, free: Vec<f64>) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidParameter("matrix order must be at least 1".into()));
        }
        if free.len() != Self::free_len(order) {
            return Err(Error::DimensionMismatch(format!(
                "order {order} needs {} free entries, got {}",
                Self::free_len(order),
                free.len()
            )));
        }
        Ok(StrictLowerTri { order, free })
    }

    /// Takes the strictly lower part of `m`; everything on or above the
    /// diagonal is discarded.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch("expected a square matrix".into()));
        }
        let n = m.nrows();
        let free = Self::positions(n).map(|(i, j)| m[(i, j)]).collect();
        Self::from_free(n, free)
    }

    pub fn free_len(order: usize) -> usize {
        order * order.saturating_sub(1) / 2
    }

    /// Strictly lower positions in storage order.
    pub fn positions(order: usize) -> impl Iterator<Item = (usize, usize)> {
        (1..order).flat_map(|i| (0..i).map(move |j| (i, j)))
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn free_entries(&self) -> &[f64] {
        &self.free
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.order, self.order);
        for ((i, j), v) in Self::positions(self.order).zip(&self.free) {
            m[(i, j)] = *v;
        }
        m
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.free.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, s: f64) -> StrictLowerTri {
        StrictLowerTri { order: self.order, free: self.free.iter().map(|v| v * s).collect() }
    }
}

/// Lower Cholesky factor `L` with `m = L L^T`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factors `m`, aborting when a pivot is `<= floor`.
    pub fn with_floor(m: &DMatrix<f64>, floor: f64) -> Result<Self> {
        let n = m.nrows();
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = m[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > floor) {
                return Err(Error::NotPositiveDefinite(format!(
                    "pivot {d:.3e} at index {j} is at or below floor {floor:.3e}"
                )));
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = m[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Cholesky { l })
    }

    /// Factors with the scale-invariant floor `PD_FLOOR_REL * trace / n`.
    pub fn new(m: &SymMatrix) -> Result<Self> {
        Self::with_floor(m.as_matrix(), pd_floor(m.as_matrix()))
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn logdet2(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.log2()).sum::<f64>()
    }

    /// Squared diagonal of the factor: the successive Schur-complement pivots.
    pub fn pivots(&self) -> Vec<f64> {
        self.l.diagonal().iter().map(|d| d * d).collect()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self.l.solve_lower_triangular(b).expect("nonzero diagonal");
        self.l.transpose().solve_upper_triangular(&y).expect("nonzero diagonal")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        let inv = self.solve(&DMatrix::identity(n, n));
        let t = inv.transpose();
        (inv + t) * 0.5
    }
}

/// `PD_FLOOR_REL * trace / n`. Non-positive traces give an infinite floor so
/// the factorization always fails.
pub fn pd_floor(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows().max(1) as f64;
    let tr = m.trace();
    if tr > 0.0 {
        PD_FLOOR_REL * tr / n
    } else {
        f64::INFINITY
    }
}

/// `log2 det m` via Cholesky.
pub fn chol_logdet2(m: &SymMatrix) -> Result<f64> {
    Ok(Cholesky::new(m)?.logdet2())
}

pub fn spd_inverse(m: &SymMatrix) -> Result<SymMatrix> {
    Ok(SymMatrix(Cholesky::new(m)?.inverse()))
}

/// Symmetric eigendecomposition with eigenvalues ascending and the matching
/// orthonormal eigenvectors as columns.
#[derive(Clone, Debug)]
pub struct Eigh {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn eigh(m: &SymMatrix) -> Result<Eigh> {
    let n = m.order();
    let dec = m
        .as_matrix()
        .clone()
        .try_symmetric_eigen(EIGH_EPS, EIGH_MAX_SWEEPS)
        .ok_or(Error::ConvergenceFailure("symmetric eigensolver".into()))?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| dec.eigenvalues[a].total_cmp(&dec.eigenvalues[b]));
    let values = idx.iter().map(|&k| dec.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(n, n, |i, j| dec.eigenvectors[(i, idx[j])]);
    Ok(Eigh { values, vectors })
}

pub fn min_eigenvalue(m: &SymMatrix) -> Result<f64> {
    Ok(eigh(m)?.values[0])
}

/// True iff the smallest eigenvalue of `m` is at least `-tol`. An eigensolver
/// failure counts as "not PSD".
pub fn min_eig_psd_check(m: &SymMatrix, tol: f64) -> bool {
    matches!(min_eigenvalue(m), Ok(v) if v >= -tol)
}

/// For `m = [[A, C^T], [C, D]]` with `A` of order `split`, returns the Schur
/// complement of `D`: `A - C^T D^{-1} C`.
pub fn schur_complement(m: &SymMatrix, split: usize) -> Result<SymMatrix> {
    let n = m.order();
    if split == 0 || split >= n {
        return Err(Error::DimensionMismatch(format!(
            "split {split} must lie strictly between 0 and order {n}"
        )));
    }
    let a = m.as_matrix().view((0, 0), (split, split)).into_owned();
    let c = m.as_matrix().view((split, 0), (n - split, split)).into_owned();
    let d = SymMatrix::symmetrized(m.as_matrix().view((split, split), (n - split, n - split)).into_owned());
    let chol = Cholesky::new(&d)?;
    let x = chol.solve(&c);
    Ok(SymMatrix::symmetrized(a - c.transpose() * x))
}

/// Row-wise block assembly of a symmetric matrix from a square grid of blocks.
pub(crate) fn assemble_blocks(blocks: &[Vec<DMatrix<f64>>]) -> DMatrix<f64> {
    let sizes: Vec<usize> = blocks.iter().map(|row| row[0].nrows()).collect();
    let total: usize = sizes.iter().sum();
    let mut out = DMatrix::zeros(total, total);
    let mut r0 = 0;
    for (bi, row) in blocks.iter().enumerate() {
        let mut c0 = 0;
        for (bj, blk) in row.iter().enumerate() {
            debug_assert_eq!(blk.nrows(), sizes[bi]);
            debug_assert_eq!(blk.ncols(), sizes[bj]);
            out.view_mut((r0, c0), (sizes[bi], sizes[bj])).copy_from(blk);
            c0 += sizes[bj];
        }
        r0 += sizes[bi];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sym(rows: &[&[f64]]) -> SymMatrix {
        SymMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn logdet_examples() {
        assert_abs_diff_eq!(chol_logdet2(&SymMatrix::identity(3)).unwrap(), 0.0);
        assert_abs_diff_eq!(chol_logdet2(&sym(&[&[2.0, 0.0], &[0.0, 2.0]])).unwrap(), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(chol_logdet2(&sym(&[&[4.0, 2.0], &[2.0, 3.0]])).unwrap(), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn logdet_rejects_indefinite_and_singular() {
        assert!(matches!(chol_logdet2(&sym(&[&[1.0, 2.0], &[2.0, 1.0]])), Err(Error::NotPositiveDefinite(_))));
        assert!(matches!(chol_logdet2(&sym(&[&[1.0, 1.0], &[1.0, 1.0]])), Err(Error::NotPositiveDefinite(_))));
        assert!(chol_logdet2(&SymMatrix::zeros(2)).is_err());
    }

    #[test]
    fn logdet_does_not_overflow() {
        let m = SymMatrix::scaled_identity(400, 1e10);
        assert_abs_diff_eq!(chol_logdet2(&m).unwrap(), 400.0 * 1e10f64.log2(), epsilon = 1e-8);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(spd_inverse(&SymMatrix::identity(3)).unwrap(), SymMatrix::identity(3));
        let inv = spd_inverse(&sym(&[&[2.0, 0.0], &[0.0, 4.0]])).unwrap();
        assert_abs_diff_eq!(inv.get(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(inv.get(1, 1), 0.25, epsilon = 1e-15);
        let inv = spd_inverse(&sym(&[&[2.0, 1.0], &[1.0, 1.0]])).unwrap();
        let want = sym(&[&[1.0, -1.0], &[-1.0, 2.0]]);
        assert!(inv.rel_frobenius_err(&want) < 1e-14);
    }

    fn rotated_spd(n: usize, log10_cond: f64) -> SymMatrix {
        // Householder reflector: orthogonal and symmetric.
        let v = DMatrix::from_fn(n, 1, |i, _| (i as f64 + 1.0).sin());
        let q = DMatrix::identity(n, n) - (&v * v.transpose()) * (2.0 / v.norm_squared());
        let d = nalgebra::DVector::from_fn(n, |i, _| 10f64.powf(-log10_cond * i as f64 / (n as f64 - 1.0)));
        SymMatrix::new(&q * DMatrix::from_diagonal(&d) * q.transpose()).unwrap()
    }

    fn inverse_residual(m: &SymMatrix) -> f64 {
        let n = m.order();
        let inv = spd_inverse(m).unwrap();
        (m.as_matrix() * inv.as_matrix() - DMatrix::identity(n, n)).norm() / (n as f64).sqrt()
    }

    #[test]
    fn inverse_residual_badly_scaled() {
        // Condition number 1e8 from diagonal scaling of a well-conditioned core.
        let n = 6;
        let core = rotated_spd(n, 1.0);
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |i, _| 10f64.powf(-2.0 * i as f64 / (n as f64 - 1.0) * 2.0)));
        let m = SymMatrix::new(&s * core.as_matrix() * &s).unwrap();
        let e = eigh(&m).unwrap().values;
        assert!(e[n - 1] / e[0] > 1e7);
        assert!(inverse_residual(&m) <= 1e-10, "residual {}", inverse_residual(&m));
    }

    #[test]
    fn inverse_residual_tracks_condition_number() {
        // For rotated spectra the residual of a backward-stable inverse grows
        // like cond * eps.
        for log_cond in [2.0, 4.0, 5.0] {
            assert!(inverse_residual(&rotated_spd(6, log_cond)) <= 1e-10, "cond 1e{log_cond}");
        }
        assert!(inverse_residual(&rotated_spd(6, 8.0)) <= 1e-7);
    }

    #[test]
    fn inverse_is_an_involution() {
        let m = rotated_spd(5, 3.0);
        let back = spd_inverse(&spd_inverse(&m).unwrap()).unwrap();
        assert!(back.rel_frobenius_err(&m) <= 1e-9);
    }

    #[test]
    fn eigh_examples() {
        assert_eq!(eigh(&sym(&[&[3.0, 0.0], &[0.0, 1.0]])).unwrap().values, vec![1.0, 3.0]);
        let e = eigh(&sym(&[&[2.0, 1.0], &[1.0, 2.0]])).unwrap();
        assert_abs_diff_eq!(e.values[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(e.values[1], 3.0, epsilon = 1e-14);
        assert_eq!(eigh(&SymMatrix::identity(4)).unwrap().values, vec![1.0; 4]);
    }

    #[test]
    fn psd_check_examples() {
        assert!(min_eig_psd_check(&SymMatrix::zeros(3), 0.0));
        assert!(!min_eig_psd_check(&sym(&[&[1.0, 0.0], &[0.0, -0.1]]), 1e-9));
        assert!(!min_eig_psd_check(&sym(&[&[1.0, 2.0], &[2.0, 1.0]]), 1e-9));
    }

    #[test]
    fn schur_examples() {
        let s = schur_complement(&sym(&[&[2.0, 1.0], &[1.0, 1.0]]), 1).unwrap();
        assert_abs_diff_eq!(s.get(0, 0), 1.0, epsilon = 1e-15);

        let m = sym(&[&[3.0, 1.0, 0.0], &[1.0, 2.0, 0.0], &[0.0, 0.0, 5.0]]);
        let s = schur_complement(&m, 2).unwrap();
        assert_eq!(s, sym(&[&[3.0, 1.0], &[1.0, 2.0]]));

        let m = sym(&[&[5.0, 2.0, 0.0], &[2.0, 2.0, 1.0], &[0.0, 1.0, 1.0]]);
        let s = schur_complement(&m, 1).unwrap();
        assert_abs_diff_eq!(s.get(0, 0), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn schur_rejects_bad_split_and_singular_block() {
        let m = sym(&[&[2.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(schur_complement(&m, 0), Err(Error::DimensionMismatch(_))));
        assert!(matches!(schur_complement(&m, 2), Err(Error::DimensionMismatch(_))));
        let m = sym(&[&[2.0, 1.0, 0.0], &[1.0, 1.0, 1.0], &[0.0, 1.0, 1.0]]);
        assert!(matches!(schur_complement(&m, 1), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn construction_symmetrizes() {
        let m = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 1.0])).unwrap();
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 0), 3.0);
        assert!(SymMatrix::new(DMatrix::zeros(0, 0)).is_err());
        assert!(SymMatrix::new(DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn strict_lower_layout() {
        let b = StrictLowerTri::from_free(3, vec![1.0, 2.0, 3.0]).unwrap();
        let m = b.to_matrix();
        assert_eq!(m[(1, 0)], 1.0);
        assert_eq!(m[(2, 0)], 2.0);
        assert_eq!(m[(2, 1)], 3.0);
        for i in 0..3 {
            for j in i..3 {
                assert_eq!(m[(i, j)], 0.0);
            }
        }
        assert_eq!(StrictLowerTri::from_matrix(&m).unwrap(), b);
        assert_eq!(StrictLowerTri::zeros(1).free_entries().len(), 0);
        assert!(StrictLowerTri::from_free(3, vec![1.0]).is_err());
    }
}
