//! Dense symmetric-matrix primitives.
//!
//! Everything downstream works with symmetric matrices: the scale matrix Σ
//! (positive definite) and the scatter matrix S = UᵀU (positive semidefinite,
//! singular whenever p > m). The Moore-Penrose inverse of S is obtained from
//! its symmetric eigendecomposition with relative truncation
//! `τ = dim · ε · σ_max`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numfmt::format_g;

pub type Matrix = DMatrix<f64>;

/// Relative asymmetry accepted before a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// `‖a − b‖_F / ‖b‖_F`, falling back to the absolute error when `b` is zero.
pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

fn max_abs(a: &Matrix) -> f64 {
    a.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Largest `|a_ij − a_ji|`.
pub fn asymmetry(a: &Matrix) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// `(a + aᵀ)/2`, which is exactly symmetric.
pub fn symmetrize(a: &Matrix) -> Matrix {
    let n = a.nrows();
    Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

fn require_square(a: &Matrix) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::Dimension("empty matrix".into()));
    }
    Ok(a.nrows())
}

fn require_symmetric(a: &Matrix) -> Result<()> {
    let asym = asymmetry(a);
    if !asym.is_finite() || asym > SYMMETRY_TOL * max_abs(a).max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Eigendecomposition `A = V Λ Vᵀ` of a symmetric matrix, eigenvalues
/// sorted in descending order.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: DVector<f64>,
    pub vectors: Matrix,
}

impl SymEig {
    pub fn reconstruct(&self) -> Matrix {
        let scaled = Matrix::from_fn(self.vectors.nrows(), self.vectors.ncols(), |i, j| {
            self.vectors[(i, j)] * self.values[j]
        });
        &scaled * self.vectors.transpose()
    }
}

pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    require_square(a)?;
    require_symmetric(a)?;
    Ok(sym_eig_unchecked(&symmetrize(a)))
}

fn sym_eig_unchecked(a: &Matrix) -> SymEig {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let vectors = Matrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    SymEig { values, vectors }
}

/// Truncation threshold `dim · ε · σ_max` for numerical rank decisions.
pub fn rank_tolerance(dim: usize, sigma_max: f64) -> f64 {
    dim as f64 * f64::EPSILON * sigma_max
}

/// Numerical rank of a symmetric matrix's spectrum at [`rank_tolerance`].
fn numerical_rank(values: &DVector<f64>) -> usize {
    let sigma_max = values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if sigma_max == 0.0 {
        return 0;
    }
    let tol = rank_tolerance(values.len(), sigma_max);
    values.iter().filter(|v| v.abs() > tol).count()
}

/// Builds `Σ_{k ∈ keep} w_k v_k v_kᵀ` from an eigendecomposition.
fn spectral_sum(eig: &SymEig, keep: &[usize], weight: impl Fn(f64) -> f64) -> Matrix {
    let n = eig.vectors.nrows();
    let mut basis = Matrix::zeros(n, keep.len());
    let mut weighted = Matrix::zeros(n, keep.len());
    for (c, &k) in keep.iter().enumerate() {
        let w = weight(eig.values[k]);
        for i in 0..n {
            basis[(i, c)] = eig.vectors[(i, k)];
            weighted[(i, c)] = eig.vectors[(i, k)] * w;
        }
    }
    symmetrize(&(&weighted * basis.transpose()))
}

/// Moore-Penrose inverse of a symmetric (PSD) matrix.
///
/// Eigenvalues with `|σ| ≤ dim · ε · σ_max` are treated as zero. The zero
/// matrix maps to the zero matrix.
pub fn pseudo_inverse(a: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    let rank = numerical_rank(&eig.values);
    let keep = retained_indices(&eig.values, rank);
    Ok(spectral_sum(&eig, &keep, |v| 1.0 / v))
}

/// Indices of the `rank` eigenvalues of largest magnitude, in spectrum order.
fn retained_indices(values: &DVector<f64>, rank: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].abs().total_cmp(&values[i].abs()));
    idx.truncate(rank);
    idx.sort_unstable();
    idx
}

/// Residuals of the four Penrose conditions, each as a relative Frobenius
/// error.
#[derive(Debug, Clone, Copy)]
pub struct PenroseResiduals {
    /// `A A⁺ A = A`
    pub reproduce: f64,
    /// `A⁺ A A⁺ = A⁺`
    pub reflexive: f64,
    /// `(A A⁺)ᵀ = A A⁺`
    pub left_symmetric: f64,
    /// `(A⁺ A)ᵀ = A⁺ A`
    pub right_symmetric: f64,
}

impl PenroseResiduals {
    pub fn max(&self) -> f64 {
        self.reproduce
            .max(self.reflexive)
            .max(self.left_symmetric)
            .max(self.right_symmetric)
    }
}

pub fn penrose_residuals(a: &Matrix, a_pinv: &Matrix) -> PenroseResiduals {
    let a_ap = a * a_pinv;
    let ap_a = a_pinv * a;
    PenroseResiduals {
        reproduce: rel_frobenius(&(&a_ap * a), a),
        reflexive: rel_frobenius(&(&ap_a * a_pinv), a_pinv),
        left_symmetric: rel_frobenius(&a_ap.transpose(), &a_ap),
        right_symmetric: rel_frobenius(&ap_a.transpose(), &ap_a),
    }
}

/// Symmetric positive-definite scale matrix Σ with its Cholesky factor and
/// inverse.
#[derive(Debug, Clone)]
pub struct ScaleMatrix {
    entries: Matrix,
    factor: Matrix,
    inverse: Matrix,
    log_det: f64,
}

impl ScaleMatrix {
    pub fn new(entries: Matrix) -> Result<Self> {
        require_square(&entries)?;
        require_symmetric(&entries)?;
        let entries = symmetrize(&entries);
        let chol = Cholesky::new(entries.clone()).ok_or(Error::NotPositiveDefinite)?;
        let factor = chol.l();
        if factor.diagonal().iter().any(|d| d.is_nan() || *d <= 0.0 || !d.is_finite()) {
            return Err(Error::NotPositiveDefinite);
        }
        let log_det = 2.0 * factor.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let inverse = symmetrize(&chol.inverse());
        Ok(Self {
            entries,
            factor,
            inverse,
            log_det,
        })
    }

    pub fn identity(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidParameter("dimension must be at least 1".into()));
        }
        Self::new(Matrix::identity(p, p))
    }

    /// AR(1) structure `Σ_ij = ρ^{|i−j|}`, positive definite for `|ρ| < 1`.
    pub fn ar1(p: usize, rho: f64) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidParameter("dimension must be at least 1".into()));
        }
        if !rho.is_finite() || rho.abs() >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "AR(1) coefficient must lie in (-1, 1), got {rho}"
            )));
        }
        let entries = Matrix::from_fn(p, p, |i, j| rho.powi(i.abs_diff(j) as i32));
        Self::new(entries)
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    /// Lower-triangular `L` with `L Lᵀ = Σ`.
    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    pub fn inverse(&self) -> &Matrix {
        &self.inverse
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }
}

/// Equivalent to [`ScaleMatrix::ar1`].
pub fn build_ar1(p: usize, rho: f64) -> Result<ScaleMatrix> {
    ScaleMatrix::ar1(p, rho)
}

/// Symmetric positive-semidefinite scatter matrix S with its
/// Moore-Penrose inverse S⁺ and the projector SS⁺ onto range(S).
#[derive(Debug, Clone)]
pub struct ScatterMatrix {
    entries: Matrix,
    rank: usize,
    pinv: Matrix,
    projector: Matrix,
    eigenvalues: DVector<f64>,
}

impl ScatterMatrix {
    /// Wraps a symmetric matrix, deciding its rank at [`rank_tolerance`].
    pub fn new(entries: Matrix) -> Result<Self> {
        require_square(&entries)?;
        require_symmetric(&entries)?;
        let entries = symmetrize(&entries);
        let eig = sym_eig_unchecked(&entries);
        let rank = numerical_rank(&eig.values);
        Ok(Self::assemble(entries, eig, rank))
    }

    /// `S = UᵀU` for an `m × p` matrix `U`.
    pub fn from_factor(u: &Matrix) -> Result<Self> {
        if u.nrows() == 0 || u.ncols() == 0 {
            return Err(Error::Dimension("empty factor".into()));
        }
        Self::new(symmetrize(&u.tr_mul(u)))
    }

    /// Wraps a symmetric matrix keeping exactly its `rank` largest-magnitude
    /// eigenvalues; the rest are treated as zero.
    ///
    /// This is the rank-preserving projection used when S is perturbed off
    /// its rank stratum (finite differences on singular S).
    pub fn with_rank(entries: Matrix, rank: usize) -> Result<Self> {
        let p = require_square(&entries)?;
        require_symmetric(&entries)?;
        if rank > p {
            return Err(Error::InvalidParameter(format!(
                "rank {rank} exceeds dimension {p}"
            )));
        }
        let entries = symmetrize(&entries);
        let eig = sym_eig_unchecked(&entries);
        Ok(Self::assemble(entries, eig, rank))
    }

    fn assemble(entries: Matrix, eig: SymEig, rank: usize) -> Self {
        let keep = retained_indices(&eig.values, rank);
        let pinv = spectral_sum(&eig, &keep, |v| 1.0 / v);
        let projector = spectral_sum(&eig, &keep, |_| 1.0);
        Self {
            entries,
            rank,
            pinv,
            projector,
            eigenvalues: eig.values,
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    /// Moore-Penrose inverse S⁺.
    pub fn pinv(&self) -> &Matrix {
        &self.pinv
    }

    /// Orthogonal projector SS⁺ onto range(S).
    pub fn projector(&self) -> &Matrix {
        &self.projector
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// `tr(S⁺)`, the sum of reciprocal retained eigenvalues.
    pub fn trace_pinv(&self) -> Result<f64> {
        if self.rank == 0 {
            return Err(Error::ZeroScatter);
        }
        Ok(self.pinv.trace())
    }
}

/// Equivalent to [`ScatterMatrix::trace_pinv`].
pub fn trace_pinv(s: &ScatterMatrix) -> Result<f64> {
    s.trace_pinv()
}

/// Writes a matrix as row-major CSV with 17 significant digits.
pub fn write_matrix_csv<W: Write>(mut out: W, a: &Matrix) -> std::io::Result<()> {
    for i in 0..a.nrows() {
        let row: Vec<String> = (0..a.ncols()).map(|j| format_g(a[(i, j)], 17)).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Reads a row-major CSV matrix (no header).
pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::Config(format!(
                        "{}:{}: cannot parse {:?} as a number",
                        path.display(),
                        lineno + 1,
                        cell.trim()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{}: ragged rows", path.display())));
    }
    Ok(Matrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn ar1_matches_closed_form() {
        let sigma = build_ar1(3, 0.9).unwrap();
        let expected = Matrix::from_row_slice(3, 3, &[1.0, 0.9, 0.81, 0.9, 1.0, 0.9, 0.81, 0.9, 1.0]);
        assert_relative_eq!(sigma.entries(), &expected, epsilon = 1e-15);
        assert_eq!(build_ar1(4, 0.0).unwrap().entries(), &Matrix::identity(4, 4));
    }

    #[test]
    fn ar1_two_by_two_eigenvalues() {
        let eig = sym_eig(build_ar1(2, 0.5).unwrap().entries()).unwrap();
        assert_relative_eq!(eig.values[0], 1.5, epsilon = 1e-14);
        assert_relative_eq!(eig.values[1], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn ar1_rejects_bad_parameters() {
        assert!(build_ar1(3, 1.0).is_err());
        assert!(build_ar1(3, -1.2).is_err());
        assert!(build_ar1(0, 0.5).is_err());
    }

    #[test]
    fn scale_matrix_factor_and_inverse() {
        let sigma = build_ar1(30, 0.9).unwrap();
        let llt = sigma.factor() * sigma.factor().transpose();
        assert!(rel_frobenius(&llt, sigma.entries()) < 1e-10);
        let prod = sigma.entries() * sigma.inverse();
        assert!(rel_frobenius(&prod, &Matrix::identity(30, 30)) < 1e-8);
        assert_eq!(asymmetry(sigma.inverse()), 0.0);
    }

    #[test]
    fn scale_matrix_rejects_indefinite() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(ScaleMatrix::new(a), Err(Error::NotPositiveDefinite)));
        let b = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(ScaleMatrix::new(b), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn pinv_diagonal_and_identity() {
        let a = Matrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        let expected = Matrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.0]));
        assert_relative_eq!(pseudo_inverse(&a).unwrap(), expected, epsilon = 1e-15);
        let id = Matrix::identity(5, 5);
        assert_relative_eq!(pseudo_inverse(&id).unwrap(), id, epsilon = 1e-15);
        let zero = Matrix::zeros(4, 4);
        assert_eq!(pseudo_inverse(&zero).unwrap(), zero);
    }

    #[test]
    fn pinv_rejects_nonsymmetric() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(matches!(pseudo_inverse(&a), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn pinv_rank_two_penrose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = gaussian(2, 5, &mut rng);
        let a = symmetrize(&u.tr_mul(&u));
        let ap = pseudo_inverse(&a).unwrap();
        assert!(penrose_residuals(&a, &ap).max() < 1e-9);
        let s = ScatterMatrix::new(a).unwrap();
        assert_eq!(s.rank(), 2);
    }

    #[test]
    fn sym_eig_small_cases() {
        let eig = sym_eig(&Matrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]))).unwrap();
        assert_eq!(eig.values.as_slice(), &[3.0, 1.0]);
        assert_relative_eq!(eig.vectors[(1, 0)].abs(), 1.0, epsilon = 1e-15);

        let swap = Matrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let eig = sym_eig(&swap).unwrap();
        assert_relative_eq!(eig.values[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(eig.values[1], -1.0, epsilon = 1e-14);
        assert!(sym_eig(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn sym_eig_reconstructs_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = gaussian(6, 6, &mut rng);
        let a = symmetrize(&(&g + g.transpose()));
        let eig = sym_eig(&a).unwrap();
        assert!(rel_frobenius(&eig.reconstruct(), &a) < 1e-9);
        let vtv = eig.vectors.transpose() * &eig.vectors;
        assert!((vtv - Matrix::identity(6, 6)).norm() < 1e-10);
        assert!(eig.values.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn trace_pinv_cases() {
        let s = ScatterMatrix::new(Matrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0, 0.0]))).unwrap();
        assert_relative_eq!(s.trace_pinv().unwrap(), 0.75, epsilon = 1e-15);
        let s = ScatterMatrix::new(Matrix::identity(4, 4)).unwrap();
        assert_relative_eq!(trace_pinv(&s).unwrap(), 4.0, epsilon = 1e-15);
        let z = ScatterMatrix::new(Matrix::zeros(3, 3)).unwrap();
        assert!(matches!(z.trace_pinv(), Err(Error::ZeroScatter)));
    }

    #[test]
    fn trace_pinv_matches_reciprocal_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = gaussian(3, 6, &mut rng);
        let s = ScatterMatrix::from_factor(&u).unwrap();
        let eig = SymmetricEigen::new(s.entries().clone());
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        let oracle: f64 = vals[..3].iter().map(|v| 1.0 / v).sum();
        assert_relative_eq!(s.trace_pinv().unwrap(), oracle, max_relative = 1e-10);
    }

    #[test]
    fn with_rank_truncates_small_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = gaussian(2, 4, &mut rng);
        let s = ScatterMatrix::from_factor(&u).unwrap();
        let mut bumped = s.entries().clone();
        bumped[(3, 3)] += 1e-6;
        let kept = ScatterMatrix::with_rank(bumped.clone(), 2).unwrap();
        assert_eq!(kept.rank(), 2);
        assert!(rel_frobenius(kept.projector(), s.projector()) < 1e-5);
        assert_eq!(ScatterMatrix::new(bumped).unwrap().rank(), 3);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let a = Matrix::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -2.5e-12, 7.0]);
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &a).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        std::fs::write(&path, &buf).unwrap();
        assert_eq!(read_matrix_csv(&path).unwrap(), a);
    }
}
