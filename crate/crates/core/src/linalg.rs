//! Small dense helpers on top of nalgebra shared by the solver and the
//! GNS code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative asymmetry accepted before a matrix is rejected.
pub const SYMMETRY_TOL: f64 = 1e-8;

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// `max(1, |M|_max)`, the scale every relative tolerance is measured against.
pub fn unit_scale(m: &DMatrix<f64>) -> f64 {
    max_abs(m).max(1.0)
}

/// Returns `(M + M^T) / 2`, or an error when `M` is visibly non-symmetric.
pub fn symmetrize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    let asym = max_abs(&(m - m.transpose()));
    let threshold = SYMMETRY_TOL * unit_scale(m);
    if asym > threshold {
        return Err(Error::NotSymmetric {
            asymmetry: asym,
            threshold,
        });
    }
    Ok((m + m.transpose()) * 0.5)
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted ascending.
pub struct SortedEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SortedEigen {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        if n == 0 {
            return SortedEigen {
                values: DVector::zeros(0),
                vectors: DMatrix::zeros(0, 0),
            };
        }
        let sym = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        SortedEigen { values, vectors }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Eigenvalues above `cutoff` count towards the rank.
    pub fn rank_above(&self, cutoff: f64) -> usize {
        self.values.iter().filter(|&&v| v > cutoff).count()
    }
}

/// Absolute eigenvalue cutoff `tol * max(1, lambda_max)` used for numerical ranks.
pub fn rank_cutoff(tol: f64, lambda_max: f64) -> f64 {
    tol * lambda_max.max(1.0)
}

/// Numerical rank of a symmetric matrix: eigenvalues above `tol * max(1, lambda_max)`.
pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let eig = SortedEigen::new(m);
    eig.rank_above(rank_cutoff(tol, eig.max()))
}

/// Pseudo-inverse of a symmetric PSD matrix, discarding eigenvalues at or
/// below `cutoff`.
pub fn psd_pinv(m: &DMatrix<f64>, cutoff: f64) -> DMatrix<f64> {
    let eig = SortedEigen::new(m);
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (i, &lambda) in eig.values.iter().enumerate() {
        if lambda > cutoff {
            let v = eig.vectors.column(i);
            out += (v * v.transpose()) / lambda;
        }
    }
    out
}

/// Numerical rank of a general matrix from its singular values.
pub fn svd_rank(m: &DMatrix<f64>, cutoff: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    sv.iter().filter(|&&s| s > cutoff).count()
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().iter().copied().fold(0.0, f64::max)
}
