//! Truncated GNS construction on a PSD moment matrix of order `D`.
//!
//! `M` is split by monomial degree into `A` (degree `<= D-1` on both sides),
//! `B` (degree `<= D-1` rows against degree `D` columns) and `C`. The space
//! `T_L` is the image of polynomials of degree `<= D-1` modulo the kernel of
//! `<p, q> = L(pq)`; multiplication by `X_i` followed by projection onto it
//! gives the operators `M_i`. Everything is carried out on coefficient
//! vectors, the quotient is never built.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, SortedEigen};
use crate::moment::{is_generalized_hankel, MomentMatrix};
use crate::poly::{devectorize, Monomial, MonomialBasis, Polynomial};

/// Outcome of [`certify_hankel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HankelStatus {
    Flat,
    HankelNotFlat,
    NotHankel,
}

impl HankelStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            HankelStatus::Flat => "Flat",
            HankelStatus::HankelNotFlat => "HankelNotFlat",
            HankelStatus::NotHankel => "NotHankel",
        }
    }
}

/// The pieces of `M` shared by every routine here.
struct Split {
    d: u32,
    /// `s_{D-1}`.
    a_len: usize,
    entries: DMatrix<f64>,
    eig_m: SortedEigen,
    eig_a: SortedEigen,
}

impl Split {
    fn new(m: &MomentMatrix) -> Result<Self> {
        let d = m.order();
        if d == 0 {
            return Err(Error::InvalidInput("moment matrix of order 0 has no truncation".into()));
        }
        let a_len = m.basis().prefix_len(d - 1);
        let entries = m.entries().clone();
        let eig_m = SortedEigen::new(&entries);
        let eig_a = SortedEigen::new(&entries.view((0, 0), (a_len, a_len)).into_owned());
        Ok(Split {
            d,
            a_len,
            entries,
            eig_m,
            eig_a,
        })
    }

    fn a(&self) -> DMatrix<f64> {
        self.entries.view((0, 0), (self.a_len, self.a_len)).into_owned()
    }

    fn b(&self) -> DMatrix<f64> {
        let s = self.entries.nrows();
        self.entries
            .view((0, self.a_len), (self.a_len, s - self.a_len))
            .into_owned()
    }

    fn cutoff_m(&self, tol: f64) -> f64 {
        linalg::rank_cutoff(tol, self.eig_m.max())
    }

    fn cutoff_a(&self, tol: f64) -> f64 {
        linalg::rank_cutoff(tol, self.eig_a.max())
    }

    fn check_psd(&self, tol: f64) -> Result<()> {
        let min = self.eig_m.min();
        if min < -self.cutoff_m(tol) {
            return Err(Error::NotPsd { min_eigenvalue: min });
        }
        Ok(())
    }

    fn rank_m(&self, tol: f64) -> usize {
        self.eig_m.rank_above(self.cutoff_m(tol))
    }

    fn rank_a(&self, tol: f64) -> usize {
        self.eig_a.rank_above(self.cutoff_a(tol))
    }
}

/// Polynomials spanning the numerical kernel `{p : L(p^2) = 0}`, one per
/// eigenvector of `M` with eigenvalue at or below `tol * max(1, lambda_max)`.
pub fn kernel_basis(m: &MomentMatrix, tol: f64) -> Result<Vec<Polynomial>> {
    let split = Split::new(m)?;
    split.check_psd(tol)?;
    Ok(kernel_from(&split, m.basis(), tol))
}

fn kernel_from(split: &Split, basis: &MonomialBasis, tol: f64) -> Vec<Polynomial> {
    let cutoff = split.cutoff_m(tol);
    split
        .eig_m
        .values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v <= cutoff)
        .map(|(i, _)| devectorize(&split.eig_m.vectors.column(i).into_owned(), basis))
        .collect()
}

/// Coefficient vectors (columns, length `s_{D-1}`) of an `L`-orthonormal basis of `T_L`.
///
/// Modified Gram-Schmidt over the monomials of degree `<= D-1` in basis
/// order; candidates whose residual norm falls below the rank cutoff lie in
/// the kernel and are skipped. If the count disagrees with the eigenvalue
/// rank of `A` the scaled eigenvectors of `A` are used instead.
fn truncation_coords(split: &Split, tol: f64) -> DMatrix<f64> {
    let a = split.a();
    let n = split.a_len;
    let rank = split.rank_a(tol);
    let cutoff = split.cutoff_a(tol);
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(rank);
    for i in 0..n {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        for _ in 0..2 {
            for b in &cols {
                let proj = v.dot(&(&a * b));
                v -= b * proj;
            }
        }
        let norm2 = v.dot(&(&a * &v));
        if norm2 > cutoff {
            cols.push(v / norm2.sqrt());
        }
    }
    if cols.len() == rank {
        return DMatrix::from_columns(&cols);
    }
    log::debug!(
        "Gram-Schmidt found {} directions but rank(A) = {rank}; using eigenvectors",
        cols.len()
    );
    let kept: Vec<DVector<f64>> = split
        .eig_a
        .values
        .iter()
        .enumerate()
        .rev()
        .filter(|(_, &v)| v > cutoff)
        .map(|(i, &v)| split.eig_a.vectors.column(i) / v.sqrt())
        .collect();
    if kept.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&kept)
    }
}

/// `L`-orthonormal basis of `T_L`, of degree at most `D-1`.
pub fn truncation_basis(m: &MomentMatrix, tol: f64) -> Result<Vec<Polynomial>> {
    let split = Split::new(m)?;
    split.check_psd(tol)?;
    let coords = truncation_coords(&split, tol);
    let small = MonomialBasis::new(m.nvars(), split.d - 1);
    Ok(coords
        .column_iter()
        .map(|c| devectorize(&c.into_owned(), &small))
        .collect())
}

/// Matrix sending degree `<= D-1` coordinates of `p` to degree `<= D`
/// coordinates of `X_i p`.
fn shift_matrix(basis: &MonomialBasis, a_len: usize, i: usize) -> DMatrix<f64> {
    let n = basis.nvars();
    let xi = Monomial::var(n, i);
    let mut s = DMatrix::zeros(basis.len(), a_len);
    for j in 0..a_len {
        let k = basis
            .index_of(&basis.get(j).mul(&xi))
            .expect("degree D-1 times X_i stays within degree D");
        s[(k, j)] = 1.0;
    }
    s
}

fn operators_from(
    entries: &DMatrix<f64>,
    basis: &MonomialBasis,
    a_len: usize,
    coords: &DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    let left = entries.columns(0, a_len);
    (0..basis.nvars())
        .map(|i| {
            let shifted = shift_matrix(basis, a_len, i) * coords;
            let op = shifted.transpose() * left * coords;
            (&op + op.transpose()) * 0.5
        })
        .collect()
}

/// `(M_i)_{jk} = L(X_i b_j b_k)` for each variable, on the given `L`-orthonormal basis.
pub fn multiplication_operators(m: &MomentMatrix, basis: &[Polynomial]) -> Result<Vec<DMatrix<f64>>> {
    let d = m.order();
    if d == 0 {
        return Err(Error::InvalidInput("order 0 moment matrix".into()));
    }
    let small = MonomialBasis::new(m.nvars(), d - 1);
    let mut coords = DMatrix::zeros(small.len(), basis.len());
    for (j, p) in basis.iter().enumerate() {
        let deg = p.degree_or_zero();
        if deg > d - 1 {
            return Err(Error::DegreeOverflow {
                degree: deg,
                bound: d - 1,
            });
        }
        coords.set_column(j, &crate::poly::vectorize(p, &small)?);
    }
    Ok(operators_from(m.entries(), m.basis(), small.len(), &coords))
}

/// Numerical rank of every pairwise commutator `M_i M_j - M_j M_i`, as
/// `(i, j, rank)` with `i < j`. Singular values count when above
/// `tol * |M_i| * |M_j|` (spectral norms).
pub fn commutator_ranks(ops: &[DMatrix<f64>], tol: f64) -> Vec<(usize, usize, usize)> {
    let norms: Vec<f64> = ops.iter().map(linalg::spectral_norm).collect();
    let mut out = Vec::new();
    for i in 0..ops.len() {
        for j in i + 1..ops.len() {
            let comm = &ops[i] * &ops[j] - &ops[j] * &ops[i];
            let scale = (norms[i] * norms[j]).max(f64::MIN_POSITIVE);
            out.push((i, j, linalg::svd_rank(&comm, tol * scale)));
        }
    }
    out
}

/// Largest entry of [`commutator_ranks`].
pub fn max_commutator_rank(ops: &[DMatrix<f64>], tol: f64) -> usize {
    commutator_ranks(ops, tol)
        .into_iter()
        .map(|(_, _, r)| r)
        .max()
        .unwrap_or(0)
}

/// Largest pairwise commutator norm relative to `|M_i| * |M_j|`.
pub fn commutator_defect(ops: &[DMatrix<f64>]) -> f64 {
    let norms: Vec<f64> = ops.iter().map(linalg::spectral_norm).collect();
    let mut worst: f64 = 0.0;
    for i in 0..ops.len() {
        for j in i + 1..ops.len() {
            let comm = &ops[i] * &ops[j] - &ops[j] * &ops[i];
            let scale = (norms[i] * norms[j]).max(f64::MIN_POSITIVE);
            worst = worst.max(linalg::spectral_norm(&comm) / scale);
        }
    }
    worst
}

/// `A W = B` residual allowed: discarded directions of eigenvalue `lambda`
/// leave a residual of order `sqrt(lambda * |C|)` by positive semidefiniteness.
fn residual_threshold(tol: f64, scale: f64) -> f64 {
    10.0 * tol.sqrt() * scale
}

fn solve_w(split: &Split, tol: f64) -> Result<DMatrix<f64>> {
    let a = split.a();
    let b = split.b();
    let w = linalg::psd_pinv(&a, split.cutoff_a(tol)) * &b;
    let residual = linalg::max_abs(&(&a * &w - &b));
    let threshold = residual_threshold(tol, linalg::unit_scale(&split.entries));
    if residual > threshold {
        return Err(Error::ResidualTooLarge { residual, threshold });
    }
    Ok(w)
}

fn assemble_tilde(a: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let na = a.nrows();
    let nb = w.ncols();
    let aw = a * w;
    let wtaw = w.transpose() * &aw;
    let mut out = DMatrix::zeros(na + nb, na + nb);
    out.view_mut((0, 0), (na, na)).copy_from(a);
    out.view_mut((0, na), (na, nb)).copy_from(&aw);
    out.view_mut((na, 0), (nb, na)).copy_from(&aw.transpose());
    out.view_mut((na, na), (nb, nb))
        .copy_from(&((&wtaw + wtaw.transpose()) * 0.5));
    out
}

/// `(M~, W)` with `W = A^+ B` and `M~ = [[A, AW], [W^T A, W^T A W]]`.
pub fn modified_moment_matrix(m: &MomentMatrix, tol: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let split = Split::new(m)?;
    split.check_psd(tol)?;
    let w = solve_w(&split, tol)?;
    Ok((assemble_tilde(&split.a(), &w), w))
}

/// Numerical rank of `M` does not exceed that of `A`, each counted against
/// its own cutoff `tol * max(1, lambda_max)`. Mathematically `rank M >= rank A`,
/// so this is the equality test with the drop of tiny directions of `A`
/// under the larger scale of `M` tolerated.
pub fn is_flat(m: &MomentMatrix, tol: f64) -> Result<bool> {
    let split = Split::new(m)?;
    split.check_psd(tol)?;
    Ok(flat_from(&split, tol))
}

fn flat_from(split: &Split, tol: f64) -> bool {
    split.rank_m(tol) <= split.rank_a(tol)
}

/// The full truncated GNS model of a moment matrix.
#[derive(Debug, Clone)]
pub struct GnsModel {
    pub source: MomentMatrix,
    pub rank_tol: f64,
    pub kernel_basis: Vec<Polynomial>,
    pub truncation_basis: Vec<Polynomial>,
    /// Columns are the coefficient vectors of `truncation_basis` over degree `<= D-1`.
    pub truncation_coords: DMatrix<f64>,
    pub op_matrices: Vec<DMatrix<f64>>,
    pub w: DMatrix<f64>,
    pub m_tilde: DMatrix<f64>,
    pub rank_a: usize,
    pub rank_m: usize,
    pub flat: bool,
}

impl GnsModel {
    pub fn new(m: &MomentMatrix, rank_tol: f64) -> Result<Self> {
        let split = Split::new(m)?;
        split.check_psd(rank_tol)?;
        let w = solve_w(&split, rank_tol)?;
        let m_tilde = assemble_tilde(&split.a(), &w);
        let coords = truncation_coords(&split, rank_tol);
        let small = MonomialBasis::new(m.nvars(), split.d - 1);
        let truncation_basis = coords
            .column_iter()
            .map(|c| devectorize(&c.into_owned(), &small))
            .collect();
        let op_matrices = operators_from(&split.entries, m.basis(), split.a_len, &coords);
        Ok(GnsModel {
            source: m.clone(),
            rank_tol,
            kernel_basis: kernel_from(&split, m.basis(), rank_tol),
            truncation_basis,
            truncation_coords: coords,
            op_matrices,
            w,
            m_tilde,
            rank_a: split.rank_a(rank_tol),
            rank_m: split.rank_m(rank_tol),
            flat: flat_from(&split, rank_tol),
        })
    }

    pub fn nvars(&self) -> usize {
        self.source.nvars()
    }

    pub fn order(&self) -> u32 {
        self.source.order()
    }

    /// `dim T_L`.
    pub fn dim(&self) -> usize {
        self.truncation_basis.len()
    }

    /// Coordinates of the class of `p` (degree `<= D`) in the truncation
    /// basis: `<p, b_j> = L(p b_j)`.
    pub fn coords_of(&self, p: &Polynomial) -> Result<DVector<f64>> {
        let v = crate::poly::vectorize(p, self.source.basis())?;
        let a_len = self.truncation_coords.nrows();
        let left = self.source.entries().columns(0, a_len);
        Ok((v.transpose() * left * &self.truncation_coords).transpose())
    }

    /// Coordinates of the class of `1`.
    pub fn unit_coords(&self) -> DVector<f64> {
        let a_len = self.truncation_coords.nrows();
        let col = self.source.entries().view((0, 0), (a_len, 1)).column(0).into_owned();
        self.truncation_coords.tr_mul(&col)
    }

    /// Gram matrix of the truncation basis under `L`; the identity up to rounding.
    pub fn gram(&self) -> DMatrix<f64> {
        let a_len = self.truncation_coords.nrows();
        let a = self.source.entries().view((0, 0), (a_len, a_len));
        self.truncation_coords.transpose() * a * &self.truncation_coords
    }

    pub fn max_commutator_rank(&self, tol: f64) -> usize {
        max_commutator_rank(&self.op_matrices, tol)
    }
}

/// Result of [`certify_hankel`].
#[derive(Debug, Clone)]
pub struct HankelCertificate {
    pub status: HankelStatus,
    pub m_tilde: DMatrix<f64>,
    /// Largest spread inside a monomial group of `M~`.
    pub deviation: f64,
    pub commutator_rank: usize,
    /// Set when the Hankel test and the commutator test disagree.
    pub warning: Option<String>,
}

pub fn certify_model(model: &GnsModel, tol_hankel: f64) -> Result<HankelCertificate> {
    let report = is_generalized_hankel(&model.m_tilde, model.source.basis(), tol_hankel)?;
    // a flat M has M~ = M, which is Hankel; a rank count claiming flatness
    // for a non-Hankel M~ is an artifact of the cutoffs
    let status = match (report.is_hankel, model.flat) {
        (true, true) => HankelStatus::Flat,
        (true, false) => HankelStatus::HankelNotFlat,
        (false, _) => HankelStatus::NotHankel,
    };
    let commutator_rank = model.max_commutator_rank(tol_hankel);
    let commuting = commutator_rank == 0;
    let warning = if commuting != (status != HankelStatus::NotHankel) {
        let msg = format!(
            "Hankel test says {} (deviation {:.3e}) but the commutator rank is {commutator_rank}",
            status.as_str(),
            report.max_deviation
        );
        log::warn!("{msg}");
        Some(msg)
    } else {
        None
    };
    Ok(HankelCertificate {
        status,
        m_tilde: model.m_tilde.clone(),
        deviation: report.max_deviation,
        commutator_rank,
        warning,
    })
}

/// Flat, Hankel but not flat, or not Hankel, cross-checked against the commutators.
pub fn certify_hankel(m: &MomentMatrix, tol_rank: f64, tol_hankel: f64) -> Result<HankelCertificate> {
    certify_model(&GnsModel::new(m, tol_rank)?, tol_hankel)
}
