//! Pseudo-moment sequences, moment and localizing matrices, and the
//! generalized Hankel structure test.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, SortedEigen};
use crate::poly::{vectorize, Monomial, MonomialBasis, Polynomial};

/// Values `y_alpha = L(X^alpha)` of a linear form on polynomials of degree at most `k`.
#[derive(Debug, Clone)]
pub struct MomentSequence {
    basis: MonomialBasis,
    values: DVector<f64>,
}

impl MomentSequence {
    /// `values` are listed in the graded basis order of degree `k`.
    pub fn new(n: usize, k: u32, values: DVector<f64>) -> Result<Self> {
        let basis = MonomialBasis::new(n, k);
        if values.len() != basis.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.len(),
                got: values.len(),
            });
        }
        Ok(MomentSequence { basis, values })
    }

    /// Moments of `sum_j w_j ev_{a_j}`.
    pub fn from_atoms(n: usize, k: u32, nodes: &[Vec<f64>], weights: &[f64]) -> Self {
        assert_eq!(nodes.len(), weights.len());
        let basis = MonomialBasis::new(n, k);
        let mut values = DVector::zeros(basis.len());
        for (a, &w) in nodes.iter().zip(weights) {
            assert_eq!(a.len(), n);
            values += basis.evaluate(a) * w;
        }
        MomentSequence { basis, values }
    }

    pub fn nvars(&self) -> usize {
        self.basis.nvars()
    }

    pub fn degree(&self) -> u32 {
        self.basis.degree()
    }

    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn get(&self, m: &Monomial) -> Option<f64> {
        self.basis.index_of(m).map(|i| self.values[i])
    }

    fn at(&self, m: &Monomial) -> Result<f64> {
        self.get(m).ok_or(Error::DegreeOverflow {
            degree: m.degree(),
            bound: self.degree(),
        })
    }

    /// First moments `(L(X_1), ..., L(X_n))`.
    pub fn first_moments(&self) -> Vec<f64> {
        let n = self.nvars();
        (0..n).map(|i| self.get(&Monomial::var(n, i)).unwrap_or(0.0)).collect()
    }

    /// Restriction to polynomials of degree at most `k`.
    pub fn truncate(&self, k: u32) -> Result<MomentSequence> {
        if k > self.degree() {
            return Err(Error::DegreeOverflow {
                degree: k,
                bound: self.degree(),
            });
        }
        let basis = MonomialBasis::new(self.nvars(), k);
        let values = self.values.rows(0, basis.len()).into_owned();
        Ok(MomentSequence { basis, values })
    }
}

/// Symmetric matrix labelled on both sides by the graded basis of degree `order`.
#[derive(Debug, Clone)]
pub struct MomentMatrix {
    basis: MonomialBasis,
    entries: DMatrix<f64>,
}

impl MomentMatrix {
    /// Wraps externally supplied entries; they are checked for shape and
    /// symmetry and then symmetrized.
    pub fn from_entries(n: usize, order: u32, entries: DMatrix<f64>) -> Result<Self> {
        let basis = MonomialBasis::new(n, order);
        if entries.nrows() != basis.len() || entries.ncols() != basis.len() {
            return Err(Error::DimensionMismatch {
                expected: basis.len(),
                got: entries.nrows().max(entries.ncols()),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite matrix entry".into()));
        }
        let entries = linalg::symmetrize(&entries)?;
        Ok(MomentMatrix { basis, entries })
    }

    pub fn nvars(&self) -> usize {
        self.basis.nvars()
    }

    pub fn order(&self) -> u32 {
        self.basis.degree()
    }

    pub fn basis(&self) -> &MonomialBasis {
        &self.basis
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    /// `L(p q) = P^T M Q` for `deg p, deg q <= order`.
    pub fn bilinear(&self, p: &Polynomial, q: &Polynomial) -> Result<f64> {
        let pv = vectorize(p, &self.basis)?;
        let qv = vectorize(q, &self.basis)?;
        Ok(pv.dot(&(&self.entries * qv)))
    }

    /// Average of all entries labelled by the monomial `m`; `None` when no
    /// pair of basis labels multiplies to `m`.
    pub fn moment(&self, m: &Monomial) -> Option<f64> {
        let groups = hankel_groups(&self.basis);
        groups
            .get(m)
            .map(|cells| cells.iter().map(|&(i, j)| self.entries[(i, j)]).sum::<f64>() / cells.len() as f64)
    }

    /// `L(p)` read off the matrix, for `deg p <= 2 * order`.
    pub fn apply(&self, p: &Polynomial) -> Result<f64> {
        if p.nvars() != self.nvars() {
            return Err(Error::DimensionMismatch {
                expected: self.nvars(),
                got: p.nvars(),
            });
        }
        let groups = hankel_groups(&self.basis);
        let mut acc = 0.0;
        for (m, c) in p.terms() {
            let cells = groups.get(m).ok_or(Error::DegreeOverflow {
                degree: m.degree(),
                bound: 2 * self.order(),
            })?;
            let v = cells.iter().map(|&(i, j)| self.entries[(i, j)]).sum::<f64>() / cells.len() as f64;
            acc += c * v;
        }
        Ok(acc)
    }
}

/// `M_D(y)` with entries `y_{alpha + beta}`.
pub fn moment_matrix(y: &MomentSequence, order: u32) -> Result<MomentMatrix> {
    if 2 * order > y.degree() {
        return Err(Error::DegreeOverflow {
            degree: 2 * order,
            bound: y.degree(),
        });
    }
    let basis = MonomialBasis::new(y.nvars(), order);
    let s = basis.len();
    let mut entries = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in i..s {
            let v = y.at(&basis.get(i).mul(basis.get(j)))?;
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    Ok(MomentMatrix { basis, entries })
}

/// Order `d_p = floor((k - deg p) / 2)` of the localizing matrix of `p` in degree `k`.
pub fn localizing_order(p: &Polynomial, k: u32) -> Result<u32> {
    let deg = p.degree_or_zero();
    if deg > k {
        return Err(Error::DegreeOverflow { degree: deg, bound: k });
    }
    Ok((k - deg) / 2)
}

/// `M_{k,p}(y)` with entries `sum_gamma p_gamma y_{alpha + beta + gamma}`.
pub fn localizing_matrix(y: &MomentSequence, p: &Polynomial, k: u32) -> Result<DMatrix<f64>> {
    if k > y.degree() {
        return Err(Error::DegreeOverflow {
            degree: k,
            bound: y.degree(),
        });
    }
    if p.nvars() != y.nvars() {
        return Err(Error::DimensionMismatch {
            expected: y.nvars(),
            got: p.nvars(),
        });
    }
    let dp = localizing_order(p, k)?;
    let basis = MonomialBasis::new(y.nvars(), dp);
    let s = basis.len();
    let mut out = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in i..s {
            let ab = basis.get(i).mul(basis.get(j));
            let mut v = 0.0;
            for (g, c) in p.terms() {
                v += c * y.at(&ab.mul(g))?;
            }
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Result of [`psd_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdReport {
    pub is_psd: bool,
    pub min_eigenvalue: f64,
}

/// `lambda_min(M) >= -tol * max(1, lambda_max(M))`.
pub fn psd_check(m: &DMatrix<f64>, tol: f64) -> Result<PsdReport> {
    let sym = linalg::symmetrize(m)?;
    if sym.is_empty() {
        return Ok(PsdReport {
            is_psd: true,
            min_eigenvalue: 0.0,
        });
    }
    let eig = SortedEigen::new(&sym);
    let min = eig.min();
    Ok(PsdReport {
        is_psd: min >= -tol * eig.max().max(1.0),
        min_eigenvalue: min,
    })
}

/// Cells `(i, j)` with `i <= j` grouped by the monomial `basis[i] * basis[j]`.
pub fn hankel_groups(basis: &MonomialBasis) -> HashMap<Monomial, Vec<(usize, usize)>> {
    let mut groups: HashMap<Monomial, Vec<(usize, usize)>> = HashMap::new();
    for i in 0..basis.len() {
        for j in i..basis.len() {
            groups.entry(basis.get(i).mul(basis.get(j))).or_default().push((i, j));
        }
    }
    groups
}

/// Result of [`is_generalized_hankel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HankelReport {
    pub is_hankel: bool,
    /// Largest spread `max - min` within one monomial group.
    pub max_deviation: f64,
}

/// Whether entries depend only on the monomial product of their labels,
/// within `tol * max(1, |M|_max)`.
pub fn is_generalized_hankel(m: &DMatrix<f64>, basis: &MonomialBasis, tol: f64) -> Result<HankelReport> {
    if m.nrows() != basis.len() || m.ncols() != basis.len() {
        return Err(Error::DimensionMismatch {
            expected: basis.len(),
            got: m.nrows(),
        });
    }
    let mut worst: f64 = 0.0;
    for cells in hankel_groups(basis).values() {
        let (lo, hi) = cells
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(i, j)| {
                let v = m[(i, j)];
                (lo.min(v), hi.max(v))
            });
        worst = worst.max(hi - lo);
    }
    // symmetric partners are not in the groups above
    worst = worst.max(linalg::max_abs(&(m - m.transpose())));
    Ok(HankelReport {
        is_hankel: worst <= tol * linalg::unit_scale(m),
        max_deviation: worst,
    })
}

/// `L(p) = sum_alpha p_alpha y_alpha`.
pub fn linear_form_apply(y: &MomentSequence, p: &Polynomial) -> Result<f64> {
    if p.nvars() != y.nvars() {
        return Err(Error::DimensionMismatch {
            expected: y.nvars(),
            got: p.nvars(),
        });
    }
    let mut acc = 0.0;
    for (m, c) in p.terms() {
        acc += c * y.at(m)?;
    }
    Ok(acc)
}
