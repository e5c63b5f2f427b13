//! JSON formats for problems and moment matrices.
//!
//! A problem file:
//!
//! ```json
//! { "variables": 2,
//!   "objective":   [{"exponents": [1, 0], "coeff": -12.0}],
//!   "inequalities": [[{"exponents": [1, 0], "coeff": 1.0}]],
//!   "equalities":   [] }
//! ```
//!
//! A moment matrix file lists rows in the graded monomial order:
//! `{ "n": 2, "order": 2, "entries": [[...], ...] }`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moment::MomentMatrix;
use crate::poly::Polynomial;
use crate::sdp::PopProblem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermJson {
    pub exponents: Vec<u32>,
    pub coeff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemJson {
    pub variables: usize,
    pub objective: Vec<TermJson>,
    #[serde(default)]
    pub inequalities: Vec<Vec<TermJson>>,
    #[serde(default)]
    pub equalities: Vec<Vec<TermJson>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentMatrixJson {
    pub n: usize,
    pub order: u32,
    pub entries: Vec<Vec<f64>>,
}

pub fn polynomial_from_terms(n: usize, terms: &[TermJson]) -> Result<Polynomial> {
    Polynomial::from_terms(n, terms.iter().map(|t| (t.exponents.clone(), t.coeff)))
}

pub fn terms_of(p: &Polynomial) -> Vec<TermJson> {
    p.terms()
        .map(|(m, c)| TermJson {
            exponents: m.exponents().to_vec(),
            coeff: c,
        })
        .collect()
}

impl ProblemJson {
    pub fn to_problem(&self) -> Result<PopProblem> {
        let n = self.variables;
        let f = polynomial_from_terms(n, &self.objective)?;
        let ineqs = self
            .inequalities
            .iter()
            .map(|t| polynomial_from_terms(n, t))
            .collect::<Result<Vec<_>>>()?;
        let eqs = self
            .equalities
            .iter()
            .map(|t| polynomial_from_terms(n, t))
            .collect::<Result<Vec<_>>>()?;
        PopProblem::with_equalities(n, f, ineqs, &eqs)
    }

    /// Equalities are not recovered: every constraint is written as an inequality.
    pub fn from_problem(prob: &PopProblem) -> Self {
        ProblemJson {
            variables: prob.nvars(),
            objective: terms_of(prob.objective()),
            inequalities: prob.constraints().iter().map(terms_of).collect(),
            equalities: Vec::new(),
        }
    }
}

impl MomentMatrixJson {
    pub fn to_matrix(&self) -> Result<MomentMatrix> {
        let rows = self.entries.len();
        let mut m = DMatrix::zeros(rows, rows);
        for (i, row) in self.entries.iter().enumerate() {
            if row.len() != rows {
                return Err(Error::DimensionMismatch {
                    expected: rows,
                    got: row.len(),
                });
            }
            for (j, v) in row.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        MomentMatrix::from_entries(self.n, self.order, m)
    }

    pub fn from_matrix(m: &MomentMatrix) -> Self {
        let e = m.entries();
        MomentMatrixJson {
            n: m.nvars(),
            order: m.order(),
            entries: e.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

pub fn read_problem(path: &Path) -> Result<PopProblem> {
    read_json::<ProblemJson>(path)?.to_problem()
}

pub fn read_moment_matrix(path: &Path) -> Result<MomentMatrix> {
    read_json::<MomentMatrixJson>(path)?.to_matrix()
}

/// Constraint list of a problem file, used when certifying a bare moment matrix.
pub fn read_constraints(path: &Path) -> Result<Vec<Polynomial>> {
    Ok(read_problem(path)?.constraints().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn problem_round_trip() {
        let text = r#"{"variables": 2,
            "objective": [{"exponents": [0, 2], "coeff": 1.0}, {"exponents": [1, 0], "coeff": -12.0}],
            "inequalities": [[{"exponents": [1, 0], "coeff": 1.0}]],
            "equalities": [[{"exponents": [0, 1], "coeff": 1.0}, {"exponents": [0, 0], "coeff": -2.0}]]}"#;
        let pj: ProblemJson = serde_json::from_str(text).unwrap();
        let prob = pj.to_problem().unwrap();
        // the equality expands to two inequalities
        assert_eq!(prob.constraints().len(), 3);
        assert_eq!(prob.objective().evaluate(&[1.0, 3.0]).unwrap(), -3.0);
        let back = ProblemJson::from_problem(&prob).to_problem().unwrap();
        assert_eq!(back, prob);
    }

    #[test]
    fn matrix_round_trip() {
        let mj = MomentMatrixJson {
            n: 1,
            order: 1,
            entries: vec![vec![1.0, 0.5], vec![0.5, 2.0]],
        };
        let m = mj.to_matrix().unwrap();
        assert_eq!(MomentMatrixJson::from_matrix(&m), mj);
        let text = serde_json::to_string(&mj).unwrap();
        let again: MomentMatrixJson = serde_json::from_str(&text).unwrap();
        assert_eq!(again, mj);
    }

    #[test]
    fn ragged_rows_rejected() {
        let mj = MomentMatrixJson {
            n: 1,
            order: 1,
            entries: vec![vec![1.0, 0.5], vec![0.5]],
        };
        assert!(mj.to_matrix().is_err());
    }
}
