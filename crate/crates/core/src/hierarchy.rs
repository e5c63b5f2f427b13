//! The relaxation loop: solve `(P_k)` for increasing `k` until a level certifies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{
    certify, Certificate, CertificateStatus, CertifyOptions, ExtractOptions, QuadratureRule, Tolerances,
};
use crate::moment::moment_matrix;
use crate::sdp::{assemble_relaxation, solve_sdp, PopProblem, SdpOptions, SdpStatus};

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Defaults to the largest degree among objective and constraints.
    pub k_start: Option<u32>,
    /// Defaults to `k_start + 6`.
    pub k_max: Option<u32>,
    pub tol: Tolerances,
    /// Relative duality gap accepted from the solver.
    pub gap_tol: f64,
    pub seed: u64,
    pub refine: bool,
    pub sdp: SdpOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            k_start: None,
            k_max: None,
            tol: Tolerances::default(),
            gap_tol: 1e-8,
            seed: 0,
            refine: true,
            sdp: SdpOptions::default(),
        }
    }
}

impl RunConfig {
    /// `(k_start, k_max)` after defaults, checked against the problem.
    pub fn levels(&self, prob: &PopProblem) -> Result<(u32, u32)> {
        let required = prob.max_degree().max(1);
        let start = self.k_start.unwrap_or(required);
        if start < required {
            return Err(Error::RelaxationDegreeTooLow { k: start, required });
        }
        let end = self.k_max.unwrap_or(start + 6);
        if end < start {
            return Err(Error::InvalidInput(format!("k_max = {end} is below k_start = {start}")));
        }
        Ok((start, end))
    }

    fn certify_options(&self) -> CertifyOptions {
        CertifyOptions {
            extract: ExtractOptions {
                seed: self.seed,
                tol: self.tol,
                refine: self.refine,
            },
            node_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub k: u32,
    pub relaxation_value: f64,
    pub sdp_status: SdpStatus,
    pub iterations: usize,
    pub duality_gap: f64,
    /// `None` when the solver did not return a usable point.
    pub certificate: Option<Certificate>,
    pub diagnostics: Vec<String>,
}

impl LevelRecord {
    pub fn status(&self) -> CertificateStatus {
        self.certificate
            .as_ref()
            .map_or(CertificateStatus::Inconclusive, |c| c.status)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub levels: Vec<LevelRecord>,
    pub status: CertificateStatus,
    /// Value of the certified level, or the best lower bound seen.
    pub value: Option<f64>,
    pub certified_order: Option<u32>,
    pub rule: Option<QuadratureRule>,
    /// `(L(X_1), ..., L(X_n))` of the last usable level.
    pub first_moments: Option<Vec<f64>>,
    /// False when the first moments are only a heuristic guess.
    pub first_moments_certified: bool,
}

/// Assembles, solves and certifies `(P_k)` for one `k`.
pub fn run_level(prob: &PopProblem, k: u32, cfg: &RunConfig) -> Result<LevelRecord> {
    let sdp = assemble_relaxation(prob, k)?;
    let opts = SdpOptions {
        gap_tol: cfg.gap_tol,
        ..cfg.sdp
    };
    let sol = solve_sdp(&sdp, &opts);
    let mut record = LevelRecord {
        k,
        relaxation_value: sol.objective_value,
        sdp_status: sol.status,
        iterations: sol.iterations,
        duality_gap: sol.duality_gap,
        certificate: None,
        diagnostics: Vec::new(),
    };
    if sol.status != SdpStatus::Optimal {
        record.diagnostics.push(format!("solver stopped with {:?}", sol.status));
        return Ok(record);
    }
    let m = moment_matrix(&sol.y, k / 2)?;
    match certify(prob, &m, k, sol.objective_value, &cfg.certify_options()) {
        Ok(cert) => record.certificate = Some(cert),
        Err(e) => record.diagnostics.push(format!("certificate failed: {e}")),
    }
    Ok(record)
}

/// Runs levels `k_start..=k_max`, stopping at the first certified one.
pub fn run_hierarchy(prob: &PopProblem, cfg: &RunConfig) -> Result<RunReport> {
    let (start, end) = cfg.levels(prob)?;
    let mut levels = Vec::new();
    let mut last_err = None;
    for k in start..=end {
        let record = match run_level(prob, k, cfg) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("level {k}: {e}");
                last_err = Some(e);
                continue;
            }
        };
        log::info!(
            "k = {k}: value {:.6} ({:?}), certificate {}",
            record.relaxation_value,
            record.sdp_status,
            record.status().as_str()
        );
        let done = record.status() == CertificateStatus::OptimalCertified;
        levels.push(record);
        if done {
            break;
        }
    }
    if levels.is_empty() {
        return Err(last_err.unwrap_or_else(|| Error::NumericalFailure("no relaxation level ran".into())));
    }

    let last_cert = levels.iter().rev().find_map(|l| l.certificate.as_ref());
    let first_moments = last_cert.map(|c| c.first_moments.clone());
    let report = match levels.last() {
        Some(l) if l.status() == CertificateStatus::OptimalCertified => {
            let cert = l.certificate.as_ref().expect("certified level has a certificate");
            RunReport {
                status: CertificateStatus::OptimalCertified,
                value: Some(l.relaxation_value),
                certified_order: Some(l.k),
                rule: cert.rule.clone(),
                first_moments_certified: cert.rule.as_ref().is_some_and(|r| r.len() == 1),
                first_moments,
                levels,
            }
        }
        _ => {
            let best = levels
                .iter()
                .filter(|l| l.sdp_status == SdpStatus::Optimal)
                .map(|l| l.relaxation_value)
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
            RunReport {
                status: CertificateStatus::Inconclusive,
                value: best,
                certified_order: None,
                rule: None,
                first_moments,
                first_moments_certified: false,
                levels,
            }
        }
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::Polynomial;

    fn square_shifted(c: f64) -> PopProblem {
        let f = Polynomial::from_terms(1, [(vec![2], 1.0), (vec![1], -2.0 * c), (vec![0], c * c)]).unwrap();
        PopProblem::new(1, f, vec![]).unwrap()
    }

    #[test]
    fn levels_default_and_reject() {
        let prob = square_shifted(0.0);
        let cfg = RunConfig::default();
        assert_eq!(cfg.levels(&prob).unwrap(), (2, 8));
        let bad = RunConfig {
            k_start: Some(1),
            ..RunConfig::default()
        };
        assert!(matches!(bad.levels(&prob), Err(Error::RelaxationDegreeTooLow { .. })));
        let inverted = RunConfig {
            k_start: Some(4),
            k_max: Some(3),
            ..RunConfig::default()
        };
        assert!(inverted.levels(&prob).is_err());
    }

    #[test]
    fn unconstrained_square_certifies() {
        // k = 2 with deg f = 2 needs flatness; one point measure is flat
        for c in [0.0, 1.0] {
            let report = run_hierarchy(&square_shifted(c), &RunConfig::default()).unwrap();
            assert_eq!(report.status, CertificateStatus::OptimalCertified, "{report:?}");
            assert!(report.value.unwrap().abs() < 1e-6);
            let rule = report.rule.unwrap();
            assert_eq!(rule.len(), 1);
            assert!((rule.nodes[0][0] - c).abs() < 1e-3, "{rule:?}");
        }
    }

    #[test]
    fn unbounded_stops_without_certificate() {
        let f = Polynomial::from_terms(1, [(vec![3], 1.0)]).unwrap();
        let prob = PopProblem::new(1, f, vec![]).unwrap();
        let cfg = RunConfig {
            k_max: Some(4),
            ..RunConfig::default()
        };
        let report = run_hierarchy(&prob, &cfg).unwrap();
        assert_eq!(report.status, CertificateStatus::Inconclusive);
        assert!(report.levels.iter().all(|l| l.certificate.is_none()));
    }
}
