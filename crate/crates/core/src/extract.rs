//! Quadrature rules from commuting truncated multiplication operators, and
//! the optimality decision built on them.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gns::{certify_model, GnsModel, HankelStatus};
use crate::linalg::{self, SortedEigen};
use crate::moment::{hankel_groups, MomentMatrix};
use crate::poly::{MonomialBasis, Polynomial};
use crate::sdp::PopProblem;

/// Nodes and positive weights with `L(p) = sum_j weights[j] p(nodes[j])` on
/// the relevant degree range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `sum_j w_j V_d(a_j) V_d(a_j)^T`.
    pub fn moment_matrix(&self, basis: &MonomialBasis) -> DMatrix<f64> {
        let s = basis.len();
        let mut out = DMatrix::zeros(s, s);
        for (a, &w) in self.nodes.iter().zip(&self.weights) {
            let v = basis.evaluate(a);
            out += &v * v.transpose() * w;
        }
        out
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Tolerances shared by extraction and certification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative eigenvalue cutoff for numerical ranks.
    pub rank: f64,
    /// Relative tolerance of the generalized Hankel test, the commutator
    /// ranks and the diagonalization.
    pub hankel: f64,
    /// Relative constraint violation accepted at a node.
    pub feas: f64,
    /// Weights below this are dropped.
    pub weight: f64,
    /// Nodes closer than this are merged.
    pub separation: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rank: 1e-6,
            hankel: 1e-4,
            feas: 1e-4,
            weight: 1e-8,
            separation: 1e-6,
        }
    }
}

fn offdiag_max(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j {
                worst = worst.max(m[(i, j)].abs());
            }
        }
    }
    worst
}

/// Worst relative off-diagonal entry of `P^T M_i P` over all `i`.
fn diagonal_defect(ops: &[DMatrix<f64>], p: &DMatrix<f64>) -> f64 {
    ops.iter()
        .map(|m| offdiag_max(&(p.transpose() * m * p)) / linalg::spectral_norm(m).max(1.0))
        .fold(0.0, f64::max)
}

/// Jacobi sweeps with the closed-form Givens angle of Cardoso and Souloumiac,
/// reducing the total off-diagonal energy of `P^T M_i P`.
fn joint_diagonalize(ops: &[DMatrix<f64>], start: DMatrix<f64>) -> DMatrix<f64> {
    let r = start.nrows();
    let mut v = start;
    let mut mats: Vec<DMatrix<f64>> = ops.iter().map(|m| v.transpose() * m * &v).collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..r {
            for q in p + 1..r {
                let mut g = nalgebra::Matrix2::<f64>::zeros();
                for m in &mats {
                    let h = nalgebra::Vector2::new(m[(p, p)] - m[(q, q)], 2.0 * m[(p, q)]);
                    g += h * h.transpose();
                }
                let eig = nalgebra::SymmetricEigen::new(g);
                let idx = if eig.eigenvalues[0] >= eig.eigenvalues[1] { 0 } else { 1 };
                let mut x = eig.eigenvectors[(0, idx)];
                let mut y = eig.eigenvectors[(1, idx)];
                if x < 0.0 {
                    x = -x;
                    y = -y;
                }
                let c = ((x + 1.0) / 2.0).sqrt();
                let s = y / (2.0 * (x + 1.0)).sqrt();
                if s.abs() < 1e-15 {
                    continue;
                }
                rotated = true;
                for m in mats.iter_mut() {
                    apply_rotation(m, p, q, c, s);
                }
                for k in 0..r {
                    let vp = v[(k, p)];
                    let vq = v[(k, q)];
                    v[(k, p)] = c * vp + s * vq;
                    v[(k, q)] = -s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    v
}

/// `M <- R^T M R` for the Givens rotation with columns `p, q` mixed by `(c, s)`.
fn apply_rotation(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    let r = m.nrows();
    for k in 0..r {
        let mp = m[(k, p)];
        let mq = m[(k, q)];
        m[(k, p)] = c * mp + s * mq;
        m[(k, q)] = -s * mp + c * mq;
    }
    for k in 0..r {
        let mp = m[(p, k)];
        let mq = m[(q, k)];
        m[(p, k)] = c * mp + s * mq;
        m[(q, k)] = -s * mp + c * mq;
    }
}

/// Orthogonal `P` with every `P^T M_i P` diagonal within `tol` (relative to
/// `max(1, |M_i|)`).
///
/// Eigenvectors of a random combination `sum r_i M_i`, `r` uniform on the
/// sphere, are tried up to six times; then Jacobi sweeps take over from the
/// best of those.
pub fn simultaneous_diagonalize(ops: &[DMatrix<f64>], seed: u64, tol: f64) -> Result<DMatrix<f64>> {
    let Some(first) = ops.first() else {
        return Err(Error::InvalidInput("no operators to diagonalize".into()));
    };
    let r = first.nrows();
    if ops.iter().any(|m| m.nrows() != r || m.ncols() != r) {
        return Err(Error::DimensionMismatch {
            expected: r,
            got: ops.iter().map(|m| m.nrows()).find(|&x| x != r).unwrap_or(r),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for attempt in 0..6 {
        let mut dir: Vec<f64> = (0..ops.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        dir.iter_mut().for_each(|v| *v /= norm);
        let mut combo = DMatrix::zeros(r, r);
        for (m, w) in ops.iter().zip(&dir) {
            combo += m * *w;
        }
        let p = SortedEigen::new(&combo).vectors;
        let defect = diagonal_defect(ops, &p);
        if defect <= tol {
            return Ok(p);
        }
        log::debug!("random combination {attempt} leaves off-diagonal {defect:.3e}");
        if best.as_ref().is_none_or(|(d, _)| defect < *d) {
            best = Some((defect, p));
        }
    }
    let (_, start) = best.expect("at least one attempt");
    let p = joint_diagonalize(ops, start);
    let defect = diagonal_defect(ops, &p);
    if defect <= tol {
        Ok(p)
    } else {
        Err(Error::NumericalFailure(format!(
            "operators do not diagonalize jointly (off-diagonal {defect:.3e} > {tol:.1e})"
        )))
    }
}

/// Options for [`extract_quadrature`].
#[derive(Debug, Clone, Copy)]
pub struct ExtractOptions {
    pub seed: u64,
    pub tol: Tolerances,
    /// Polish nodes and weights by least squares against `M~`.
    pub refine: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            seed: 0,
            tol: Tolerances::default(),
            refine: true,
        }
    }
}

/// Reads nodes off the joint eigenvectors of the operators; weights are the
/// squared coordinates of the class of `1` in that eigenbasis.
pub fn extract_quadrature(model: &GnsModel, opts: &ExtractOptions) -> Result<QuadratureRule> {
    if model.dim() == 0 {
        return Err(Error::NumericalFailure("truncation space is trivial".into()));
    }
    let p = simultaneous_diagonalize(&model.op_matrices, opts.seed, opts.tol.hankel)?;
    let b = p.tr_mul(&model.unit_coords());
    let n = model.nvars();
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    let diag: Vec<DMatrix<f64>> = model.op_matrices.iter().map(|m| p.transpose() * m * &p).collect();
    for j in 0..model.dim() {
        let w = b[j] * b[j];
        if w < opts.tol.weight {
            log::debug!("dropping node {j} with weight {w:.3e}");
            continue;
        }
        nodes.push((0..n).map(|i| diag[i][(j, j)]).collect::<Vec<f64>>());
        weights.push(w);
    }
    let mut rule = merge_close(QuadratureRule { nodes, weights }, opts.tol.separation);
    if opts.refine {
        rule = refine_rule(rule, &model.m_tilde, model.source.basis());
    }
    sort_rule(&mut rule);
    Ok(rule)
}

fn merge_close(rule: QuadratureRule, sep: f64) -> QuadratureRule {
    let mut nodes: Vec<Vec<f64>> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for (a, w) in rule.nodes.into_iter().zip(rule.weights) {
        let hit = nodes
            .iter()
            .position(|b| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() < sep);
        match hit {
            Some(k) => {
                log::debug!("merging nodes closer than {sep:.1e}");
                let total = weights[k] + w;
                for (bi, ai) in nodes[k].iter_mut().zip(&a) {
                    *bi = (*bi * weights[k] + ai * w) / total;
                }
                weights[k] = total;
            }
            None => {
                nodes.push(a);
                weights.push(w);
            }
        }
    }
    QuadratureRule { nodes, weights }
}

fn sort_rule(rule: &mut QuadratureRule) {
    let mut order: Vec<usize> = (0..rule.len()).collect();
    order.sort_by(|&i, &j| {
        rule.nodes[i]
            .iter()
            .zip(&rule.nodes[j])
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    rule.nodes = order.iter().map(|&i| rule.nodes[i].clone()).collect();
    rule.weights = order.iter().map(|&i| rule.weights[i]).collect();
}

/// Values and first partial derivatives of every basis monomial at `x`.
fn monomials_with_gradient(basis: &MonomialBasis, x: &[f64]) -> (DVector<f64>, Vec<DVector<f64>>) {
    let n = basis.nvars();
    let s = basis.len();
    let mut val = DVector::zeros(s);
    let mut grad = vec![DVector::zeros(s); n];
    for (k, m) in basis.monomials().iter().enumerate() {
        let e = m.exponents();
        val[k] = m.evaluate(x);
        for l in 0..n {
            if e[l] == 0 {
                continue;
            }
            let mut d = e[l] as f64;
            for (i, &ei) in e.iter().enumerate() {
                let p = if i == l { ei - 1 } else { ei };
                d *= x[i].powi(p as i32);
            }
            grad[l][k] = d;
        }
    }
    (val, grad)
}

fn reconstruction_residual(rule: &QuadratureRule, target: &DMatrix<f64>, basis: &MonomialBasis) -> DVector<f64> {
    let s = basis.len();
    let recon = rule.moment_matrix(basis);
    let mut out = DVector::zeros(s * (s + 1) / 2);
    let mut k = 0;
    for i in 0..s {
        for j in i..s {
            out[k] = recon[(i, j)] - target[(i, j)];
            k += 1;
        }
    }
    out
}

/// Levenberg-Marquardt on `|sum_j w_j V(a_j) V(a_j)^T - M~|` over nodes and
/// weights. The extracted rule is only an eigenvalue estimate; on rounded
/// inputs the fit against all of `M~` recovers digits the first moments lack.
/// The result is kept only when it lowers the residual.
fn refine_rule(rule: QuadratureRule, target: &DMatrix<f64>, basis: &MonomialBasis) -> QuadratureRule {
    let r = rule.len();
    if r == 0 {
        return rule;
    }
    let n = basis.nvars();
    let s = basis.len();
    let npar = r * (n + 1);
    let mut current = rule.clone();
    let mut res = reconstruction_residual(&current, target, basis);
    let mut cost = res.norm_squared();
    let initial = cost;
    let mut mu: Option<f64> = None;
    for _ in 0..100 {
        let mut jac = DMatrix::zeros(res.len(), npar);
        for (t, (a, &w)) in current.nodes.iter().zip(&current.weights).enumerate() {
            let (v, grad) = monomials_with_gradient(basis, a);
            let mut k = 0;
            for i in 0..s {
                for j in i..s {
                    for l in 0..n {
                        jac[(k, t * (n + 1) + l)] = w * (grad[l][i] * v[j] + v[i] * grad[l][j]);
                    }
                    jac[(k, t * (n + 1) + n)] = v[i] * v[j];
                    k += 1;
                }
            }
        }
        let jtj = jac.tr_mul(&jac);
        let jtr = jac.tr_mul(&res);
        let damping = *mu.get_or_insert_with(|| 1e-3 * (0..npar).map(|i| jtj[(i, i)]).fold(0.0, f64::max));
        let mut improved = false;
        let mut lambda = damping;
        for _ in 0..20 {
            let mut sys = jtj.clone();
            for i in 0..npar {
                sys[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = sys.cholesky().map(|c| c.solve(&(-&jtr))) else {
                lambda *= 4.0;
                continue;
            };
            let mut trial = current.clone();
            for t in 0..r {
                for l in 0..n {
                    trial.nodes[t][l] += step[t * (n + 1) + l];
                }
                trial.weights[t] += step[t * (n + 1) + n];
            }
            if trial.weights.iter().any(|&w| w <= 0.0) {
                lambda *= 4.0;
                continue;
            }
            let trial_res = reconstruction_residual(&trial, target, basis);
            let trial_cost = trial_res.norm_squared();
            if trial_cost < cost {
                let gain = cost - trial_cost;
                current = trial;
                res = trial_res;
                cost = trial_cost;
                mu = Some(lambda / 3.0);
                improved = gain > 1e-15 * cost.max(1e-300);
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    if cost < initial {
        current
    } else {
        rule
    }
}

/// Errors of a rule against a moment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureCheck {
    /// `max |L(m) - sum_j w_j m(a_j)|` over monomials of degree `<= 2D-1`.
    pub low_degree: f64,
    /// The same over all monomials of degree `<= 2D`.
    pub full_degree: f64,
    /// `|M~ - sum_j w_j V_D(a_j) V_D(a_j)^T|_max`.
    pub reconstruction: f64,
}

/// Compares `rule` with the moments stored in `m` and with `m_tilde`.
pub fn verify_quadrature(m: &MomentMatrix, m_tilde: &DMatrix<f64>, rule: &QuadratureRule) -> QuadratureCheck {
    let basis = m.basis();
    let d = m.order();
    let mut low: f64 = 0.0;
    let mut full: f64 = 0.0;
    for (mono, cells) in hankel_groups(basis) {
        let lval = cells.iter().map(|&(i, j)| m.entries()[(i, j)]).sum::<f64>() / cells.len() as f64;
        let qval: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(a, w)| w * mono.evaluate(a))
            .sum();
        let err = (lval - qval).abs();
        full = full.max(err);
        if mono.degree() < 2 * d {
            low = low.max(err);
        }
    }
    let recon = linalg::max_abs(&(m_tilde - rule.moment_matrix(basis)));
    QuadratureCheck {
        low_degree: low,
        full_degree: full,
        reconstruction: recon,
    }
}

/// `dim T_L + ceil(max commutator rank / 2)`, a lower bound on the node count
/// of any quadrature rule for `L` on degree `2D-1`.
pub fn moller_bound(model: &GnsModel, tol: f64) -> usize {
    model.dim() + model.max_commutator_rank(tol).div_ceil(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: Vec<bool>,
    /// Largest `-p_i(a) / max(1, |p_i|_max)` over nodes and constraints, floored at 0.
    pub worst_violation: f64,
}

impl FeasibilityReport {
    pub fn all_feasible(&self) -> bool {
        self.feasible.iter().all(|&f| f)
    }
}

/// A node is feasible when `p_i(a) >= -tol * max(1, |p_i|_max)` for every constraint.
pub fn check_feasibility(nodes: &[Vec<f64>], constraints: &[Polynomial], tol: f64) -> Result<FeasibilityReport> {
    let mut worst: f64 = 0.0;
    let mut feasible = Vec::with_capacity(nodes.len());
    for a in nodes {
        let mut ok = true;
        for p in constraints {
            let v = -p.evaluate(a)? / p.max_abs_coeff().max(1.0);
            worst = worst.max(v);
            if v > tol {
                ok = false;
            }
        }
        feasible.push(ok);
    }
    Ok(FeasibilityReport {
        feasible,
        worst_violation: worst,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CertificateStatus {
    OptimalCertified,
    GaussianRuleFoundNodesInfeasible,
    GaussianRuleFoundDegreeGap,
    /// Extraction without a problem: the matrix is flat.
    Flat,
    /// Extraction without a problem: a rule was found but the matrix is not flat.
    GaussianRuleFound,
    Inconclusive,
    MollerExcluded,
}

impl CertificateStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CertificateStatus::OptimalCertified => "OptimalCertified",
            CertificateStatus::GaussianRuleFoundNodesInfeasible => "GaussianRuleFoundNodesInfeasible",
            CertificateStatus::GaussianRuleFoundDegreeGap => "GaussianRuleFoundDegreeGap",
            CertificateStatus::Flat => "Flat",
            CertificateStatus::GaussianRuleFound => "GaussianRuleFound",
            CertificateStatus::Inconclusive => "Inconclusive",
            CertificateStatus::MollerExcluded => "MollerExcluded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub status: CertificateStatus,
    pub relaxation_value: f64,
    pub hankel_status: Option<HankelStatus>,
    pub dim_t: usize,
    pub rank_m: usize,
    pub max_commutator_rank: usize,
    pub moller_lower_bound: Option<usize>,
    pub rule: Option<QuadratureRule>,
    pub quadrature: Option<QuadratureCheck>,
    pub feasibility: Option<FeasibilityReport>,
    /// `(L(X_1), ..., L(X_n))`.
    pub first_moments: Vec<f64>,
    pub diagnostics: Vec<String>,
}

/// Options for [`certify`] and [`certify_matrix`].
#[derive(Debug, Clone, Copy, Default)]
pub struct CertifyOptions {
    pub extract: ExtractOptions,
    /// Externally known upper bound on the number of minimizers.
    pub node_cap: Option<usize>,
}

struct Analysis {
    model: GnsModel,
    hankel: HankelStatus,
    cert: Certificate,
}

/// GNS model, Hankel status and the problem-independent parts of the certificate.
fn analyze(m: &MomentMatrix, value: f64, opts: &CertifyOptions) -> Result<Analysis> {
    let tol = opts.extract.tol;
    let model = GnsModel::new(m, tol.rank)?;
    let hc = certify_model(&model, tol.hankel)?;
    let mut diagnostics = Vec::new();
    if let Some(w) = hc.warning {
        diagnostics.push(w);
    }
    let first_moments = (0..m.nvars()).map(|i| m.entries()[(0, i + 1)]).collect();
    let cert = Certificate {
        status: CertificateStatus::Inconclusive,
        relaxation_value: value,
        hankel_status: Some(hc.status),
        dim_t: model.dim(),
        rank_m: model.rank_m,
        max_commutator_rank: hc.commutator_rank,
        moller_lower_bound: Some(model.dim() + hc.commutator_rank.div_ceil(2)),
        rule: None,
        quadrature: None,
        feasibility: None,
        first_moments,
        diagnostics,
    };
    Ok(Analysis {
        model,
        hankel: hc.status,
        cert,
    })
}

fn inconclusive(mut cert: Certificate, why: String) -> Certificate {
    cert.status = CertificateStatus::Inconclusive;
    cert.diagnostics.push(why);
    cert
}

/// Extracts and verifies a rule; `Err` carries the reason it is unusable.
fn extract_checked(
    an: &Analysis,
    m: &MomentMatrix,
    opts: &CertifyOptions,
) -> std::result::Result<(QuadratureRule, QuadratureCheck), String> {
    let tol = opts.extract.tol;
    let rule = extract_quadrature(&an.model, &opts.extract).map_err(|e| format!("extraction failed: {e}"))?;
    let check = verify_quadrature(m, &an.model.m_tilde, &rule);
    let limit = tol.hankel * linalg::unit_scale(m.entries());
    if check.low_degree > limit || check.reconstruction > tol.hankel * linalg::unit_scale(&an.model.m_tilde) {
        return Err(format!(
            "rule does not reproduce the moments (degree <= {}: {:.3e}, reconstruction: {:.3e})",
            2 * m.order() - 1,
            check.low_degree,
            check.reconstruction
        ));
    }
    Ok((rule, check))
}

/// Certificate for a moment matrix without an optimization problem: flat or
/// Gaussian rule found, or inconclusive. With `constraints`, node feasibility
/// is reported as a diagnostic.
pub fn certify_matrix(
    m: &MomentMatrix,
    constraints: Option<&[Polynomial]>,
    opts: &CertifyOptions,
) -> Result<Certificate> {
    let an = analyze(m, f64::NAN, opts)?;
    if an.hankel == HankelStatus::NotHankel {
        let cert = an.cert.clone();
        return Ok(inconclusive(
            cert,
            "modified moment matrix is not generalized Hankel".into(),
        ));
    }
    let mut cert = an.cert.clone();
    match extract_checked(&an, m, opts) {
        Ok((rule, check)) => {
            if let Some(cons) = constraints {
                let feas = check_feasibility(&rule.nodes, cons, opts.extract.tol.feas)?;
                if !feas.all_feasible() {
                    cert.diagnostics.push("some nodes violate the constraints".into());
                }
                cert.feasibility = Some(feas);
            }
            cert.status = if an.hankel == HankelStatus::Flat {
                CertificateStatus::Flat
            } else {
                CertificateStatus::GaussianRuleFound
            };
            cert.rule = Some(rule);
            cert.quadrature = Some(check);
            Ok(cert)
        }
        Err(why) => Ok(inconclusive(cert, why)),
    }
}

/// Decides whether the relaxation of degree `k` with moment block `m` and
/// value `value` is exact, and extracts minimizers when it is.
pub fn certify(prob: &PopProblem, m: &MomentMatrix, k: u32, value: f64, opts: &CertifyOptions) -> Result<Certificate> {
    let tol = opts.extract.tol;
    let an = analyze(m, value, opts)?;
    let mut cert = an.cert.clone();

    if an.hankel == HankelStatus::NotHankel {
        if let (Some(cap), Some(bound)) = (opts.node_cap, cert.moller_lower_bound) {
            if cap < bound {
                cert.status = CertificateStatus::MollerExcluded;
                cert.diagnostics.push(format!(
                    "any Gaussian rule needs at least {bound} nodes but at most {cap} minimizers exist"
                ));
                return Ok(cert);
            }
        }
        return Ok(inconclusive(
            cert,
            "modified moment matrix is not generalized Hankel".into(),
        ));
    }

    let deg_f = prob.objective().degree_or_zero();
    let even_gate = k.is_multiple_of(2) && deg_f < k;
    let odd_gate = !k.is_multiple_of(2) && deg_f + 2 <= k;
    let flat = an.hankel == HankelStatus::Flat;
    if !(even_gate || odd_gate || flat) {
        cert.status = CertificateStatus::GaussianRuleFoundDegreeGap;
        cert.diagnostics
            .push(format!("deg f = {deg_f} is too large for k = {k} without flatness"));
        if let Ok((rule, check)) = extract_checked(&an, m, opts) {
            cert.rule = Some(rule);
            cert.quadrature = Some(check);
        }
        return Ok(cert);
    }
    if odd_gate && !flat {
        cert.diagnostics.push(format!(
            "odd k = {k}: accepted by the deg f <= k-2 gate; the optimality argument is only proven for even k with deg f <= k-1"
        ));
    }

    let (rule, check) = match extract_checked(&an, m, opts) {
        Ok(x) => x,
        Err(why) => return Ok(inconclusive(cert, why)),
    };
    let feas = check_feasibility(&rule.nodes, prob.constraints(), tol.feas)?;
    let skip_feasibility = prob.constraints().is_empty() || prob.is_polyhedral();
    cert.feasibility = Some(feas.clone());
    cert.quadrature = Some(check);
    let nodes = rule.nodes.clone();
    cert.rule = Some(rule);

    if !skip_feasibility && !feas.all_feasible() {
        cert.status = CertificateStatus::GaussianRuleFoundNodesInfeasible;
        cert.diagnostics.push(format!(
            "{} of {} nodes violate the constraints (worst {:.3e})",
            feas.feasible.iter().filter(|&&f| !f).count(),
            nodes.len(),
            feas.worst_violation
        ));
        return Ok(cert);
    }
    if skip_feasibility {
        cert.diagnostics.push(if prob.constraints().is_empty() {
            "no constraints: nodes are minimizers without a feasibility check".into()
        } else {
            "all constraints are affine: nodes lie in the polyhedron".into()
        });
    }

    let limit = 10.0 * tol.hankel * value.abs().max(1.0);
    for a in &nodes {
        let fa = prob.objective().evaluate(a)?;
        if (fa - value).abs() > limit {
            return Ok(inconclusive(
                cert,
                format!("f at node {a:?} is {fa:.6} but the relaxation value is {value:.6}"),
            ));
        }
    }
    cert.status = CertificateStatus::OptimalCertified;
    Ok(cert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moment::{moment_matrix, MomentSequence};
    use approx::assert_abs_diff_eq;

    fn atomic(n: usize, d: u32, nodes: &[Vec<f64>], weights: &[f64]) -> MomentMatrix {
        moment_matrix(&MomentSequence::from_atoms(n, 2 * d, nodes, weights), d).unwrap()
    }

    fn elprimero() -> MomentMatrix {
        let nodes = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]];
        atomic(2, 2, &nodes, &[0.25; 4])
    }

    #[test]
    fn diagonalize_single_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let p = simultaneous_diagonalize(std::slice::from_ref(&m), 3, 1e-12).unwrap();
        assert!(offdiag_max(&(p.transpose() * &m * &p)) < 1e-12);
    }

    #[test]
    fn diagonal_inputs_give_signed_permutation() {
        let d1 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let d2 = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 2.0]));
        let p = simultaneous_diagonalize(&[d1, d2], 0, 1e-12).unwrap();
        for v in p.iter() {
            assert!(v.abs() < 1e-12 || (v.abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobi_diagonalizes_commuting_pair() {
        // shared eigenvectors, with the second matrix degenerate so that a
        // combination can collide; start from the identity
        let q = SortedEigen::new(&DMatrix::from_row_slice(
            3,
            3,
            &[2.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0],
        ))
        .vectors;
        let a = &q * DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 2.0])) * q.transpose();
        let b = &q * DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, -1.0, -1.0])) * q.transpose();
        let p = joint_diagonalize(&[a.clone(), b.clone()], DMatrix::identity(3, 3));
        assert!(diagonal_defect(&[a, b], &p) < 1e-10);
    }

    #[test]
    fn non_commuting_fails() {
        let x = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            simultaneous_diagonalize(&[x, z], 0, 1e-6),
            Err(Error::NumericalFailure(_))
        ));
    }

    fn expect_rule(rule: &QuadratureRule, nodes: &[(Vec<f64>, f64)], eps: f64) {
        assert_eq!(rule.len(), nodes.len(), "{rule:?}");
        for (a, w) in nodes {
            let k = rule
                .nodes
                .iter()
                .position(|b| b.iter().zip(a).all(|(x, y)| (x - y).abs() < eps))
                .unwrap_or_else(|| panic!("node {a:?} missing from {rule:?}"));
            assert_abs_diff_eq!(rule.weights[k], *w, epsilon = eps);
        }
    }

    #[test]
    fn elprimero_rule() {
        let m = elprimero();
        let model = GnsModel::new(&m, 1e-9).unwrap();
        let rule = extract_quadrature(&model, &ExtractOptions::default()).unwrap();
        let r = 6f64.sqrt() / 3.0;
        expect_rule(
            &rule,
            &[(vec![0.0, 1.0], 0.25), (vec![-r, 0.0], 0.375), (vec![r, 0.0], 0.375)],
            1e-9,
        );
        let check = verify_quadrature(&m, &model.m_tilde, &rule);
        assert!(check.low_degree < 1e-9);
        assert!(check.reconstruction < 1e-9);
        // L(X1^4) = 1/2 but the rule gives 1/3
        assert!(check.full_degree > 0.1);
    }

    #[test]
    fn single_atom_rule_is_exact() {
        let m = atomic(3, 2, &[vec![0.5, -1.0, 2.0]], &[1.0]);
        let model = GnsModel::new(&m, 1e-9).unwrap();
        let rule = extract_quadrature(&model, &ExtractOptions::default()).unwrap();
        let check = verify_quadrature(&m, &model.m_tilde, &rule);
        assert!(check.low_degree < 1e-12 && check.full_degree < 1e-12 && check.reconstruction < 1e-12);
        assert_eq!(moller_bound(&model, 1e-9), 1);
    }

    #[test]
    fn seeds_agree() {
        let nodes = vec![vec![0.1, 0.2], vec![-0.7, 0.4], vec![0.3, -0.9]];
        let m = atomic(2, 2, &nodes, &[0.2, 0.3, 0.5]);
        let model = GnsModel::new(&m, 1e-9).unwrap();
        let mut opts = ExtractOptions::default();
        let a = extract_quadrature(&model, &opts).unwrap();
        opts.seed = 12345;
        let b = extract_quadrature(&model, &opts).unwrap();
        for (x, y) in a.nodes.iter().zip(&b.nodes) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn refinement_recovers_rounded_point() {
        // rounding the moments of a single point to two decimals loses the
        // first moments' precision but not that of the large entries
        let a = vec![2.3295, 3.1785];
        let m = atomic(2, 3, std::slice::from_ref(&a), &[1.0]);
        let rounded = m.entries().map(|v| (v * 100.0).round() / 100.0);
        let m = MomentMatrix::from_entries(2, 3, rounded).unwrap();
        let model = GnsModel::new(&m, 1e-3).unwrap();
        let mut opts = ExtractOptions::default();
        opts.tol.hankel = 1e-2;
        let rule = extract_quadrature(&model, &opts).unwrap();
        assert!((rule.nodes[0][0] - a[0]).abs() < 1e-3, "{rule:?}");
        assert!((rule.nodes[0][1] - a[1]).abs() < 1e-3, "{rule:?}");
        opts.refine = false;
        let raw = extract_quadrature(&model, &opts).unwrap();
        assert!((raw.nodes[0][0] - 2.33).abs() < 1e-9);
    }

    fn spread_atoms(n: usize, count: usize, raw: &[f64], raw_w: &[f64]) -> Option<(Vec<Vec<f64>>, Vec<f64>)> {
        let nodes: Vec<Vec<f64>> = (0..count).map(|j| raw[j * n..(j + 1) * n].to_vec()).collect();
        for i in 0..count {
            for j in 0..i {
                let d: f64 = nodes[i]
                    .iter()
                    .zip(&nodes[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if d < 0.3 {
                    return None;
                }
            }
        }
        let total: f64 = raw_w[..count].iter().sum();
        Some((nodes, raw_w[..count].iter().map(|w| w / total).collect()))
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        #[test]
        fn atomic_forms_respect_bounds(
            n in 1usize..=3,
            d in 2u32..=3,
            count in 1usize..=12,
            raw in proptest::collection::vec(-1.0f64..1.0, 36),
            raw_w in proptest::collection::vec(0.2f64..1.0, 12),
            seed in 0u64..1000,
        ) {
            let Some((nodes, weights)) = spread_atoms(n, count, &raw, &raw_w) else {
                return Ok(());
            };
            let m = atomic(n, d, &nodes, &weights);
            let model = GnsModel::new(&m, 1e-9).unwrap();
            // rank M <= N and the node lower bound never exceeds N
            proptest::prop_assert!(model.rank_m <= count);
            proptest::prop_assert!(moller_bound(&model, 1e-6) <= count);
            if model.max_commutator_rank(1e-6) == 0 {
                let a = extract_quadrature(&model, &ExtractOptions { seed, ..ExtractOptions::default() }).unwrap();
                let b = extract_quadrature(&model, &ExtractOptions { seed: seed + 1, ..ExtractOptions::default() }).unwrap();
                proptest::prop_assert_eq!(a.len(), b.len());
                proptest::prop_assert_eq!(a.len(), model.dim());
                for (x, y) in a.nodes.iter().zip(&b.nodes) {
                    for (u, v) in x.iter().zip(y) {
                        proptest::prop_assert!((u - v).abs() < 1e-6);
                    }
                }
                proptest::prop_assert!((a.total_weight() - 1.0).abs() < 1e-8);
                if model.flat {
                    let check = verify_quadrature(&m, &model.m_tilde, &a);
                    proptest::prop_assert!(check.full_degree < 1e-8, "{:?}", check);
                }
            }
        }
    }

    #[test]
    fn feasibility_checks() {
        let x = Polynomial::var(2, 0);
        let report = check_feasibility(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &[x], 1e-9).unwrap();
        assert_eq!(report.feasible, vec![true, false]);
        assert_abs_diff_eq!(report.worst_violation, 1.0);
        assert!(check_feasibility(&[vec![5.0, 5.0]], &[], 1e-9).unwrap().all_feasible());
    }

    #[test]
    fn unconstrained_point_certifies() {
        let prob = PopProblem::new(
            1,
            Polynomial::from_terms(1, [(vec![2], 1.0), (vec![1], -2.0), (vec![0], 1.0)]).unwrap(),
            vec![],
        )
        .unwrap();
        let m = atomic(1, 1, &[vec![1.0]], &[1.0]);
        let cert = certify(&prob, &m, 2, 0.0, &CertifyOptions::default()).unwrap();
        assert_eq!(cert.status, CertificateStatus::OptimalCertified, "{cert:?}");
        assert_eq!(cert.first_moments, vec![1.0]);
    }

    #[test]
    fn degree_gate() {
        let prob = PopProblem::new(1, Polynomial::from_terms(1, [(vec![2], 1.0)]).unwrap(), vec![]).unwrap();
        // k = 2 with deg f = 2 and a non-flat matrix
        let m = atomic(1, 1, &[vec![1.0], vec![-1.0]], &[0.5, 0.5]);
        let cert = certify(&prob, &m, 2, 1.0, &CertifyOptions::default()).unwrap();
        assert_eq!(cert.status, CertificateStatus::GaussianRuleFoundDegreeGap);
        // k = 3: odd gate needs deg f <= 1
        let cert = certify(&prob, &m, 3, 1.0, &CertifyOptions::default()).unwrap();
        assert_eq!(cert.status, CertificateStatus::GaussianRuleFoundDegreeGap);
    }
}
