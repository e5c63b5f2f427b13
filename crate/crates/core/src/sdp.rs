//! Moment relaxations as semidefinite programs, and a dense primal-dual
//! interior-point solver for them.
//!
//! The relaxation of degree `k` minimizes `sum_alpha f_alpha y_alpha` over
//! pseudo-moment vectors with `y_0 = 1`, a PSD moment matrix of order
//! `floor(k/2)` and one PSD localizing matrix per constraint. Writing
//! `y = e_0 + sum_i z_i e_{alpha_i}` puts this in the standard dual form
//!
//! ```text
//!   max  b^T z   s.t.  S = C - sum_i z_i A_i  (PSD, block diagonal)
//! ```
//!
//! with `b_i = -f_{alpha_i}`, `C` the `y_0` coefficient matrices and
//! `A_i = -F_{alpha_i}`. The paired primal `min <C, X>, A(X) = b, X PSD`
//! is the sums-of-squares side. Both are solved together by an infeasible
//! path-following method with Nesterov-Todd scaling and Mehrotra's
//! predictor-corrector.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, SortedEigen};
use crate::moment::{localizing_order, MomentSequence};
use crate::poly::{Monomial, MonomialBasis, Polynomial};

/// `minimize f(x) subject to p_i(x) >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopProblem {
    n: usize,
    objective: Polynomial,
    constraints: Vec<Polynomial>,
}

impl PopProblem {
    pub fn new(n: usize, objective: Polynomial, constraints: Vec<Polynomial>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("at least one variable is required".into()));
        }
        for p in std::iter::once(&objective).chain(&constraints) {
            if p.nvars() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: p.nvars(),
                });
            }
        }
        Ok(PopProblem {
            n,
            objective,
            constraints,
        })
    }

    /// Equalities `g = 0` become the pair `g >= 0`, `-g >= 0`, placed
    /// before the inequalities.
    pub fn with_equalities(
        n: usize,
        objective: Polynomial,
        inequalities: Vec<Polynomial>,
        equalities: &[Polynomial],
    ) -> Result<Self> {
        let mut constraints = Vec::with_capacity(inequalities.len() + 2 * equalities.len());
        for g in equalities {
            constraints.push(g.clone());
            constraints.push(-g);
        }
        constraints.extend(inequalities);
        PopProblem::new(n, objective, constraints)
    }

    pub fn nvars(&self) -> usize {
        self.n
    }

    pub fn objective(&self) -> &Polynomial {
        &self.objective
    }

    pub fn constraints(&self) -> &[Polynomial] {
        &self.constraints
    }

    /// Largest degree among the objective and the constraints.
    pub fn max_degree(&self) -> u32 {
        std::iter::once(&self.objective)
            .chain(&self.constraints)
            .map(Polynomial::degree_or_zero)
            .max()
            .unwrap_or(0)
    }

    /// Every constraint has degree at most one, so the feasible set is a polyhedron.
    pub fn is_polyhedral(&self) -> bool {
        self.constraints.iter().all(|p| p.degree_or_zero() <= 1)
    }

    pub fn is_feasible(&self, x: &[f64], tol: f64) -> Result<bool> {
        for p in &self.constraints {
            if p.evaluate(x)? < -tol * p.max_abs_coeff().max(1.0) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// One PSD block `F_0 + sum_alpha y_alpha F_alpha`, stored sparsely by
/// decision-vector index.
#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub label: String,
    pub side: usize,
    /// `(index into the degree-k basis, coefficient matrix)`, index 0 being `y_0`.
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

impl LmiBlock {
    pub fn evaluate(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.side, self.side);
        for (i, f) in &self.terms {
            out += f * y[*i];
        }
        out
    }
}

/// The relaxation `(P_k)` in linear-matrix-inequality form.
#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub k: u32,
    pub basis: MonomialBasis,
    /// `c_alpha = f_alpha` over the degree-k basis.
    pub cost: DVector<f64>,
    /// Block 0 is the moment matrix; then one localizing block per constraint.
    pub blocks: Vec<LmiBlock>,
}

impl SdpProblem {
    pub fn nvars(&self) -> usize {
        self.basis.len()
    }

    pub fn block_sides(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.side).collect()
    }

    /// Smallest eigenvalue of each block at `y`.
    pub fn block_min_eigenvalues(&self, y: &DVector<f64>) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| SortedEigen::new(&b.evaluate(y)).min())
            .collect()
    }
}

fn lmi_block(label: String, basis: &MonomialBasis, p: &Polynomial, order: u32) -> LmiBlock {
    let local = MonomialBasis::new(basis.nvars(), order);
    let side = local.len();
    let mut mats: Vec<Option<DMatrix<f64>>> = vec![None; basis.len()];
    for i in 0..side {
        for j in i..side {
            let ab = local.get(i).mul(local.get(j));
            for (g, c) in p.terms() {
                let idx = basis
                    .index_of(&ab.mul(g))
                    .expect("localizing degree within relaxation degree");
                let mat = mats[idx].get_or_insert_with(|| DMatrix::zeros(side, side));
                mat[(i, j)] += c;
                if i != j {
                    mat[(j, i)] += c;
                }
            }
        }
    }
    let terms = mats
        .into_iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|m| (i, m)))
        .collect();
    LmiBlock { label, side, terms }
}

/// Builds the moment relaxation of degree `k`.
pub fn assemble_relaxation(prob: &PopProblem, k: u32) -> Result<SdpProblem> {
    let required = prob.max_degree().max(1);
    if k < required {
        return Err(Error::RelaxationDegreeTooLow { k, required });
    }
    let n = prob.nvars();
    let basis = MonomialBasis::new(n, k);
    let mut cost = DVector::zeros(basis.len());
    for (m, c) in prob.objective().terms() {
        cost[basis.index_of(m).expect("objective degree checked")] = c;
    }
    let one = Polynomial::constant(n, 1.0);
    let mut blocks = vec![lmi_block("moment".into(), &basis, &one, k / 2)];
    for (i, p) in prob.constraints().iter().enumerate() {
        blocks.push(lmi_block(
            format!("localizing[{i}]"),
            &basis,
            p,
            localizing_order(p, k)?,
        ));
    }
    Ok(SdpProblem { k, basis, cost, blocks })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SdpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SdpOptions {
    pub max_iter: usize,
    /// Relative duality gap target.
    pub gap_tol: f64,
    /// Relative primal and dual infeasibility target.
    pub feas_tol: f64,
    /// Upper bound of the fraction of the distance to the boundary taken per step.
    pub max_step_fraction: f64,
    /// Iterations without progress, once the gap is below `stall_gap`, before
    /// the current point is accepted.
    pub stall_iters: usize,
    pub stall_gap: f64,
    /// Objective magnitude treated as infinite.
    pub divergence_bound: f64,
}

impl Default for SdpOptions {
    fn default() -> Self {
        SdpOptions {
            max_iter: 200,
            gap_tol: 1e-8,
            feas_tol: 1e-8,
            max_step_fraction: 0.99,
            stall_iters: 20,
            stall_gap: 1e-6,
            divergence_bound: 1e12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub y: MomentSequence,
    /// `sum_alpha f_alpha y_alpha`.
    pub objective_value: f64,
    pub status: SdpStatus,
    /// Relative duality gap at the returned point.
    pub duality_gap: f64,
    /// Relative residual of the linear-matrix-inequality side.
    pub moment_infeasibility: f64,
    /// Relative residual of the sums-of-squares side.
    pub sos_infeasibility: f64,
    pub iterations: usize,
}

/// Standard-form data: `C`, `A_i` per block and `b`.
struct StdForm {
    c: Vec<DMatrix<f64>>,
    /// `a[block][i]`, `None` when `A_i` vanishes on the block.
    a: Vec<Vec<Option<DMatrix<f64>>>>,
    b: DVector<f64>,
    /// Offset `f_0` of the relaxation objective.
    f0: f64,
}

impl StdForm {
    fn new(sdp: &SdpProblem) -> Self {
        let m = sdp.nvars() - 1;
        let mut c = Vec::new();
        let mut a = Vec::new();
        for blk in &sdp.blocks {
            let mut cb = DMatrix::zeros(blk.side, blk.side);
            let mut ab: Vec<Option<DMatrix<f64>>> = vec![None; m];
            for (idx, f) in &blk.terms {
                if *idx == 0 {
                    cb += f;
                } else {
                    ab[idx - 1] = Some(-f);
                }
            }
            c.push(cb);
            a.push(ab);
        }
        let b = -sdp.cost.rows(1, m).into_owned();
        StdForm {
            c,
            a,
            b,
            f0: sdp.cost[0],
        }
    }

    fn m(&self) -> usize {
        self.b.len()
    }

    /// `A(X)_i = sum_blocks <A_i, X>`.
    fn apply(&self, x: &[DMatrix<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.m());
        for (blk, xb) in self.a.iter().zip(x) {
            for (i, ai) in blk.iter().enumerate() {
                if let Some(ai) = ai {
                    out[i] += ai.dot(xb);
                }
            }
        }
        out
    }

    /// `A^T z = sum_i z_i A_i`, block by block.
    fn adjoint(&self, z: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.a
            .iter()
            .zip(&self.c)
            .map(|(blk, cb)| {
                let mut out = DMatrix::zeros(cb.nrows(), cb.ncols());
                for (i, ai) in blk.iter().enumerate() {
                    if let Some(ai) = ai {
                        out += ai * z[i];
                    }
                }
                out
            })
            .collect()
    }
}

fn frob(blocks: &[DMatrix<f64>]) -> f64 {
    blocks.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
}

fn inner(x: &[DMatrix<f64>], s: &[DMatrix<f64>]) -> f64 {
    x.iter().zip(s).map(|(a, b)| a.dot(b)).sum()
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Nesterov-Todd scaling of one block: `W = G G^T` with `G^{-1} X G^{-T} = G^T S G = D`.
struct NtScaling {
    g: DMatrix<f64>,
    g_inv: DMatrix<f64>,
    d: DVector<f64>,
    w: DMatrix<f64>,
}

impl NtScaling {
    fn new(x: &DMatrix<f64>, s: &DMatrix<f64>) -> Option<Self> {
        let lx = Cholesky::new(x.clone())?.l();
        let ls = Cholesky::new(s.clone())?.l();
        let svd = (ls.transpose() * &lx).svd(false, true);
        let vt = svd.v_t?;
        let d = svd.singular_values;
        if d.iter().any(|&v| !v.is_finite() || v <= 0.0) {
            return None;
        }
        let inv_sqrt = DMatrix::from_diagonal(&d.map(|v| 1.0 / v.sqrt()));
        let sqrt = DMatrix::from_diagonal(&d.map(f64::sqrt));
        let g = &lx * vt.transpose() * inv_sqrt;
        let lx_inv = lx.clone().try_inverse()?;
        let g_inv = sqrt * &vt * lx_inv;
        let w = sym(&g * g.transpose());
        Some(NtScaling { g, g_inv, d, w })
    }

    /// `G L_D^{-1}(R) G^T` where `L_D(Z) = (D Z + Z D) / 2`.
    fn unscale_lyapunov(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.d.len();
        let mut z = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                z[(i, j)] = 2.0 * r[(i, j)] / (self.d[i] + self.d[j]);
            }
        }
        sym(&self.g * z * self.g.transpose())
    }
}

/// Largest `alpha` with `X + alpha dX` PSD (capped at `f64::MAX`).
fn max_step(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> f64 {
    let Some(chol) = Cholesky::new(x.clone()) else {
        return 0.0;
    };
    let l = chol.l();
    let Some(l_inv) = l.try_inverse() else {
        return 0.0;
    };
    let t = sym(&l_inv * dx * l_inv.transpose());
    let min = SortedEigen::new(&t).min();
    if min >= 0.0 {
        f64::MAX
    } else {
        -1.0 / min
    }
}

struct Direction {
    dz: DVector<f64>,
    dx: Vec<DMatrix<f64>>,
    ds: Vec<DMatrix<f64>>,
}

struct SchurSystem {
    factor: Cholesky<f64, nalgebra::Dyn>,
}

impl SchurSystem {
    fn new(data: &StdForm, scal: &[NtScaling]) -> Option<Self> {
        let m = data.m();
        let mut schur = DMatrix::zeros(m, m);
        for (blk, sc) in data.a.iter().zip(scal) {
            let present: Vec<usize> = (0..m).filter(|&i| blk[i].is_some()).collect();
            for &j in &present {
                let waw = &sc.w * blk[j].as_ref().unwrap() * &sc.w;
                for &i in &present {
                    if i <= j {
                        schur[(i, j)] += blk[i].as_ref().unwrap().dot(&waw);
                    }
                }
            }
        }
        for j in 0..m {
            for i in 0..j {
                schur[(j, i)] = schur[(i, j)];
            }
        }
        let diag_max = (0..m).map(|i| schur[(i, i)]).fold(0.0, f64::max).max(1e-300);
        if let Some(f) = Cholesky::new(schur.clone()) {
            return Some(SchurSystem { factor: f });
        }
        // the Schur matrix loses definiteness near degenerate optimal faces
        for shift in [1e-14, 1e-12, 1e-10, 1e-8] {
            let mut reg = schur.clone();
            for i in 0..m {
                reg[(i, i)] += shift * diag_max;
            }
            if let Some(f) = Cholesky::new(reg) {
                return Some(SchurSystem { factor: f });
            }
        }
        None
    }
}

fn solve_direction(
    data: &StdForm,
    scal: &[NtScaling],
    schur: &SchurSystem,
    rp: &DVector<f64>,
    rd: &[DMatrix<f64>],
    rc: &[DMatrix<f64>],
) -> Direction {
    let w_rd_w: Vec<DMatrix<f64>> = scal.iter().zip(rd).map(|(sc, r)| &sc.w * r * &sc.w).collect();
    let rhs = rp - data.apply(rc) + data.apply(&w_rd_w);
    let dz = schur.factor.solve(&rhs);
    let atdz = data.adjoint(&dz);
    let ds: Vec<DMatrix<f64>> = rd.iter().zip(&atdz).map(|(r, a)| r - a).collect();
    let dx: Vec<DMatrix<f64>> = rc
        .iter()
        .zip(&ds)
        .zip(scal)
        .map(|((c, s), sc)| sym(c - &sc.w * s * &sc.w))
        .collect();
    Direction { dz, dx, ds }
}

fn step_lengths(x: &[DMatrix<f64>], s: &[DMatrix<f64>], dir: &Direction) -> (f64, f64) {
    let ap = x
        .iter()
        .zip(&dir.dx)
        .map(|(a, d)| max_step(a, d))
        .fold(f64::MAX, f64::min);
    let ad = s
        .iter()
        .zip(&dir.ds)
        .map(|(a, d)| max_step(a, d))
        .fold(f64::MAX, f64::min);
    (ap, ad)
}

/// Merit, dual iterate, (gap, primal, dual infeasibility) and iteration.
type BestIterate = (f64, DVector<f64>, (f64, f64, f64), usize);

/// Solves the relaxation. Never panics on numerical trouble; the outcome is
/// reported through [`SdpSolution::status`].
pub fn solve_sdp(sdp: &SdpProblem, opts: &SdpOptions) -> SdpSolution {
    let data = StdForm::new(sdp);
    let m = data.m();
    let sides = sdp.block_sides();
    let ntotal: usize = sides.iter().sum();

    let norm_c = frob(&data.c);
    let norm_b = data.b.norm();
    let max_a = data
        .a
        .iter()
        .flat_map(|blk| blk.iter().flatten())
        .map(|a| a.norm())
        .fold(0.0, f64::max);

    // y = e_0 shifted into the interior: S = C + mu I
    let mu0 = 1.0 + data.c.iter().map(|c| c.norm()).fold(0.0, f64::max).max(max_a);
    let mut z = DVector::zeros(m);
    let mut s: Vec<DMatrix<f64>> = data
        .c
        .iter()
        .map(|c| c + DMatrix::identity(c.nrows(), c.ncols()) * mu0)
        .collect();
    let xi = (ntotal as f64).sqrt().max(10.0).max(
        data.b
            .iter()
            .map(|bi| (1.0 + bi.abs()) / (1.0 + max_a))
            .fold(0.0, f64::max)
            * ntotal as f64,
    );
    let mut x: Vec<DMatrix<f64>> = sides.iter().map(|&n| DMatrix::identity(n, n) * xi).collect();

    let mut status = SdpStatus::MaxIterations;
    let mut iterations = 0;
    let mut best_gap = f64::INFINITY;
    let mut since_best = 0usize;
    let mut last = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    // the iterate with the smallest merit; near unbounded optimal faces the
    // residuals can drift upward again once the gap is closed
    let mut best: Option<BestIterate> = None;

    for iter in 0..opts.max_iter {
        iterations = iter;
        let atz = data.adjoint(&z);
        let rp = &data.b - data.apply(&x);
        let rd: Vec<DMatrix<f64>> = data.c.iter().zip(&s).zip(&atz).map(|((c, sb), a)| c - sb - a).collect();
        let pobj = inner(&data.c, &x);
        let dobj = data.b.dot(&z);
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
        let pinf = rp.norm() / (1.0 + norm_b);
        let dinf = frob(&rd) / (1.0 + norm_c);
        last = (gap, dinf, pinf);
        log::debug!("iter {iter}: pobj {pobj:.9e} dobj {dobj:.9e} gap {gap:.2e} pinf {pinf:.2e} dinf {dinf:.2e}");

        if gap <= opts.gap_tol && pinf <= opts.feas_tol && dinf <= opts.feas_tol {
            status = SdpStatus::Optimal;
            break;
        }
        if dobj > opts.divergence_bound && dinf <= opts.stall_gap.sqrt() {
            status = SdpStatus::Unbounded;
            break;
        }
        if pobj < -opts.divergence_bound && pinf <= opts.stall_gap.sqrt() {
            status = SdpStatus::Infeasible;
            break;
        }
        let merit = gap.max(pinf).max(dinf);
        if best.as_ref().is_none_or(|b| merit < b.0) {
            best = Some((merit, z.clone(), last, iter));
        }
        if merit < best_gap * 0.9 {
            best_gap = merit;
            since_best = 0;
        } else {
            since_best += 1;
        }
        if best_gap <= opts.stall_gap && since_best >= opts.stall_iters {
            // resolved to the best iterate below
            status = SdpStatus::MaxIterations;
            break;
        }

        let Some(scal) = x
            .iter()
            .zip(&s)
            .map(|(xb, sb)| NtScaling::new(xb, sb))
            .collect::<Option<Vec<_>>>()
        else {
            status = SdpStatus::NumericalFailure;
            break;
        };
        let Some(schur) = SchurSystem::new(&data, &scal) else {
            status = SdpStatus::NumericalFailure;
            break;
        };
        let mu = inner(&x, &s) / ntotal as f64;

        // predictor
        let rc_aff: Vec<DMatrix<f64>> = x.iter().map(|xb| -xb).collect();
        let aff = solve_direction(&data, &scal, &schur, &rp, &rd, &rc_aff);
        let (ap, ad) = step_lengths(&x, &s, &aff);
        let ap = ap.min(1.0);
        let ad = ad.min(1.0);
        let mu_aff: f64 = x
            .iter()
            .zip(&aff.dx)
            .zip(s.iter().zip(&aff.ds))
            .map(|((xb, dxb), (sb, dsb))| (xb + dxb * ap).dot(&(sb + dsb * ad)))
            .sum::<f64>()
            / ntotal as f64;
        let ratio = (mu_aff / mu).clamp(0.0, 1.0);
        let expon = if ap.min(ad) > 0.3 { 3.0 } else { 2.0 };
        let sigma = ratio.powf(expon).max(if pinf.max(dinf) > gap { 1e-3 } else { 0.0 });

        // corrector
        let rc: Vec<DMatrix<f64>> = scal
            .iter()
            .zip(aff.dx.iter().zip(&aff.ds))
            .map(|(sc, (dxb, dsb))| {
                let n = sc.d.len();
                let dxs = &sc.g_inv * dxb * sc.g_inv.transpose();
                let dss = sc.g.transpose() * dsb * &sc.g;
                let second = sym(dxs * dss);
                let mut r = -second;
                for i in 0..n {
                    r[(i, i)] += sigma * mu - sc.d[i] * sc.d[i];
                }
                sc.unscale_lyapunov(&r)
            })
            .collect();
        let dir = solve_direction(&data, &scal, &schur, &rp, &rd, &rc);
        let (ap, ad) = step_lengths(&x, &s, &dir);
        let gamma = (0.9 + 0.09 * ap.min(ad).min(1.0)).min(opts.max_step_fraction);
        let ap = (gamma * ap).min(1.0);
        let ad = (gamma * ad).min(1.0);
        if ap.max(ad) < 1e-10 {
            status = SdpStatus::NumericalFailure;
            break;
        }
        for (xb, d) in x.iter_mut().zip(&dir.dx) {
            *xb = sym(&*xb + d * ap);
        }
        for (sb, d) in s.iter_mut().zip(&dir.ds) {
            *sb = sym(&*sb + d * ad);
        }
        z += &dir.dz * ad;
        iterations = iter + 1;
    }

    if matches!(status, SdpStatus::NumericalFailure | SdpStatus::MaxIterations) {
        if let Some((merit, bz, res, it)) = best {
            if merit <= opts.stall_gap {
                z = bz;
                last = res;
                iterations = it;
                status = SdpStatus::Optimal;
            }
        }
    }
    let mut yv = DVector::zeros(sdp.nvars());
    yv[0] = 1.0;
    yv.rows_mut(1, m).copy_from(&z);
    let objective_value = data.f0 - data.b.dot(&z);
    let y = MomentSequence::new(sdp.basis.nvars(), sdp.k, yv).expect("sizes match basis");
    SdpSolution {
        y,
        objective_value,
        status,
        duality_gap: last.0,
        moment_infeasibility: last.1,
        sos_infeasibility: last.2,
        iterations,
    }
}

/// Index of the monomial `X^alpha` in the relaxation's decision vector.
pub fn variable_index(sdp: &SdpProblem, m: &Monomial) -> Option<usize> {
    sdp.basis.index_of(m)
}

/// Largest violation `max(0, -lambda_min)` of any block at `y`, relative to
/// `max(1, |block|_max)`.
pub fn max_block_violation(sdp: &SdpProblem, y: &DVector<f64>) -> f64 {
    sdp.blocks
        .iter()
        .map(|b| {
            let mat = b.evaluate(y);
            let min = SortedEigen::new(&mat).min();
            (-min).max(0.0) / linalg::unit_scale(&mat)
        })
        .fold(0.0, f64::max)
}
