//! Independent audits of certificates and closed-loop runs.
//!
//! Everything here works from the extracted certificates and plain
//! simulation; nothing reuses the SDP assembly.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::consistency::ConsistencySet;
use crate::controller::{Mode, MpcConfig, RunLog};
use crate::error::{Error, Result};
use crate::numerics::{max_eigenvalue, min_eigenvalue, sqrt_factor, symmetrize, weighted_norm_sq, CostWeights, SymMatrix};
use crate::plant::{unit_direction, ConstraintSet};
use crate::sdp::Certificate;

/// Absolute tolerance of the cost, decrease and invariance checks.
pub const AUDIT_TOL: f64 = 1e-6;
/// Tail of a truncated rollout counts as negligible below this fraction of γ.
pub const TAIL_FRACTION: f64 = 1e-9;
/// Rollouts are extended (doubling) up to this horizon.
pub const MAX_HORIZON: usize = 1 << 20;
/// Riccati iteration step tolerance.
pub const RICCATI_TOL: f64 = 1e-12;
/// Reweighting passes of the sampling-center search.
const LAWSON_ITERS: usize = 400;

/// Noise-free prediction `x̄_{k+1} = (A + BF) x̄_k` from `x̄_0 = x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalRollout {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub horizon: usize,
    /// `horizon + 1` states.
    pub states: Vec<DVector<f64>>,
    /// `horizon` inputs `F x̄_k`.
    pub inputs: Vec<DVector<f64>>,
    /// Stage costs of the `horizon` steps.
    pub stage_costs: Vec<f64>,
    pub cost: f64,
}

impl NominalRollout {
    pub fn new(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        f: &DMatrix<f64>,
        x0: &DVector<f64>,
        horizon: usize,
        weights: &CostWeights,
    ) -> Result<Self> {
        let n = x0.len();
        if a.shape() != (n, n) || b.nrows() != n || f.shape() != (b.ncols(), n) {
            return Err(Error::DimError(format!(
                "A {:?}, B {:?}, F {:?} do not fit a state of length {n}",
                a.shape(),
                b.shape(),
                f.shape()
            )));
        }
        let mut states = Vec::with_capacity(horizon + 1);
        let mut inputs = Vec::with_capacity(horizon);
        let mut stage_costs = Vec::with_capacity(horizon);
        let mut x = x0.clone();
        for _ in 0..horizon {
            let u = f * &x;
            stage_costs.push(weights.stage_cost(&u, &x)?);
            let next = a * &x + b * &u;
            states.push(std::mem::replace(&mut x, next));
            inputs.push(u);
        }
        states.push(x);
        let cost = stage_costs.iter().sum();
        Ok(Self { a: a.clone(), b: b.clone(), f: f.clone(), x0: x0.clone(), horizon, states, inputs, stage_costs, cost })
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.states.last().expect("rollout has at least one state")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Could not be decided (for example a rollout tail that never became negligible).
    Inconclusive,
}

impl std::fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pass => "pass",
            Self::Fail => "fail",
            Self::Inconclusive => "inconclusive",
        })
    }
}

/// One audited property. `margin` is the worst slack over all instances
/// (positive is good); the check passes when `margin ≥ −tolerance`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditCheck {
    pub name: String,
    pub margin: f64,
    pub tolerance: f64,
    pub status: CheckStatus,
    /// Number of instances evaluated.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuditReport {
    pub checks: Vec<AuditCheck>,
    /// Informational values with no pass/fail meaning.
    pub info: Vec<(String, f64)>,
    /// Sampled models `(A, B)` the checks ran on.
    pub models: Vec<(DMatrix<f64>, DMatrix<f64>)>,
}

impl AuditReport {
    /// Records the worst margin of a family of instances.
    pub fn record(&mut self, name: &str, margins: impl IntoIterator<Item = f64>, tolerance: f64) {
        let (worst, count) = margins.into_iter().fold((f64::INFINITY, 0usize), |(w, c), m| {
            (if m.is_nan() || w.is_nan() { f64::NAN } else { w.min(m) }, c + 1)
        });
        let status = if count == 0 || worst >= -tolerance { CheckStatus::Pass } else { CheckStatus::Fail };
        self.checks.push(AuditCheck { name: name.to_string(), margin: worst, tolerance, status, count });
    }

    pub fn inconclusive(&mut self, name: &str, count: usize) {
        self.checks.push(AuditCheck {
            name: name.to_string(),
            margin: f64::NAN,
            tolerance: 0.0,
            status: CheckStatus::Inconclusive,
            count,
        });
    }

    pub fn merge(&mut self, other: AuditReport) {
        self.checks.extend(other.checks);
        self.info.extend(other.info);
        self.models.extend(other.models);
    }

    pub fn check(&self, name: &str) -> Option<&AuditCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// No check failed (inconclusive checks do not count as failures).
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn failures(&self) -> impl Iterator<Item = &AuditCheck> {
        self.checks.iter().filter(|c| c.status == CheckStatus::Fail)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out += &format!(
                "{:<28} {:>13} margin {:>12.4e} tol {:.1e} over {} instance(s)\n",
                c.name,
                c.status.to_string().to_uppercase(),
                c.margin,
                c.tolerance,
                c.count
            );
        }
        for (k, v) in &self.info {
            out += &format!("{k:<28} {:>13} {v:.6e}\n", "INFO");
        }
        out += &format!("overall: {}\n", if self.passed() { "PASS" } else { "FAIL" });
        out
    }

    /// `check,margin,tolerance,pass`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["check", "margin", "tolerance", "pass"])?;
        for c in &self.checks {
            wtr.write_record([c.name.clone(), c.margin.to_string(), c.tolerance.to_string(), c.status.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Model with (approximately) the smallest worst-case data residual
/// `max_i ‖x_{i+1} − A x_i − B u_i‖_G`, used as the sampling center.
///
/// Starts from least squares and runs Lawson's reweighting; returns the best
/// iterate, which is a member whenever the data admit one with slack.
pub fn sampling_center(set: &ConsistencySet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, m) = (set.n(), set.m());
    let blocks: Vec<_> = set.blocks().iter().collect();
    let k = blocks.len();
    let mut w = DMatrix::zeros(n + m, k);
    let mut xn = DMatrix::zeros(n, k);
    for (j, b) in blocks.iter().enumerate() {
        w.view_mut((0, j), (n, 1)).copy_from(&b.x);
        w.view_mut((n, j), (m, 1)).copy_from(&b.u);
        xn.column_mut(j).copy_from(&b.x_next);
    }
    let split = |theta: &DMatrix<f64>| (theta.columns(0, n).into_owned(), theta.columns(n, m).into_owned());
    let residuals = |theta: &DMatrix<f64>| -> Result<Vec<f64>> {
        let r = &xn - theta * &w;
        (0..k).map(|j| Ok(weighted_norm_sq(&r.column(j).into_owned(), set.g())?.max(0.0).sqrt())).collect()
    };
    let mut weights = vec![1.0 / k as f64; k];
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for _ in 0..LAWSON_ITERS {
        let sw = DMatrix::from_diagonal(&DVector::from_vec(weights.clone()));
        let gram = &w * &sw * w.transpose();
        let rhs = &xn * &sw * w.transpose();
        let svd = gram.svd(true, true);
        let cut = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
        let pinv = svd.pseudo_inverse(cut).map_err(|e| Error::InvalidMatrix(e.to_string()))?;
        let theta = rhs * pinv;
        let res = residuals(&theta)?;
        let worst = res.iter().copied().fold(0.0, f64::max);
        if best.as_ref().is_none_or(|(b, _)| worst < *b) {
            best = Some((worst, theta));
        }
        let total: f64 = weights.iter().zip(&res).map(|(w, r)| w * r).sum();
        if !(total > 0.0) {
            break;
        }
        for (w, r) in weights.iter_mut().zip(&res) {
            *w *= r / total;
        }
    }
    let (_, theta) = best.expect("at least one iteration");
    Ok(split(&theta))
}

/// Rolls out until the tail `‖x̄_H‖²_P` drops below `TAIL_FRACTION·γ`,
/// doubling the horizon up to [`MAX_HORIZON`]. `None` if it never does.
fn certified_rollout(
    cert: &Certificate,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x_t: &DVector<f64>,
    horizon: usize,
    weights: &CostWeights,
) -> Result<Option<NominalRollout>> {
    let mut h = horizon.max(1);
    loop {
        let r = NominalRollout::new(a, b, &cert.f, x_t, h, weights)?;
        let tail = cert.value(r.terminal())?;
        if tail <= TAIL_FRACTION * cert.gamma {
            return Ok(Some(r));
        }
        if h >= MAX_HORIZON || !tail.is_finite() {
            return Ok(None);
        }
        h = (h * 2).min(MAX_HORIZON);
    }
}

/// Samples `samples` consistent models and checks, for each, that the
/// nominal infinite-horizon cost from `x_t` stays below `‖x_t‖²_P ≤ γ` and
/// that `‖x̄‖²_P` decreases by at least the stage cost at every step.
pub fn verify_cost_bound(
    cert: &Certificate,
    set: &ConsistencySet,
    weights: &CostWeights,
    x_t: &DVector<f64>,
    samples: usize,
    horizon: usize,
    seed: u64,
) -> Result<AuditReport> {
    let center = sampling_center(set)?;
    let models = set.sample_members((&center.0, &center.1), samples, seed)?;
    verify_cost_bound_on(cert, &models, weights, x_t, horizon)
}

/// [`verify_cost_bound`] on a given list of models.
pub fn verify_cost_bound_on(
    cert: &Certificate,
    models: &[(DMatrix<f64>, DMatrix<f64>)],
    weights: &CostWeights,
    x_t: &DVector<f64>,
    horizon: usize,
) -> Result<AuditReport> {
    let mut report = AuditReport::default();
    let v0 = cert.value(x_t)?;
    report.record("value_within_gamma", [cert.gamma - v0], AUDIT_TOL);
    let mut bound = Vec::new();
    let mut gamma_bound = Vec::new();
    let mut decrease = Vec::new();
    let mut unresolved = 0usize;
    let mut best = 0.0f64;
    for (a, b) in models {
        let Some(r) = certified_rollout(cert, a, b, x_t, horizon, weights)? else {
            unresolved += 1;
            continue;
        };
        bound.push(v0 - r.cost);
        gamma_bound.push(cert.gamma - r.cost);
        best = best.max(r.cost);
        let values = r.states.iter().map(|x| cert.value(x)).collect::<Result<Vec<_>>>()?;
        decrease.push(
            (0..r.horizon).map(|k| values[k] - values[k + 1] - r.stage_costs[k]).fold(f64::INFINITY, f64::min),
        );
    }
    report.record("cost_within_value", bound, AUDIT_TOL);
    report.record("cost_within_gamma", gamma_bound, AUDIT_TOL);
    report.record("per_step_decrease", decrease, AUDIT_TOL);
    if unresolved > 0 {
        report.inconclusive("rollout_tail", unresolved);
    }
    report.info.push(("gamma_minus_best_sampled_cost".into(), cert.gamma - best));
    report.models = models.to_vec();
    Ok(report)
}

/// Boundary points of `{x : ‖x‖²_P = γ}` in P-whitened uniform directions.
/// In one dimension both boundary points are returned.
pub fn ellipsoid_boundary(cert: &Certificate, samples: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let n = cert.p.dim();
    let root = sqrt_factor(&cert.p.inverse()?)?;
    let scale = cert.gamma.sqrt();
    if n == 1 {
        let r = root[(0, 0)] * scale;
        return Ok(vec![DVector::from_element(1, r), DVector::from_element(1, -r)]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..samples).map(|_| &root * unit_direction(&mut rng, n) * scale).collect())
}

/// Input and state constraints on the certificate's ellipsoid: pointwise on
/// sampled boundary points and in matrix form on `H = γP⁻¹`, `L = F H`.
pub fn verify_sprocedure_constraints(
    cert: &Certificate,
    constraints: &ConstraintSet,
    samples: usize,
    seed: u64,
) -> Result<AuditReport> {
    let mut report = AuditReport::default();
    let points = ellipsoid_boundary(cert, samples, seed)?;
    let mut input = Vec::with_capacity(points.len());
    let mut state = Vec::with_capacity(points.len());
    for x in &points {
        input.push(constraints.input_margin(&cert.input(x))?);
        state.push(constraints.state_margin(x)?);
    }
    report.record("input_on_boundary", input, AUDIT_TOL);
    report.record("state_on_boundary", state, AUDIT_TOL);

    let h = cert.p.inverse()?.scale(cert.gamma);
    let hm = h.as_matrix();
    let l = &cert.f * hm;
    // matrix-form tolerance is relative to the size of H
    let tol = AUDIT_TOL * max_eigenvalue(&h)?.max(1.0);
    let input_form = SymMatrix::new(symmetrize(&(hm - l.transpose() * constraints.s_u.as_matrix() * &l)))?;
    let state_form = SymMatrix::new(symmetrize(&(hm - hm * constraints.s_x.as_matrix() * hm)))?;
    report.record("input_matrix_form", [min_eigenvalue(&input_form)?], tol);
    report.record("state_matrix_form", [min_eigenvalue(&state_form)?], tol);
    Ok(report)
}

/// Riccati fixed-point iteration from `P = Q`; returns `(P, F)` with
/// `F = −(R + BᵀPB)⁻¹BᵀPA` for `u = F x`.
pub fn lqr_oracle(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    weights: &CostWeights,
    iters: usize,
) -> Result<(SymMatrix, DMatrix<f64>)> {
    let n = a.nrows();
    if a.shape() != (n, n) || b.nrows() != n || weights.n() != n || weights.m() != b.ncols() {
        return Err(Error::DimError(format!(
            "A {:?}, B {:?} and weights {}/{} do not match",
            a.shape(),
            b.shape(),
            weights.n(),
            weights.m()
        )));
    }
    let q = weights.q.as_matrix();
    let r = weights.r.as_matrix();
    let gain = |p: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let s = r + b.transpose() * p * b;
        let rhs = b.transpose() * p * a;
        s.cholesky()
            .map(|c| -c.solve(&rhs))
            .ok_or_else(|| Error::InvalidMatrix("R + BᵀPB is not positive definite".into()))
    };
    let mut p = q.clone();
    for _ in 0..iters {
        let f = gain(&p)?;
        // P⁺ = Q + AᵀPA + AᵀPB F
        let next = symmetrize(&(q + a.transpose() * &p * a + a.transpose() * &p * b * &f));
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        let step = (&next - &p).norm();
        p = next;
        if step <= RICCATI_TOL * p.norm().max(1.0) {
            let f = gain(&p)?;
            return Ok((SymMatrix::new(p)?, f));
        }
    }
    Err(Error::NotStabilizable { iters })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopMetrics {
    pub total_cost: f64,
    /// Mean over the steps that solved an SDP (0 if none did).
    pub mean_solve_ms: f64,
    pub rpi_entry_step: Option<usize>,
    /// Smallest of all input and state margins.
    pub worst_margin: f64,
}

pub fn closed_loop_metrics(log: &RunLog) -> Result<ClosedLoopMetrics> {
    if log.is_empty() {
        return Err(Error::ConfigError("metrics need a non-empty run log".into()));
    }
    let solved: Vec<f64> = log.rows.iter().filter(|r| r.gamma.is_some()).map(|r| r.solve_ms).collect();
    let mean_solve_ms = if solved.is_empty() { 0.0 } else { solved.iter().sum::<f64>() / solved.len() as f64 };
    let worst_margin = log.rows.iter().map(|r| r.margin_u.min(r.margin_x)).fold(f64::INFINITY, f64::min);
    Ok(ClosedLoopMetrics {
        total_cost: log.total_cost(),
        mean_solve_ms,
        rpi_entry_step: log.rpi_entry_step(),
        worst_margin,
    })
}

/// Closed-loop audits of a run: recursive feasibility, the decrease
/// inequality outside the RPI set (before and after re-optimization), RPI
/// invariance of the frozen ellipsoid, constraints and mode monotonicity.
///
/// Values are recomputed from the logged states and certificates; the `V`
/// column is not trusted.
pub fn audit_run(log: &RunLog, cfg: &MpcConfig) -> Result<AuditReport> {
    let mut report = AuditReport::default();
    let theta = cfg.rpi_threshold()?;
    let rho = cfg.contraction()?;
    let rows = &log.rows;
    let next_state = |t: usize| -> Option<&DVector<f64>> {
        rows.get(t + 1).map(|r| &r.x).or(if t + 1 == rows.len() { log.final_state.as_ref() } else { None })
    };
    let cert_at = |t: usize| log.certificates.get(t).and_then(|c| c.as_ref());

    let receding: Vec<usize> = (0..rows.len()).filter(|&t| rows[t].mode == Mode::Receding).collect();
    report.record(
        "recursive_feasibility",
        receding.iter().map(|&t| if rows[t].gamma.is_some() && cert_at(t).is_some() { 0.0 } else { -1.0 }),
        0.0,
    );

    let mut before = Vec::new();
    let mut after = Vec::new();
    for &t in &receding {
        let (Some(cert), Some(x_next)) = (cert_at(t), next_state(t)) else { continue };
        let v_t = cert.value(&rows[t].x)?;
        let bound = rho * (v_t - theta);
        before.push(bound - (cert.value(x_next)? - theta));
        if let Some(next_cert) = cert_at(t + 1) {
            after.push(bound - (next_cert.value(x_next)? - theta));
        }
    }
    report.record("lyapunov_decrease", before, AUDIT_TOL);
    report.record("lyapunov_decrease_reopt", after, AUDIT_TOL);

    let mut invariance = Vec::new();
    let mut approach = Vec::new();
    if let Some(frozen) = &log.frozen {
        let mut inside = false;
        for (t, r) in rows.iter().enumerate().filter(|(_, r)| r.mode == Mode::Static) {
            let v = frozen.value(&r.x)?;
            inside |= v <= theta;
            if inside {
                invariance.push(theta - v);
            } else if let Some(x_next) = next_state(t) {
                // outside the frozen ellipsoid the same contraction applies
                approach.push(rho * (v - theta) - (frozen.value(x_next)? - theta));
            }
        }
    }
    report.record("rpi_invariance", invariance, AUDIT_TOL);
    report.record("rpi_approach", approach, AUDIT_TOL);

    report.record("input_constraint", rows.iter().map(|r| r.margin_u), AUDIT_TOL);
    report.record("state_constraint", rows.iter().map(|r| r.margin_x), AUDIT_TOL);
    let recomputed = rows
        .iter()
        .map(|r| Ok(cfg.constraints.input_margin(&r.u)?.min(cfg.constraints.state_margin(&r.x)?)))
        .collect::<Result<Vec<f64>>>()?;
    report.record("recomputed_constraints", recomputed, AUDIT_TOL);

    let first_static = rows.iter().position(|r| r.mode == Mode::Static).unwrap_or(rows.len());
    report.record(
        "mode_monotone",
        [if rows[first_static..].iter().all(|r| r.mode == Mode::Static) { 0.0 } else { -1.0 }],
        0.0,
    );
    Ok(report)
}

/// Matrix checks of a certificate against given models:
/// `λ_max((A+BF)ᵀP(A+BF) − P + Q + FᵀRF)`, `Q ⪯ P`, `P ⪯ cI`.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateMargins {
    /// Largest `λ_max` of the decrease matrix over the models.
    pub decrease: f64,
    /// `λ_min(P − Q)`.
    pub p_minus_q: f64,
    /// `λ_min(cI − P)`.
    pub c_minus_p: f64,
}

pub fn certificate_margins(
    cert: &Certificate,
    models: &[(DMatrix<f64>, DMatrix<f64>)],
    weights: &CostWeights,
    c: f64,
) -> Result<CertificateMargins> {
    let p = cert.p.as_matrix();
    let n = p.nrows();
    let fixed = weights.q.as_matrix() + cert.f.transpose() * weights.r.as_matrix() * &cert.f - p;
    let mut decrease = f64::NEG_INFINITY;
    for (a, b) in models {
        let acl = a + b * &cert.f;
        let m = SymMatrix::new(symmetrize(&(acl.transpose() * p * &acl + &fixed)))?;
        decrease = decrease.max(max_eigenvalue(&m)?);
    }
    let p_minus_q = min_eigenvalue(&SymMatrix::new(symmetrize(&(p - weights.q.as_matrix())))?)?;
    let c_minus_p = min_eigenvalue(&SymMatrix::new(symmetrize(&(DMatrix::identity(n, n) * c - p)))?)?;
    Ok(CertificateMargins { decrease, p_minus_q, c_minus_p })
}
