//! Semidefinite programs for the min-max MPC step.
//!
//! An [`SdpProblem`] is a linear objective over named variable blocks and a
//! list of affine symmetric-matrix constraints. [`assemble_robust`] and
//! [`assemble_adaptive`] build the per-step program in the variables
//! `γ, H, L, τ (, δ)`:
//!
//! ```text
//! minimize γ  s.t.
//!   [1 xᵀ; x H] ⪰ 0                                                 (initial)
//!   [[-H+γ/c·I 0; 0 0] + Π   [0; H; L]   0  ]
//!   [        *                  -H       Φᵀ ]  ⪯ -margin·I          (decrease)
//!   [        *                   *      -γI ]
//!   τ ≥ 0, δ ≥ 0                                                    (multipliers)
//!   [H  LᵀM_uᵀ; M_u L  I] ⪰ 0                                       (input)
//!   [H  H M_xᵀ; M_x H  I] ⪰ 0                                       (state)
//!   γ ≥ γ_min
//! ```
//!
//! with `Π = Σ τ_i D_i + Σ δ_j D_j^online`, `Φ = [M_R L; M_Q H]`,
//! `M_uᵀM_u = S_u` and `M_xᵀM_x = S_x`. The input and state blocks are the
//! Schur-equivalent factor forms of `[H Lᵀ; L S_u⁻¹] ⪰ 0` and
//! `[H H; H S_x⁻¹] ⪰ 0`; they avoid inverting nearly singular constraint
//! matrices. The resulting gain and Lyapunov matrix are `F = L H⁻¹`,
//! `P = γ H⁻¹`.
//!
//! The decrease block is imposed in data-adapted coordinates (see
//! [`DataCoordinates`]): the first `2n+m` rows and columns are transformed by
//! the congruence `T = [I 0; Θ̂ᵀ ε I]`, where `Θ̂ = [Â B̂]` is a least-squares
//! model estimate and `ε` the noise scale. Congruence preserves definiteness,
//! so the certified gain and bound are unchanged, but the data blocks are then
//! built from residuals `x_{i+1} - Θ̂ w_i` instead of cancelling products of
//! raw data, and the multipliers are of order one.

mod ipm;

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consistency::{ConsistencySet, MultiplierMode};
use crate::error::{Error, Result};
use crate::numerics::{min_eigenvalue, sqrt_factor, symmetrize, CostWeights, SymMatrix, STRICT_MARGIN};
use crate::plant::ConstraintSet;

/// Lower bound imposed on γ.
pub const GAMMA_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    /// The objective is unbounded below (dual infeasible).
    Unbounded,
    MaxIter,
    NumericalFailure,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Optimal => "OPTIMAL",
            Self::Infeasible => "INFEASIBLE",
            Self::Unbounded => "UNBOUNDED",
            Self::MaxIter => "MAX_ITER",
            Self::NumericalFailure => "NUMERICAL_FAILURE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Feasibility tolerance on λ_min of every constraint.
    pub feas_tol: f64,
    /// Relative duality gap at termination.
    pub rel_gap: f64,
    /// Absolute duality gap accepted when the objective is near zero.
    pub abs_gap: f64,
    pub max_iter: usize,
    /// Margin used for strict matrix inequalities.
    pub strict_margin: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { feas_tol: 1e-8, rel_gap: 1e-6, abs_gap: 1e-10, max_iter: 100, strict_margin: STRICT_MARGIN }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.feas_tol) && ok(self.rel_gap) && ok(self.abs_gap) && self.max_iter > 0)
            || !(self.strict_margin.is_finite() && self.strict_margin >= 0.0)
        {
            return Err(Error::ConfigError(format!("invalid solver options {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Scalar,
    /// Symmetric `n×n`, stored as its upper triangle (row-major).
    Symmetric(usize),
    /// Full `rows×cols`, row-major.
    Full(usize, usize),
    /// Vector of scalars constrained elsewhere to be nonnegative.
    Vector(usize),
}

impl VarKind {
    pub fn len(&self) -> usize {
        match *self {
            Self::Scalar => 1,
            Self::Symmetric(n) => n * (n + 1) / 2,
            Self::Full(r, c) => r * c,
            Self::Vector(k) => k,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariableBlock {
    pub name: String,
    pub kind: VarKind,
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintFamily {
    Initial,
    Decrease,
    Multipliers,
    Input,
    State,
    GammaPositive,
    Other,
}

impl ConstraintFamily {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Initial => "initial",
            Self::Decrease => "decrease",
            Self::Multipliers => "multipliers",
            Self::Input => "input",
            Self::State => "state",
            Self::GammaPositive => "gamma_positive",
            Self::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sense {
    /// `E(y) ⪰ 0`.
    Psd,
    /// `E(y) ⪯ -margin·I`.
    NegativeDefinite { margin: f64 },
}

/// Affine symmetric expression `E(y) = E_0 + Σ y_i E_i` with a sense.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiConstraint {
    pub label: String,
    pub family: ConstraintFamily,
    pub sense: Sense,
    pub constant: DMatrix<f64>,
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

impl LmiConstraint {
    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    pub fn evaluate(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut e = self.constant.clone();
        for (i, t) in &self.terms {
            e.zip_apply(t, |p, q| *p += y[*i] * q);
        }
        e
    }

    /// The constraint rewritten as `F_0 + Σ y_i F_i ⪰ 0`.
    fn canonical(&self) -> (DMatrix<f64>, Vec<(usize, DMatrix<f64>)>) {
        match self.sense {
            Sense::Psd => (self.constant.clone(), self.terms.clone()),
            Sense::NegativeDefinite { margin } => {
                let d = self.dim();
                (
                    -&self.constant - DMatrix::identity(d, d) * margin,
                    self.terms.iter().map(|(i, t)| (*i, -t)).collect(),
                )
            }
        }
    }

    /// λ_min of the canonical form at `y`; negative means violated.
    pub fn residual(&self, y: &DVector<f64>) -> f64 {
        canonical_residual(&self.evaluate(y), self.sense)
    }
}

fn canonical_residual(e: &DMatrix<f64>, sense: Sense) -> f64 {
    let m = match sense {
        Sense::Psd => symmetrize(e),
        Sense::NegativeDefinite { margin } => -symmetrize(e) - DMatrix::identity(e.nrows(), e.nrows()) * margin,
    };
    if m.iter().any(|v| !v.is_finite()) {
        return f64::NEG_INFINITY;
    }
    m.symmetric_eigenvalues().min()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Robust,
    Adaptive,
    Generic,
}

/// One measured transition `(x_i, u_i, x_{i+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
}

/// Coordinates in which the data blocks of the decrease constraint are built.
///
/// A block `D_i = V_i diag(G⁻¹, -1) V_iᵀ` becomes
/// `D̂_i = (TᵀD_iT)/ε² = V̂_i diag(G⁻¹, -1) V̂_iᵀ` with
/// `V̂_i = [I r_i; 0 -ε w_i]/ε`, `w_i = (x_i, u_i)` and `r_i = x_{i+1} - Θ̂ w_i`.
/// A multiplier `τ̂` on `D̂_i` equals `τ = τ̂/ε²` on `D_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataCoordinates {
    /// Least-squares estimate `[Â B̂]`, n×(n+m).
    pub theta: DMatrix<f64>,
    /// Noise scale `sqrt(λ_max(G⁻¹))`.
    pub eps: f64,
}

impl DataCoordinates {
    /// Estimate from the offline samples of `set` in its own coordinates.
    pub fn from_set(set: &ConsistencySet) -> Result<Self> {
        let samples: Vec<Sample> =
            set.offline_blocks().map(|b| Sample { x: b.x.clone(), u: b.u.clone(), x_next: b.x_next.clone() }).collect();
        Self::from_samples(&samples, set.n(), set.m(), set.g_inv())
    }

    pub fn from_samples(samples: &[Sample], n: usize, m: usize, g_inv: &SymMatrix) -> Result<Self> {
        let mut w = DMatrix::zeros(n + m, samples.len());
        let mut xn = DMatrix::zeros(n, samples.len());
        for (k, b) in samples.iter().enumerate() {
            w.view_mut((0, k), (n, 1)).copy_from(&b.x);
            w.view_mut((n, k), (m, 1)).copy_from(&b.u);
            xn.column_mut(k).copy_from(&b.x_next);
        }
        let theta = if samples.is_empty() {
            DMatrix::zeros(n, n + m)
        } else {
            let svd = w.svd(true, true);
            let smax = svd.singular_values.max();
            if smax > 0.0 {
                let pinv = svd.pseudo_inverse(1e-12 * smax).map_err(|e| Error::InvalidMatrix(e.to_string()))?;
                xn * pinv
            } else {
                DMatrix::zeros(n, n + m)
            }
        };
        let eps = crate::numerics::max_eigenvalue(g_inv)?.sqrt();
        if !(eps.is_finite() && eps > 0.0) || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix("cannot form data coordinates".into()));
        }
        Ok(Self { theta, eps })
    }

    /// `D̂` for one sample.
    pub fn block(&self, s: &Sample, g_inv: &SymMatrix) -> DMatrix<f64> {
        let n = s.x.len();
        let m = s.u.len();
        let w = DVector::from_iterator(n + m, s.x.iter().chain(s.u.iter()).copied());
        let r = &s.x_next - &self.theta * &w;
        let mut v = DMatrix::zeros(2 * n + m, n + 1);
        v.view_mut((0, 0), (n, n)).fill_with_identity();
        v.view_mut((0, n), (n, 1)).copy_from(&r);
        v.view_mut((n, n), (n + m, 1)).copy_from(&(-&w * self.eps));
        v /= self.eps;
        let mut mid = DMatrix::zeros(n + 1, n + 1);
        mid.view_mut((0, 0), (n, n)).copy_from(g_inv.as_matrix());
        mid[(n, n)] = -1.0;
        symmetrize(&(&v * mid * v.transpose()))
    }

    /// Sum of `D̂` over a group of samples (one multiplier per group).
    pub fn group_block(&self, group: &[Sample], g_inv: &SymMatrix) -> DMatrix<f64> {
        let n = g_inv.dim();
        let dim = group.first().map(|s| 2 * n + s.u.len()).unwrap_or(2 * n);
        group.iter().fold(DMatrix::zeros(dim, dim), |acc, s| acc + self.block(s, g_inv))
    }

    /// Multiplier scale: `τ = τ̂ · scale`.
    pub fn multiplier_scale(&self) -> f64 {
        1.0 / (self.eps * self.eps)
    }

    /// Transformed coupling column `[Θ̂ [H; L]; ε H; ε L]`.
    fn coupling(&self, h: &DMatrix<f64>, l: &DMatrix<f64>) -> DMatrix<f64> {
        let n = h.nrows();
        let m = l.nrows();
        let mut col = DMatrix::zeros(2 * n + m, n);
        let hl = DMatrix::from_fn(n + m, n, |i, j| if i < n { h[(i, j)] } else { l[(i - n, j)] });
        col.view_mut((0, 0), (n, n)).copy_from(&(&self.theta * &hl));
        col.view_mut((n, 0), (n + m, n)).copy_from(&(hl * self.eps));
        col
    }
}

/// Data the MPC program was assembled from; used for independent verification.
///
/// Everything state-related is stored in the solver's scaled coordinates
/// `z = D⁻¹x` with `D = diag(state_scale)`: samples, `x_t`, `G⁻¹`, the cost
/// factor `M_Q D` and the constraint factor `M_x D`. The decrease block in
/// these coordinates is a congruence of the physical one, with `γ/c·I`
/// becoming `γ/c·D⁻²`. [`SdpSolution::h`] and [`SdpSolution::l`] map back.
#[derive(Debug, Clone)]
pub struct MpcContext {
    pub state_scale: DVector<f64>,
    pub x_t: DVector<f64>,
    pub weights: CostWeights,
    pub constraints: ConstraintSet,
    pub c: f64,
    pub strict_margin: f64,
    pub mode: MultiplierMode,
    pub coords: DataCoordinates,
    pub g_inv: SymMatrix,
    /// Offline samples grouped by shared multiplier.
    pub offline: Vec<Vec<Sample>>,
    pub online: Vec<Sample>,
    offline_blocks: Vec<DMatrix<f64>>,
    online_blocks: Vec<DMatrix<f64>>,
    m_u: DMatrix<f64>,
    m_x: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub kind: ProblemKind,
    /// Coefficients of the linear objective (minimized).
    pub objective: DVector<f64>,
    pub variables: Vec<VariableBlock>,
    pub constraints: Vec<LmiConstraint>,
    pub context: Option<MpcContext>,
}

impl SdpProblem {
    /// A problem without MPC structure; variables are declared in order.
    pub fn generic(
        variables: Vec<(String, VarKind)>,
        objective: DVector<f64>,
        constraints: Vec<LmiConstraint>,
    ) -> Result<Self> {
        let mut offset = 0;
        let variables = variables
            .into_iter()
            .map(|(name, kind)| {
                let b = VariableBlock { name, kind, offset };
                offset += kind.len();
                b
            })
            .collect();
        let p = Self { kind: ProblemKind::Generic, objective, variables, constraints, context: None };
        p.validate()?;
        Ok(p)
    }

    pub fn var_count(&self) -> usize {
        self.variables.iter().map(|v| v.kind.len()).sum()
    }

    pub fn variable(&self, name: &str) -> Option<&VariableBlock> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn constraint(&self, family: ConstraintFamily) -> Option<&LmiConstraint> {
        self.constraints.iter().find(|c| c.family == family)
    }

    /// Structural checks: dimensions, symmetry, index ranges, finiteness.
    pub fn validate(&self) -> Result<()> {
        let nvar = self.var_count();
        if self.objective.len() != nvar {
            return Err(Error::InvalidProblem(format!(
                "objective has {} entries for {nvar} variables",
                self.objective.len()
            )));
        }
        let mut expected = 0;
        for v in &self.variables {
            if v.offset != expected {
                return Err(Error::InvalidProblem(format!("variable '{}' has offset {}, expected {expected}", v.name, v.offset)));
            }
            expected += v.kind.len();
        }
        if self.objective.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("non-finite objective".into()));
        }
        for c in &self.constraints {
            let d = c.dim();
            if d == 0 || c.constant.ncols() != d {
                return Err(Error::InvalidProblem(format!("constraint '{}' is not square", c.label)));
            }
            let check = |m: &DMatrix<f64>| -> Result<()> {
                if m.shape() != (d, d) {
                    return Err(Error::InvalidProblem(format!("constraint '{}' mixes block sizes", c.label)));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidProblem(format!("constraint '{}' has non-finite data", c.label)));
                }
                if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
                    return Err(Error::InvalidProblem(format!("constraint '{}' is not symmetric", c.label)));
                }
                Ok(())
            };
            check(&c.constant)?;
            for (i, t) in &c.terms {
                if *i >= nvar {
                    return Err(Error::InvalidProblem(format!("constraint '{}' references variable {i} of {nvar}", c.label)));
                }
                check(t)?;
            }
        }
        Ok(())
    }

    /// Plain-text dump: objective, variable table, and block layout of each constraint.
    pub fn debug_dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "problem {:?}", self.kind);
        let obj: Vec<String> = self
            .objective
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| format!("{v:+e}*y{i}"))
            .collect();
        let _ = writeln!(s, "minimize {}", if obj.is_empty() { "0".to_string() } else { obj.join(" ") });
        let _ = writeln!(s, "variables {}", self.var_count());
        for v in &self.variables {
            let _ = writeln!(s, "  {:<8} {:?} y[{}..{}]", v.name, v.kind, v.offset, v.offset + v.kind.len());
        }
        let _ = writeln!(s, "constraints {}", self.constraints.len());
        for c in &self.constraints {
            let sense = match c.sense {
                Sense::Psd => ">= 0".to_string(),
                Sense::NegativeDefinite { margin } => format!("<= -{margin:e} I"),
            };
            let _ = writeln!(s, "  [{}] {} dim {} {} terms {}", c.family.label(), c.label, c.dim(), sense, c.terms.len());
            let mut touched: Vec<(String, usize)> = Vec::new();
            for (i, _) in &c.terms {
                if let Some(v) = self.variables.iter().find(|v| *i >= v.offset && *i < v.offset + v.kind.len()) {
                    match touched.iter_mut().find(|(n, _)| *n == v.name) {
                        Some(e) => e.1 += 1,
                        None => touched.push((v.name.clone(), 1)),
                    }
                }
            }
            for (name, count) in touched {
                let _ = writeln!(s, "      uses {name} ({count} entries)");
            }
        }
        s
    }
}

/// Checks that every constraint is affine by evaluating second differences
/// `E(y1) - 2 E((y1+y2)/2) + E(y2)` and `E(2y) - 2E(y) + E(0)` at random points.
/// Returns the largest relative deviation.
pub fn affinity_probe(problem: &SdpProblem, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nvar = problem.var_count();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let y1 = DVector::from_fn(nvar, |_, _| rng.random_range(-1.0..1.0));
        let y2 = DVector::from_fn(nvar, |_, _| rng.random_range(-1.0..1.0));
        let mid = (&y1 + &y2) * 0.5;
        let zero = DVector::zeros(nvar);
        for c in &problem.constraints {
            let e1 = c.evaluate(&y1);
            let e2 = c.evaluate(&y2);
            let em = c.evaluate(&mid);
            let scale = e1.amax().max(e2.amax()).max(1.0);
            worst = worst.max((&e1 - &em * 2.0 + &e2).amax() / scale);
            let ed = c.evaluate(&(&y1 * 2.0));
            let e0 = c.evaluate(&zero);
            worst = worst.max((&ed - &e1 * 2.0 + &e0).amax() / ed.amax().max(1.0));
        }
    }
    worst
}

fn sym_unit(n: usize, i: usize, j: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n, n);
    e[(i, j)] = 1.0;
    e[(j, i)] = 1.0;
    e
}

/// Embed `block` at `(r, c)` and its transpose at `(c, r)` in a `dim×dim` zero matrix.
fn place(dim: usize, r: usize, c: usize, block: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(dim, dim);
    add_sym(&mut out, r, c, block);
    out
}

fn add_sym(out: &mut DMatrix<f64>, r: usize, c: usize, block: &DMatrix<f64>) {
    let (br, bc) = block.shape();
    if r == c {
        let mut v = out.view_mut((r, c), (br, bc));
        v += block;
    } else {
        {
            let mut v = out.view_mut((r, c), (br, bc));
            v += block;
        }
        let mut v = out.view_mut((c, r), (bc, br));
        v += block.transpose();
    }
}

fn upper_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * n - i * (i + 1) / 2 + j
}

/// Robust program at `x_t` over the offline data only.
pub fn assemble_robust(
    set: &ConsistencySet,
    x_t: &DVector<f64>,
    weights: &CostWeights,
    constraints: &ConstraintSet,
    c: f64,
) -> Result<SdpProblem> {
    assemble(ProblemKind::Robust, set, x_t, weights, constraints, c, STRICT_MARGIN)
}

/// Adaptive program at `x_t`: adds one multiplier per online block.
pub fn assemble_adaptive(
    set: &ConsistencySet,
    x_t: &DVector<f64>,
    weights: &CostWeights,
    constraints: &ConstraintSet,
    c: f64,
) -> Result<SdpProblem> {
    assemble(ProblemKind::Adaptive, set, x_t, weights, constraints, c, STRICT_MARGIN)
}

/// Shared assembly with an explicit strict-inequality margin.
pub fn assemble(
    kind: ProblemKind,
    set: &ConsistencySet,
    x_t: &DVector<f64>,
    weights: &CostWeights,
    constraints: &ConstraintSet,
    c: f64,
    strict_margin: f64,
) -> Result<SdpProblem> {
    let n = set.n();
    let m = set.m();
    if weights.n() != n || weights.m() != m || constraints.s_u.dim() != m || constraints.s_x.dim() != n || x_t.len() != n {
        return Err(Error::DimError(format!(
            "set is n={n}, m={m}; weights Q {}, R {}; S_u {}, S_x {}; x_t {}",
            weights.n(),
            weights.m(),
            constraints.s_u.dim(),
            constraints.s_x.dim(),
            x_t.len()
        )));
    }
    let lq = min_eigenvalue(&weights.q)?;
    if !(c.is_finite() && c > lq) {
        return Err(Error::ConfigError(format!("c = {c:e} must exceed λ_min(Q) = {lq:e}")));
    }
    if min_eigenvalue(&constraints.s_u)? <= 0.0 {
        return Err(Error::ConfigError("S_u must be nonsingular".into()));
    }
    if x_t.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidProblem("non-finite state".into()));
    }
    if kind == ProblemKind::Generic {
        return Err(Error::InvalidProblem("MPC assembly needs a robust or adaptive kind".into()));
    }
    let d = state_scale(constraints);
    let d_inv = d.map(|v| 1.0 / v);
    let dm = DMatrix::from_diagonal(&d);
    let dm_inv = DMatrix::from_diagonal(&d_inv);
    let sample = |b: &crate::consistency::QmiBlock| Sample {
        x: b.x.component_mul(&d_inv),
        u: b.u.clone(),
        x_next: b.x_next.component_mul(&d_inv),
    };
    let offline: Vec<Vec<Sample>> = match set.mode {
        MultiplierMode::Full => set.offline_blocks().map(|b| vec![sample(b)]).collect(),
        MultiplierMode::Common => vec![set.offline_blocks().map(sample).collect()],
    };
    let online: Vec<Sample> =
        if kind == ProblemKind::Adaptive { set.online_blocks().map(sample).collect() } else { Vec::new() };
    let g_inv = SymMatrix::new(&dm_inv * set.g_inv().as_matrix() * &dm_inv)?;
    let flat: Vec<Sample> = offline.iter().flatten().cloned().collect();
    let coords = DataCoordinates::from_samples(&flat, n, m, &g_inv)?;
    let offline_blocks = offline.iter().map(|g| coords.group_block(g, &g_inv)).collect();
    let online_blocks = online.iter().map(|s| coords.block(s, &g_inv)).collect();
    let m_u = sqrt_factor(&constraints.s_u)?;
    let m_x = sqrt_factor(&constraints.s_x)? * &dm;
    let weights = CostWeights {
        q: SymMatrix::new(&dm * weights.q.as_matrix() * &dm)?,
        r: weights.r.clone(),
        m_q: &weights.m_q * &dm,
        m_r: weights.m_r.clone(),
    };
    let ctx = MpcContext {
        state_scale: d,
        x_t: x_t.component_mul(&d_inv),
        weights,
        constraints: constraints.clone(),
        c,
        strict_margin,
        mode: set.mode,
        coords,
        g_inv,
        offline,
        online,
        offline_blocks,
        online_blocks,
        m_u,
        m_x,
    };
    build_mpc(kind, ctx)
}

/// Diagonal state scaling `D` with `D_ii ∝ S_x,ii^{-1/2}` (1 where the state
/// is unconstrained), normalized to a largest entry of 1. Only the relative
/// scaling equalizes the constraint diagonal; an overall factor would just
/// shrink the data and inflate the multipliers.
pub fn state_scale(constraints: &ConstraintSet) -> DVector<f64> {
    let s = constraints.s_x.as_matrix();
    let d = DVector::from_fn(s.nrows(), |i, _| if s[(i, i)] > 0.0 { 1.0 / s[(i, i)].sqrt() } else { 1.0 });
    let top = d.max();
    d / top
}

fn build_mpc(kind: ProblemKind, ctx: MpcContext) -> Result<SdpProblem> {
    let n = ctx.weights.n();
    let m = ctx.weights.m();
    let n_tau = ctx.offline_blocks.len();
    let n_delta = ctx.online_blocks.len();
    let mut vars = vec![
        ("gamma".to_string(), VarKind::Scalar),
        ("H".to_string(), VarKind::Symmetric(n)),
        ("L".to_string(), VarKind::Full(m, n)),
        ("tau".to_string(), VarKind::Vector(n_tau)),
    ];
    if n_delta > 0 {
        vars.push(("delta".to_string(), VarKind::Vector(n_delta)));
    }
    let mut offset = 0;
    let variables: Vec<VariableBlock> = vars
        .into_iter()
        .map(|(name, kind)| {
            let b = VariableBlock { name, kind, offset };
            offset += kind.len();
            b
        })
        .collect();
    let nvar = offset;
    let i_gamma = 0;
    let h_off = 1;
    let l_off = h_off + n * (n + 1) / 2;
    let tau_off = l_off + m * n;
    let delta_off = tau_off + n_tau;
    let h_terms: Vec<(usize, usize, usize)> =
        (0..n).flat_map(|i| (i..n).map(move |j| (h_off + upper_index(n, i, j), i, j))).collect();
    let l_terms: Vec<(usize, usize, usize)> =
        (0..m).flat_map(|i| (0..n).map(move |j| (l_off + i * n + j, i, j))).collect();

    let mut constraints = Vec::new();

    // initial: [1 xᵀ; x H] ⪰ 0
    {
        let d = n + 1;
        let mut c0 = DMatrix::zeros(d, d);
        c0[(0, 0)] = 1.0;
        add_sym(&mut c0, 1, 0, &DMatrix::from_column_slice(n, 1, ctx.x_t.as_slice()));
        let terms = h_terms.iter().map(|&(v, i, j)| (v, place(d, 1, 1, &sym_unit(n, i, j)))).collect();
        constraints.push(LmiConstraint {
            label: "[1 x'; x H] >= 0".into(),
            family: ConstraintFamily::Initial,
            sense: Sense::Psd,
            constant: c0,
            terms,
        });
    }

    // decrease
    {
        let k = 2 * n + m;
        let d = 4 * n + 2 * m;
        let mid = k; // -H block
        let low = k + n; // -γI block
        let mut terms: Vec<(usize, DMatrix<f64>)> = Vec::new();
        let mut g = DMatrix::zeros(d, d);
        for i in 0..n {
            g[(i, i)] = 1.0 / (ctx.c * ctx.state_scale[i] * ctx.state_scale[i]);
        }
        for i in 0..(n + m) {
            g[(low + i, low + i)] = -1.0;
        }
        terms.push((i_gamma, g));
        let zero_l = DMatrix::zeros(m, n);
        let zero_h = DMatrix::zeros(n, n);
        for &(v, i, j) in &h_terms {
            let e = sym_unit(n, i, j);
            let mut t = DMatrix::zeros(d, d);
            add_sym(&mut t, 0, 0, &-&e);
            add_sym(&mut t, mid, mid, &-&e);
            add_sym(&mut t, 0, mid, &ctx.coords.coupling(&e, &zero_l));
            add_sym(&mut t, low + m, mid, &(&ctx.weights.m_q * &e));
            terms.push((v, t));
        }
        for &(v, i, j) in &l_terms {
            let mut e = DMatrix::zeros(m, n);
            e[(i, j)] = 1.0;
            let mut t = DMatrix::zeros(d, d);
            add_sym(&mut t, 0, mid, &ctx.coords.coupling(&zero_h, &e));
            add_sym(&mut t, low, mid, &(&ctx.weights.m_r * &e));
            terms.push((v, t));
        }
        for (idx, blk) in ctx.offline_blocks.iter().enumerate() {
            terms.push((tau_off + idx, place(d, 0, 0, blk)));
        }
        for (idx, blk) in ctx.online_blocks.iter().enumerate() {
            terms.push((delta_off + idx, place(d, 0, 0, blk)));
        }
        constraints.push(LmiConstraint {
            label: "decrease block".into(),
            family: ConstraintFamily::Decrease,
            sense: Sense::NegativeDefinite { margin: ctx.strict_margin },
            constant: DMatrix::zeros(d, d),
            terms,
        });
    }

    for idx in 0..n_tau {
        constraints.push(scalar_bound(format!("tau[{idx}] >= 0"), ConstraintFamily::Multipliers, tau_off + idx, 0.0));
    }
    for idx in 0..n_delta {
        constraints.push(scalar_bound(format!("delta[{idx}] >= 0"), ConstraintFamily::Multipliers, delta_off + idx, 0.0));
    }

    // input: [H LᵀM_uᵀ; M_u L I] ⪰ 0
    {
        let d = n + m;
        let mut c0 = DMatrix::zeros(d, d);
        c0.view_mut((n, n), (m, m)).fill_with_identity();
        let mut terms: Vec<(usize, DMatrix<f64>)> =
            h_terms.iter().map(|&(v, i, j)| (v, place(d, 0, 0, &sym_unit(n, i, j)))).collect();
        for &(v, i, j) in &l_terms {
            let mut e = DMatrix::zeros(m, n);
            e[(i, j)] = 1.0;
            terms.push((v, place(d, n, 0, &(&ctx.m_u * e))));
        }
        constraints.push(LmiConstraint {
            label: "[H L'Mu'; Mu L I] >= 0".into(),
            family: ConstraintFamily::Input,
            sense: Sense::Psd,
            constant: c0,
            terms,
        });
    }

    // state: [H H M_xᵀ; M_x H I] ⪰ 0
    {
        let d = 2 * n;
        let mut c0 = DMatrix::zeros(d, d);
        c0.view_mut((n, n), (n, n)).fill_with_identity();
        let terms = h_terms
            .iter()
            .map(|&(v, i, j)| {
                let e = sym_unit(n, i, j);
                let mut t = place(d, 0, 0, &e);
                add_sym(&mut t, n, 0, &(&ctx.m_x * &e));
                (v, t)
            })
            .collect();
        constraints.push(LmiConstraint {
            label: "[H H Mx'; Mx H I] >= 0".into(),
            family: ConstraintFamily::State,
            sense: Sense::Psd,
            constant: c0,
            terms,
        });
    }

    constraints.push(scalar_bound("gamma >= gamma_min".into(), ConstraintFamily::GammaPositive, i_gamma, GAMMA_MIN));

    let mut objective = DVector::zeros(nvar);
    objective[i_gamma] = 1.0;
    let p = SdpProblem { kind, objective, variables, constraints, context: Some(ctx) };
    p.validate()?;
    Ok(p)
}

fn scalar_bound(label: String, family: ConstraintFamily, var: usize, lower: f64) -> LmiConstraint {
    LmiConstraint {
        label,
        family,
        sense: Sense::Psd,
        constant: DMatrix::from_element(1, 1, -lower),
        terms: vec![(var, DMatrix::from_element(1, 1, 1.0))],
    }
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SolveStatus,
    /// Raw variable vector in declaration order.
    pub y: DVector<f64>,
    pub variables: Vec<VariableBlock>,
    /// Factor converting the raw multiplier variables to multipliers of the
    /// original data blocks (see [`DataCoordinates`]).
    pub multiplier_scale: f64,
    /// State scaling `D` of the solver coordinates; `H = D Ĥ D`, `L = L̂ D`.
    pub state_scale: Option<DVector<f64>>,
    /// Worst constraint violation found by [`verify_solution`] (0 if none).
    pub max_violation: f64,
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub iterations: usize,
    pub solve_ms: f64,
    pub detail: String,
}

impl SdpSolution {
    fn block(&self, name: &str) -> Result<&VariableBlock> {
        self.variables
            .iter()
            .find(|v| v.name == name)
            .ok_or_else(|| Error::InvalidProblem(format!("solution has no variable '{name}'")))
    }

    pub fn gamma(&self) -> Result<f64> {
        Ok(self.y[self.block("gamma")?.offset])
    }

    /// `H` in physical state coordinates.
    pub fn h(&self) -> Result<SymMatrix> {
        let h = self.h_raw()?;
        match &self.state_scale {
            Some(d) => SymMatrix::new(DMatrix::from_fn(d.len(), d.len(), |i, j| d[i] * h[(i, j)] * d[j])),
            None => SymMatrix::new(h),
        }
    }

    /// `L` in physical state coordinates.
    pub fn l(&self) -> Result<DMatrix<f64>> {
        let l = self.l_raw()?;
        Ok(match &self.state_scale {
            Some(d) => DMatrix::from_fn(l.nrows(), l.ncols(), |i, j| l[(i, j)] * d[j]),
            None => l,
        })
    }

    fn h_raw(&self) -> Result<DMatrix<f64>> {
        let b = self.block("H")?;
        let VarKind::Symmetric(n) = b.kind else {
            return Err(Error::InvalidProblem("H is not symmetric".into()));
        };
        Ok(DMatrix::from_fn(n, n, |i, j| self.y[b.offset + upper_index(n, i, j)]))
    }

    fn l_raw(&self) -> Result<DMatrix<f64>> {
        let b = self.block("L")?;
        let VarKind::Full(r, c) = b.kind else {
            return Err(Error::InvalidProblem("L is not a full matrix".into()));
        };
        Ok(DMatrix::from_row_slice(r, c, &self.y.as_slice()[b.offset..b.offset + r * c]))
    }

    /// Offline multipliers of the original data blocks.
    pub fn tau(&self) -> Result<DVector<f64>> {
        Ok(self.vector("tau")? * self.multiplier_scale)
    }

    /// Online multipliers; `None` for programs without online data.
    pub fn delta(&self) -> Option<DVector<f64>> {
        self.vector("delta").ok().map(|d| d * self.multiplier_scale)
    }

    fn vector(&self, name: &str) -> Result<DVector<f64>> {
        let b = self.block(name)?;
        Ok(DVector::from_column_slice(&self.y.as_slice()[b.offset..b.offset + b.kind.len()]))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.y[self.block(name)?.offset])
    }
}

/// Per-family worst residual (λ_min of the canonical `⪰ 0` form).
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyResidual {
    pub family: ConstraintFamily,
    pub worst: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub families: Vec<FamilyResidual>,
    pub tolerance: f64,
    pub max_violation: f64,
    pub pass: bool,
}

impl VerificationReport {
    pub fn residual(&self, family: ConstraintFamily) -> Option<f64> {
        self.families.iter().find(|f| f.family == family).map(|f| f.worst)
    }
}

impl std::fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for fam in &self.families {
            writeln!(f, "{:<15} worst {:+.3e} over {} constraint(s)", fam.family.label(), fam.worst, fam.count)?;
        }
        write!(f, "tolerance {:.1e}: {}", self.tolerance, if self.pass { "pass" } else { "FAIL" })
    }
}

/// Re-checks every constraint at `y`. MPC programs are rebuilt from their
/// source data (set blocks, state, weights) without touching the assembled
/// coefficient matrices; generic programs are evaluated term by term.
pub fn verify_point(problem: &SdpProblem, y: &DVector<f64>, feas_tol: f64) -> VerificationReport {
    let mut fams: Vec<FamilyResidual> = Vec::new();
    let mut record = |family: ConstraintFamily, r: f64| match fams.iter_mut().find(|f| f.family == family) {
        Some(f) => {
            f.worst = f.worst.min(r);
            f.count += 1;
        }
        None => fams.push(FamilyResidual { family, worst: r, count: 1 }),
    };
    let explicit = problem.context.as_ref().and_then(|ctx| explicit_residuals(problem, ctx, y).ok());
    match explicit {
        Some(list) => list.into_iter().for_each(|(f, r)| record(f, r)),
        None => problem.constraints.iter().for_each(|c| record(c.family, c.residual(y))),
    }
    let tolerance = 10.0 * feas_tol;
    let worst = fams.iter().map(|f| f.worst).fold(f64::INFINITY, f64::min);
    let max_violation = if worst.is_finite() { (-worst).max(0.0) } else if fams.is_empty() { 0.0 } else { f64::INFINITY };
    VerificationReport { families: fams, tolerance, max_violation, pass: max_violation <= tolerance }
}

/// Verification of a solver result; see [`verify_point`].
pub fn verify_solution(problem: &SdpProblem, sol: &SdpSolution, feas_tol: f64) -> VerificationReport {
    verify_point(problem, &sol.y, feas_tol)
}

fn explicit_residuals(problem: &SdpProblem, ctx: &MpcContext, y: &DVector<f64>) -> Result<Vec<(ConstraintFamily, f64)>> {
    let view = SdpSolution {
        status: SolveStatus::Optimal,
        y: y.clone(),
        variables: problem.variables.clone(),
        multiplier_scale: 1.0,
        state_scale: None,
        max_violation: 0.0,
        primal_obj: f64::NAN,
        dual_obj: f64::NAN,
        iterations: 0,
        solve_ms: 0.0,
        detail: String::new(),
    };
    let gamma = view.gamma()?;
    let h = view.h_raw()?;
    let l = view.l_raw()?;
    let tau_hat = view.vector("tau")?;
    let delta_hat = view.vector("delta").unwrap_or_else(|_| DVector::zeros(0));
    let n = h.nrows();
    let m = l.nrows();
    let mut out = Vec::new();

    let mut init = DMatrix::zeros(n + 1, n + 1);
    init[(0, 0)] = 1.0;
    init.view_mut((1, 0), (n, 1)).copy_from(&ctx.x_t);
    init.view_mut((0, 1), (1, n)).copy_from(&ctx.x_t.transpose());
    init.view_mut((1, 1), (n, n)).copy_from(&h);
    out.push((ConstraintFamily::Initial, canonical_residual(&init, Sense::Psd)));

    let k = 2 * n + m;
    let d = 4 * n + 2 * m;
    let mut big = DMatrix::zeros(d, d);
    let mut pi = DMatrix::zeros(k, k);
    for (t, group) in tau_hat.iter().zip(&ctx.offline) {
        pi += ctx.coords.group_block(group, &ctx.g_inv) * *t;
    }
    for (t, s) in delta_hat.iter().zip(&ctx.online) {
        pi += ctx.coords.block(s, &ctx.g_inv) * *t;
    }
    let mut top = pi;
    {
        let mut tl = top.view_mut((0, 0), (n, n));
        tl -= &h;
        for i in 0..n {
            tl[(i, i)] += gamma / (ctx.c * ctx.state_scale[i] * ctx.state_scale[i]);
        }
    }
    big.view_mut((0, 0), (k, k)).copy_from(&top);
    let col = ctx.coords.coupling(&h, &l);
    big.view_mut((0, k), (k, n)).copy_from(&col);
    big.view_mut((k, 0), (n, k)).copy_from(&col.transpose());
    big.view_mut((k, k), (n, n)).copy_from(&(-&h));
    let mut phi = DMatrix::zeros(n + m, n);
    phi.view_mut((0, 0), (m, n)).copy_from(&(&ctx.weights.m_r * &l));
    phi.view_mut((m, 0), (n, n)).copy_from(&(&ctx.weights.m_q * &h));
    big.view_mut((k + n, k), (n + m, n)).copy_from(&phi);
    big.view_mut((k, k + n), (n, n + m)).copy_from(&phi.transpose());
    big.view_mut((k + n, k + n), (n + m, n + m)).copy_from(&(-DMatrix::identity(n + m, n + m) * gamma));
    out.push((ConstraintFamily::Decrease, canonical_residual(&big, Sense::NegativeDefinite { margin: ctx.strict_margin })));

    for t in tau_hat.iter().chain(delta_hat.iter()) {
        out.push((ConstraintFamily::Multipliers, *t));
    }

    let mut inp = DMatrix::identity(n + m, n + m);
    inp.view_mut((0, 0), (n, n)).copy_from(&h);
    let mul = &ctx.m_u * &l;
    inp.view_mut((n, 0), (m, n)).copy_from(&mul);
    inp.view_mut((0, n), (n, m)).copy_from(&mul.transpose());
    out.push((ConstraintFamily::Input, canonical_residual(&inp, Sense::Psd)));

    let mut st = DMatrix::identity(2 * n, 2 * n);
    st.view_mut((0, 0), (n, n)).copy_from(&h);
    let mxh = &ctx.m_x * &h;
    st.view_mut((n, 0), (n, n)).copy_from(&mxh);
    st.view_mut((0, n), (n, n)).copy_from(&mxh.transpose());
    out.push((ConstraintFamily::State, canonical_residual(&st, Sense::Psd)));

    out.push((ConstraintFamily::GammaPositive, gamma - GAMMA_MIN));
    Ok(out)
}

/// Pluggable SDP backend. Instances may keep scratch state and must not be
/// shared between concurrent solves.
pub trait SdpSolver {
    fn name(&self) -> &str;
    fn solve(&mut self, problem: &SdpProblem, options: &SolverOptions) -> Result<SdpSolution>;
}

/// Reference backend: dense homogeneous self-dual interior-point method.
#[derive(Debug, Clone, Default)]
pub struct InteriorPointSolver {
    solves: usize,
}

impl InteriorPointSolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn solve_count(&self) -> usize {
        self.solves
    }
}

impl SdpSolver for InteriorPointSolver {
    fn name(&self) -> &str {
        "interior-point"
    }

    fn solve(&mut self, problem: &SdpProblem, options: &SolverOptions) -> Result<SdpSolution> {
        options.validate()?;
        problem.validate()?;
        self.solves += 1;
        let start = Instant::now();
        let mut conic = ipm::ConicProblem { c: problem.objective.clone(), psd: Vec::new(), lp: Vec::new() };
        for c in &problem.constraints {
            let (f0, terms) = c.canonical();
            if c.dim() == 1 {
                conic.lp.push(ipm::LpRow { f0: f0[(0, 0)], terms: terms.iter().map(|(i, t)| (*i, t[(0, 0)])).collect() });
            } else {
                conic.psd.push(ipm::PsdBlock { f0, terms });
            }
        }
        let r = ipm::solve_conic(&conic, options);
        let mut sol = SdpSolution {
            status: r.status,
            y: r.y,
            variables: problem.variables.clone(),
            multiplier_scale: problem.context.as_ref().map(|c| c.coords.multiplier_scale()).unwrap_or(1.0),
            state_scale: problem.context.as_ref().map(|c| c.state_scale.clone()),
            max_violation: f64::NAN,
            primal_obj: r.primal_obj,
            dual_obj: r.dual_obj,
            iterations: r.iterations,
            solve_ms: 0.0,
            detail: format!(
                "{} (pres {:.2e}, dres {:.2e}, gap {:.2e})",
                r.detail, r.primal_residual, r.dual_residual, r.gap
            ),
        };
        if sol.status == SolveStatus::Optimal {
            let report = verify_solution(problem, &sol, options.feas_tol);
            sol.max_violation = report.max_violation;
            if report.max_violation > options.feas_tol {
                sol.status = SolveStatus::NumericalFailure;
                sol.detail = format!("{}; verification found violation {:.2e}", sol.detail, report.max_violation);
            }
        }
        sol.solve_ms = start.elapsed().as_secs_f64() * 1e3;
        log::debug!("sdp {:?}: {} in {} iterations, {:.1} ms", problem.kind, sol.status, sol.iterations, sol.solve_ms);
        Ok(sol)
    }
}

/// Solves with a fresh reference backend.
pub fn solve(problem: &SdpProblem, options: &SolverOptions) -> Result<SdpSolution> {
    InteriorPointSolver::new().solve(problem, options)
}

/// Gain, Lyapunov matrix and cost bound: `F = L H⁻¹`, `P = γ H⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub f: DMatrix<f64>,
    pub p: SymMatrix,
    pub gamma: f64,
}

impl Certificate {
    pub fn new(f: DMatrix<f64>, p: SymMatrix, gamma: f64) -> Result<Self> {
        if f.ncols() != p.dim() {
            return Err(Error::DimError(format!("gain has {} columns, P is {}", f.ncols(), p.dim())));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidMatrix(format!("γ = {gamma:e} must be positive")));
        }
        let min = min_eigenvalue(&p)?;
        if min <= 0.0 {
            return Err(Error::NotPsd { min_eig: min });
        }
        Ok(Self { f, p, gamma })
    }

    pub fn from_parts(gamma: f64, h: &SymMatrix, l: &DMatrix<f64>) -> Result<Self> {
        let min = min_eigenvalue(h)?;
        if min <= 0.0 {
            return Err(Error::NotPsd { min_eig: min });
        }
        let h_inv = h.inverse()?;
        let f = l * h_inv.as_matrix();
        Self::new(f, h_inv.scale(gamma), gamma)
    }

    /// `‖x‖²_P`.
    pub fn value(&self, x: &DVector<f64>) -> Result<f64> {
        crate::numerics::weighted_norm_sq(x, &self.p)
    }

    pub fn input(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.f * x
    }
}

pub fn extract_certificate(sol: &SdpSolution) -> Result<Certificate> {
    if sol.status != SolveStatus::Optimal {
        return Err(Error::NoSolution(sol.status.to_string()));
    }
    Certificate::from_parts(sol.gamma()?, &sol.h()?, &sol.l()?)
}
