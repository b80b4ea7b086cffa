//! Dual-mode receding-horizon controllers.
//!
//! In RECEDING mode the controller re-solves the SDP at every state and
//! applies `F*·x_t`. Once `γ*` drops to the RPI threshold
//! `c² / (λ_min(Q)·λ_min(G))` it freezes the previous step's certificate and
//! applies that static gain from then on.

use std::io::{Read, Write};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::consistency::{ConsistencySet, MultiplierMode};
use crate::error::{Error, Result};
use crate::numerics::{min_eigenvalue, CostWeights, SymMatrix};
use crate::plant::{ConstraintSet, LtiPlant, NoiseSampler};
use crate::sdp::{
    assemble, extract_certificate, Certificate, InteriorPointSolver, ProblemKind, SdpSolver, SolveStatus,
    SolverOptions,
};

/// States with a larger Euclidean norm count as diverged.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub c: f64,
    pub weights: CostWeights,
    pub constraints: ConstraintSet,
    /// Noise bound `‖ω‖_G ≤ 1`.
    pub g: SymMatrix,
    pub multiplier_mode: MultiplierMode,
    pub solver: SolverOptions,
    /// Stop adding online samples once this many are in the set.
    pub max_online_blocks: Option<usize>,
}

impl MpcConfig {
    pub fn new(
        c: f64,
        weights: CostWeights,
        constraints: ConstraintSet,
        g: SymMatrix,
        multiplier_mode: MultiplierMode,
    ) -> Result<Self> {
        let cfg = Self {
            c,
            weights,
            constraints,
            g,
            multiplier_mode,
            solver: SolverOptions::default(),
            max_online_blocks: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.weights.n();
        if self.g.dim() != n || self.constraints.s_x.dim() != n || self.constraints.s_u.dim() != self.weights.m() {
            return Err(Error::DimError(format!(
                "Q is {n}×{n}, R is {m}×{m}, G is {g}×{g}, S_u is {su}×{su}, S_x is {sx}×{sx}",
                m = self.weights.m(),
                g = self.g.dim(),
                su = self.constraints.s_u.dim(),
                sx = self.constraints.s_x.dim()
            )));
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::ConfigError(format!("c = {:e} must be positive and finite", self.c)));
        }
        // the program needs Q ≺ P ≺ cI, which is impossible for c ≤ λ_min(Q)
        let lq = min_eigenvalue(&self.weights.q)?;
        if self.c <= lq {
            log::warn!("c = {:e} does not exceed λ_min(Q) = {lq:e}", self.c);
            return Err(Error::InitialInfeasible { c: self.c });
        }
        self.solver.validate()
    }

    /// `c² / (λ_min(Q)·λ_min(G))`, computed from the current fields.
    pub fn rpi_threshold(&self) -> Result<f64> {
        let lq = min_eigenvalue(&self.weights.q)?;
        let lg = min_eigenvalue(&self.g)?;
        Ok(self.c * self.c / (lq * lg))
    }

    /// Contraction factor `1 − λ_min(Q)/c` of the decrease inequality.
    pub fn contraction(&self) -> Result<f64> {
        Ok(1.0 - min_eigenvalue(&self.weights.q)? / self.c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Receding,
    Static,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Receding => "RECEDING",
            Self::Static => "STATIC",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "RECEDING" => Ok(Self::Receding),
            "STATIC" => Ok(Self::Static),
            other => Err(Error::Parse(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Robust,
    Adaptive,
    StaticFromT0,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::StaticFromT0, Scheme::Robust, Scheme::Adaptive];
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Robust => "robust",
            Self::Adaptive => "adaptive",
            Self::StaticFromT0 => "static_from_t0",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "robust" => Ok(Self::Robust),
            "adaptive" => Ok(Self::Adaptive),
            "static_from_t0" | "static" => Ok(Self::StaticFromT0),
            other => Err(Error::ConfigError(format!("unknown scheme '{other}'"))),
        }
    }
}

/// What happened at one controller invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub t: usize,
    /// Mode after the step; the switch step already reports STATIC.
    pub mode: Mode,
    /// `γ*` if an SDP was solved at this step.
    pub gamma: Option<f64>,
    /// `‖x_t‖²_P` in the certificate that produced `u_t`.
    pub v: f64,
    pub solve_ms: f64,
    /// Certificate computed at this step, if any.
    pub certificate: Option<Certificate>,
}

#[derive(Debug, Clone)]
pub struct ControllerState {
    pub mode: Mode,
    pub frozen: Option<Certificate>,
    pub last_certificate: Option<Certificate>,
    pub step: usize,
    pub set: ConsistencySet,
    pub history: Vec<StepInfo>,
    /// `(x_{t−1}, u_{t−1})` for the next online sample.
    pub previous: Option<(DVector<f64>, DVector<f64>)>,
    solver: InteriorPointSolver,
}

impl ControllerState {
    pub fn new(set: ConsistencySet) -> Self {
        Self {
            mode: Mode::Receding,
            frozen: None,
            last_certificate: None,
            step: 0,
            set,
            history: Vec::new(),
            previous: None,
            solver: InteriorPointSolver::new(),
        }
    }

    pub fn solve_count(&self) -> usize {
        self.solver.solve_count()
    }

    fn solve(&mut self, x_t: &DVector<f64>, cfg: &MpcConfig, adaptive: bool) -> Result<(Certificate, f64)> {
        let kind = if adaptive { ProblemKind::Adaptive } else { ProblemKind::Robust };
        let problem =
            assemble(kind, &self.set, x_t, &cfg.weights, &cfg.constraints, cfg.c, cfg.solver.strict_margin)?;
        let sol = self.solver.solve(&problem, &cfg.solver)?;
        if sol.status != SolveStatus::Optimal {
            return Err(if self.step == 0 && sol.status == SolveStatus::Infeasible {
                Error::InitialInfeasible { c: cfg.c }
            } else {
                Error::SolverFailed { step: self.step, detail: format!("{}: {}", sol.status, sol.detail) }
            });
        }
        let cert = extract_certificate(&sol).map_err(|e| Error::SolverFailed {
            step: self.step,
            detail: format!("certificate extraction failed: {e}"),
        })?;
        Ok((cert, sol.solve_ms))
    }

    fn static_step(&mut self, x_t: &DVector<f64>) -> Result<DVector<f64>> {
        let frozen = self.frozen.as_ref().expect("STATIC mode carries a frozen certificate");
        let u = frozen.input(x_t);
        let v = frozen.value(x_t)?;
        self.history.push(StepInfo { t: self.step, mode: Mode::Static, gamma: None, v, solve_ms: 0.0, certificate: None });
        Ok(u)
    }

    fn receding_step(&mut self, x_t: &DVector<f64>, cfg: &MpcConfig, adaptive: bool) -> Result<DVector<f64>> {
        let threshold = cfg.rpi_threshold()?;
        let started = Instant::now();
        let (cert, _) = self.solve(x_t, cfg, adaptive)?;
        let solve_ms = started.elapsed().as_secs_f64() * 1e3;
        let gamma = cert.gamma;
        let (mode, used) = if gamma > threshold {
            (Mode::Receding, cert.clone())
        } else {
            let frozen = match self.last_certificate.take() {
                Some(prev) => prev,
                None => {
                    log::warn!(
                        "γ* = {gamma:e} is already below the RPI threshold {threshold:e} at t = {}; freezing the current certificate",
                        self.step
                    );
                    cert.clone()
                }
            };
            self.frozen = Some(frozen.clone());
            self.mode = Mode::Static;
            (Mode::Static, frozen)
        };
        let u = used.input(x_t);
        let v = used.value(x_t)?;
        self.history.push(StepInfo { t: self.step, mode, gamma: Some(gamma), v, solve_ms, certificate: Some(cert.clone()) });
        self.last_certificate = Some(cert);
        Ok(u)
    }

    fn finish(&mut self, x_t: &DVector<f64>, u: &DVector<f64>) {
        self.previous = Some((x_t.clone(), u.clone()));
        self.step += 1;
    }
}

fn check_dims(state: &ControllerState, x_t: &DVector<f64>, cfg: &MpcConfig) -> Result<()> {
    if x_t.len() != state.set.n() || cfg.weights.n() != state.set.n() || cfg.weights.m() != state.set.m() {
        return Err(Error::DimError(format!(
            "state has length {}, data set is {} states / {} inputs, weights are {} / {}",
            x_t.len(),
            state.set.n(),
            state.set.m(),
            cfg.weights.n(),
            cfg.weights.m()
        )));
    }
    if state.set.mode != cfg.multiplier_mode {
        return Err(Error::ConfigError(format!(
            "data set uses {} multipliers but the configuration asks for {}",
            state.set.mode, cfg.multiplier_mode
        )));
    }
    Ok(())
}

/// One step of the robust scheme (offline data only).
pub fn robust_step(
    mut state: ControllerState,
    x_t: &DVector<f64>,
    cfg: &MpcConfig,
) -> Result<(DVector<f64>, ControllerState)> {
    check_dims(&state, x_t, cfg)?;
    let u = match state.mode {
        Mode::Static => state.static_step(x_t)?,
        Mode::Receding => state.receding_step(x_t, cfg, false)?,
    };
    state.finish(x_t, &u);
    Ok((u, state))
}

/// One step of the adaptive scheme: the newest online sample joins the set
/// before solving.
pub fn adaptive_step(
    mut state: ControllerState,
    x_t: &DVector<f64>,
    cfg: &MpcConfig,
) -> Result<(DVector<f64>, ControllerState)> {
    check_dims(&state, x_t, cfg)?;
    let u = match state.mode {
        Mode::Static => state.static_step(x_t)?,
        Mode::Receding => {
            let room = cfg.max_online_blocks.is_none_or(|cap| state.set.online_count() < cap);
            if let (Some((x_prev, u_prev)), true) = (&state.previous, room) {
                state.set = state.set.push_online(x_prev, u_prev, x_t)?;
            }
            state.receding_step(x_t, cfg, true)?
        }
    };
    state.finish(x_t, &u);
    Ok((u, state))
}

/// Computes the `t = 0` certificate and keeps its gain for every step.
fn static_from_t0_step(
    mut state: ControllerState,
    x_t: &DVector<f64>,
    cfg: &MpcConfig,
) -> Result<(DVector<f64>, ControllerState)> {
    check_dims(&state, x_t, cfg)?;
    let u = if state.step == 0 {
        let started = Instant::now();
        let (cert, _) = state.solve(x_t, cfg, false)?;
        let solve_ms = started.elapsed().as_secs_f64() * 1e3;
        let u = cert.input(x_t);
        let v = cert.value(x_t)?;
        state.history.push(StepInfo {
            t: 0,
            mode: Mode::Static,
            gamma: Some(cert.gamma),
            v,
            solve_ms,
            certificate: Some(cert.clone()),
        });
        state.mode = Mode::Static;
        state.frozen = Some(cert.clone());
        state.last_certificate = Some(cert);
        u
    } else {
        state.static_step(x_t)?
    };
    state.finish(x_t, &u);
    Ok((u, state))
}

/// One logged closed-loop step.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub t: usize,
    pub mode: Mode,
    pub gamma: Option<f64>,
    pub v: f64,
    pub stage_cost: f64,
    pub solve_ms: f64,
    pub u: DVector<f64>,
    pub x: DVector<f64>,
    pub margin_u: f64,
    pub margin_x: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub rows: Vec<RunRow>,
    /// Certificate computed at each step (`None` when no SDP was solved).
    pub certificates: Vec<Option<Certificate>>,
    /// Static certificate, once frozen.
    pub frozen: Option<Certificate>,
    /// State after the last logged step.
    pub final_state: Option<DVector<f64>>,
}

impl RunLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n(&self) -> usize {
        self.rows.first().map(|r| r.x.len()).unwrap_or(0)
    }

    pub fn m(&self) -> usize {
        self.rows.first().map(|r| r.u.len()).unwrap_or(0)
    }

    pub fn total_cost(&self) -> f64 {
        self.rows.iter().map(|r| r.stage_cost).sum()
    }

    /// First step that ran in STATIC mode.
    pub fn rpi_entry_step(&self) -> Option<usize> {
        self.rows.iter().find(|r| r.mode == Mode::Static).map(|r| r.t)
    }

    /// Writes `t,mode,gamma,V,stage_cost,solve_ms,u_*,x_*,margin_u,margin_x`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let (n, m) = (self.n(), self.m());
        let mut header: Vec<String> = ["t", "mode", "gamma", "V", "stage_cost", "solve_ms"].map(String::from).to_vec();
        header.extend((0..m).map(|j| format!("u_{j}")));
        header.extend((0..n).map(|j| format!("x_{j}")));
        header.extend(["margin_u".to_string(), "margin_x".to_string()]);
        wtr.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.t.to_string(),
                r.mode.to_string(),
                r.gamma.map(|g| g.to_string()).unwrap_or_default(),
                r.v.to_string(),
                r.stage_cost.to_string(),
                r.solve_ms.to_string(),
            ];
            rec.extend(r.u.iter().map(|v| v.to_string()));
            rec.extend(r.x.iter().map(|v| v.to_string()));
            rec.extend([r.margin_u.to_string(), r.margin_x.to_string()]);
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the rows written by [`RunLog::write_csv`]. Certificates are not
    /// part of this file; see [`RunLog::read_certificates_csv`].
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let m = header.iter().filter(|h| h.starts_with("u_")).count();
        let n = header.iter().filter(|h| h.starts_with("x_")).count();
        let expected = ["t", "mode", "gamma", "V", "stage_cost", "solve_ms"];
        if header.len() != 8 + m + n || header.iter().take(6).ne(expected) {
            return Err(Error::Parse("unexpected run log header".into()));
        }
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let t = rec[0].trim().parse::<usize>().map_err(|e| Error::Parse(format!("{:?}: {e}", &rec[0])))?;
            let gamma = if rec[2].trim().is_empty() { None } else { Some(parse(&rec[2])?) };
            let u = (0..m).map(|j| parse(&rec[6 + j])).collect::<Result<Vec<_>>>()?;
            let x = (0..n).map(|j| parse(&rec[6 + m + j])).collect::<Result<Vec<_>>>()?;
            rows.push(RunRow {
                t,
                mode: rec[1].parse()?,
                gamma,
                v: parse(&rec[3])?,
                stage_cost: parse(&rec[4])?,
                solve_ms: parse(&rec[5])?,
                u: DVector::from_vec(u),
                x: DVector::from_vec(x),
                margin_u: parse(&rec[6 + m + n])?,
                margin_x: parse(&rec[7 + m + n])?,
            });
        }
        let certificates = vec![None; rows.len()];
        Ok(Self { rows, certificates, frozen: None, final_state: None })
    }

    /// Writes the per-step and frozen certificates as
    /// `t,kind,gamma,F_ij...,P_ij...` with row-major matrices.
    pub fn write_certificates_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let (n, m) = (self.n(), self.m());
        let mut header: Vec<String> = ["t", "kind", "gamma"].map(String::from).to_vec();
        header.extend((0..m).flat_map(|i| (0..n).map(move |j| format!("F_{i}{j}"))));
        header.extend((0..n).flat_map(|i| (0..n).map(move |j| format!("P_{i}{j}"))));
        wtr.write_record(&header)?;
        let mut emit = |t: String, kind: &str, c: &Certificate| -> Result<()> {
            let mut rec = vec![t, kind.to_string(), c.gamma.to_string()];
            rec.extend((0..m).flat_map(|i| (0..n).map(move |j| c.f[(i, j)].to_string())));
            let p = c.p.as_matrix();
            rec.extend((0..n).flat_map(|i| (0..n).map(move |j| p[(i, j)].to_string())));
            wtr.write_record(&rec)?;
            Ok(())
        };
        for (t, c) in self.certificates.iter().enumerate() {
            if let Some(c) = c {
                emit(t.to_string(), "step", c)?;
            }
        }
        if let Some(c) = &self.frozen {
            emit(String::new(), "frozen", c)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Attaches certificates written by [`RunLog::write_certificates_csv`].
    pub fn read_certificates_csv<R: Read>(&mut self, r: R) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        let mut rdr = csv::Reader::from_reader(r);
        if rdr.headers()?.len() != 3 + m * n + n * n {
            return Err(Error::Parse("certificate header does not match the run log dimensions".into()));
        }
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
        self.certificates = vec![None; self.rows.len()];
        self.frozen = None;
        for rec in rdr.records() {
            let rec = rec?;
            let gamma = parse(&rec[2])?;
            let f = (0..m * n).map(|k| parse(&rec[3 + k])).collect::<Result<Vec<_>>>()?;
            let p = (0..n * n).map(|k| parse(&rec[3 + m * n + k])).collect::<Result<Vec<_>>>()?;
            let cert = Certificate {
                f: DMatrix::from_row_slice(m, n, &f),
                p: SymMatrix::from_row_slice(n, &p)?,
                gamma,
            };
            match &rec[1] {
                "frozen" => self.frozen = Some(cert),
                "step" => {
                    let t = rec[0].trim().parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?;
                    let slot = self
                        .certificates
                        .get_mut(t)
                        .ok_or_else(|| Error::Parse(format!("certificate for step {t} beyond the log")))?;
                    *slot = Some(cert);
                }
                other => return Err(Error::Parse(format!("unknown certificate kind '{other}'"))),
            }
        }
        Ok(())
    }
}

/// One controller step under `scheme`.
pub fn step(
    scheme: Scheme,
    state: ControllerState,
    x_t: &DVector<f64>,
    cfg: &MpcConfig,
) -> Result<(DVector<f64>, ControllerState)> {
    match scheme {
        Scheme::Robust => robust_step(state, x_t, cfg),
        Scheme::Adaptive => adaptive_step(state, x_t, cfg),
        Scheme::StaticFromT0 => static_from_t0_step(state, x_t, cfg),
    }
}

/// Runs `steps` closed-loop steps on the true plant from `x0`.
pub fn run_closed_loop(
    plant: &LtiPlant,
    set: ConsistencySet,
    cfg: &MpcConfig,
    scheme: Scheme,
    x0: &DVector<f64>,
    steps: usize,
    noise: &mut NoiseSampler,
) -> Result<RunLog> {
    cfg.validate()?;
    if x0.len() != plant.n() || set.n() != plant.n() || set.m() != plant.m() {
        return Err(Error::DimError(format!(
            "plant is {} states / {} inputs, data set {} / {}, x0 has length {}",
            plant.n(),
            plant.m(),
            set.n(),
            set.m(),
            x0.len()
        )));
    }
    let mut state = ControllerState::new(set);
    let mut rows = Vec::with_capacity(steps);
    let mut x = x0.clone();
    for t in 0..steps {
        let (u, next) = step(scheme, state, &x, cfg)?;
        state = next;
        let info = state.history.last().expect("every step is logged");
        rows.push(RunRow {
            t,
            mode: info.mode,
            gamma: info.gamma,
            v: info.v,
            stage_cost: cfg.weights.stage_cost(&u, &x)?,
            solve_ms: info.solve_ms,
            margin_u: cfg.constraints.input_margin(&u)?,
            margin_x: cfg.constraints.state_margin(&x)?,
            u: u.clone(),
            x: x.clone(),
        });
        let w = noise.sample();
        x = plant.step(&x, &u, &w);
        if !x.iter().all(|v| v.is_finite()) || x.norm() > DIVERGENCE_NORM {
            return Err(Error::Diverged { step: t + 1 });
        }
    }
    let certificates = state.history.iter().map(|h| h.certificate.clone()).collect();
    Ok(RunLog { rows, certificates, frozen: state.frozen.clone(), final_state: (steps > 0).then_some(x) })
}
