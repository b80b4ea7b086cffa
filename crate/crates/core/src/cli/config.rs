//! Experiment configuration file (TOML with `scenario`, `mpc`, `solver` and
//! `output` sections). Every scenario field is optional and falls back to
//! the named built-in scenario.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::consistency::MultiplierMode;
use crate::controller::{MpcConfig, Scheme};
use crate::error::{Error, Result};
use crate::numerics::{CostWeights, SymMatrix};
use crate::plant::{builtin_scenario, ConstraintSet, LtiPlant, NoiseDistribution, Scenario, ScenarioName};
use crate::sdp::SolverOptions;

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSection,
    pub mpc: MpcSection,
    pub solver: SolverOptions,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    /// Built-in scenario supplying every field left unset.
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<Rows>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<Rows>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub g: Option<Rows>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<Rows>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<Rows>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_u: Option<Rows>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_x: Option<Rows>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_f: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excitation: Option<[f64; 2]>,
    pub seed: u64,
    pub noise: String,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            name: "suspension".into(),
            a: None,
            b: None,
            g: None,
            q: None,
            r: None,
            s_u: None,
            s_x: None,
            x0: None,
            t_f: None,
            steps: None,
            excitation: None,
            seed: 7,
            noise: "uniform_ball".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    pub scheme: String,
    pub multiplier_mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_online_blocks: Option<usize>,
}

impl Default for MpcSection {
    fn default() -> Self {
        Self { c: None, scheme: "robust".into(), multiplier_mode: "common".into(), max_online_blocks: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub plots: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: None, plots: true }
    }
}

/// A configuration with every default filled in and every matrix validated.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub scenario: Scenario,
    pub seed: u64,
    pub noise: NoiseDistribution,
    pub scheme: Scheme,
    pub mpc: MpcConfig,
}

impl Experiment {
    pub fn c(&self) -> f64 {
        self.mpc.c
    }
}

fn matrix(name: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map(|row| row.len()).unwrap_or(0);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(Error::ConfigError(format!("{name} must be a non-empty rectangular array of rows")));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

fn sym(name: &str, rows: &Rows) -> Result<SymMatrix> {
    let m = matrix(name, rows)?;
    if !m.is_square() {
        return Err(Error::ConfigError(format!("{name} must be square, got {}×{}", m.nrows(), m.ncols())));
    }
    SymMatrix::new(m).map_err(|e| Error::ConfigError(format!("{name}: {e}")))
}

pub fn rows_of(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigError(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigError(e.to_string()))
    }

    /// Fills defaults from the built-in scenario and validates dimensions.
    pub fn resolve(&self) -> Result<Experiment> {
        let sc = &self.scenario;
        let base = builtin_scenario(sc.name.parse::<ScenarioName>()?);
        let a = sc.a.as_ref().map(|m| matrix("scenario.a", m)).transpose()?.unwrap_or(base.plant.a.clone());
        let b = sc.b.as_ref().map(|m| matrix("scenario.b", m)).transpose()?.unwrap_or(base.plant.b.clone());
        let g = sc.g.as_ref().map(|m| sym("scenario.g", m)).transpose()?.unwrap_or(base.plant.g.clone());
        let plant = LtiPlant::new(a, b, g)?;
        let (n, m) = (plant.n(), plant.m());
        let q = sc.q.as_ref().map(|m| sym("scenario.q", m)).transpose()?.unwrap_or(base.weights.q.clone());
        let r = sc.r.as_ref().map(|m| sym("scenario.r", m)).transpose()?.unwrap_or(base.weights.r.clone());
        let s_u = sc.s_u.as_ref().map(|m| sym("scenario.s_u", m)).transpose()?.unwrap_or(base.constraints.s_u.clone());
        let s_x = sc.s_x.as_ref().map(|m| sym("scenario.s_x", m)).transpose()?.unwrap_or(base.constraints.s_x.clone());
        let x0 = sc.x0.as_ref().map(|v| DVector::from_vec(v.clone())).unwrap_or(base.x0.clone());
        let dims = [("Q", q.dim(), n), ("R", r.dim(), m), ("S_u", s_u.dim(), m), ("S_x", s_x.dim(), n), ("x0", x0.len(), n)];
        if let Some((name, got, want)) = dims.iter().find(|(_, got, want)| got != want) {
            return Err(Error::ConfigError(format!("{name} has dimension {got}, the plant needs {want}")));
        }
        let weights = CostWeights::new(q, r)?;
        let constraints = ConstraintSet::new(s_u, s_x)?;
        let t_f = sc.t_f.unwrap_or(base.t_f);
        if t_f == 0 {
            return Err(Error::ConfigError("scenario.t_f must be at least 1".into()));
        }
        let excitation = sc.excitation.map(|[lo, hi]| (lo, hi)).unwrap_or(base.excitation);
        if !(excitation.0 < excitation.1) {
            return Err(Error::ConfigError("scenario.excitation must be an interval [lo, hi] with lo < hi".into()));
        }
        let scenario = Scenario {
            plant,
            weights,
            constraints,
            x0,
            c: self.mpc.c.unwrap_or(base.c),
            t_f,
            steps: sc.steps.unwrap_or(base.steps),
            excitation,
        };
        let mode: MultiplierMode = self.mpc.multiplier_mode.parse()?;
        let mut mpc = MpcConfig::new(
            scenario.c,
            scenario.weights.clone(),
            scenario.constraints.clone(),
            scenario.plant.g.clone(),
            mode,
        )?;
        mpc.solver = self.solver.clone();
        mpc.max_online_blocks = self.mpc.max_online_blocks;
        mpc.validate()?;
        Ok(Experiment { scenario, seed: sc.seed, noise: sc.noise.parse()?, scheme: self.mpc.scheme.parse()?, mpc })
    }
}
