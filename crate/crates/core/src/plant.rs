//! Ground-truth LTI plant, ellipsoid-bounded process noise, offline data
//! collection and the two built-in scenarios.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{min_eigenvalue, sqrt_factor, weighted_norm_sq, CostWeights, SymMatrix};

/// `x⁺ = A x + B u + ω` with `‖ω‖_G ≤ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub g: SymMatrix,
}

impl LtiPlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, g: SymMatrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimError(format!("A must be square, got {}x{}", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::DimError(format!("B must have {n} rows, got {}", b.nrows())));
        }
        if g.dim() != n {
            return Err(Error::DimError(format!("G must be {n}x{n}, got {}x{}", g.dim(), g.dim())));
        }
        if min_eigenvalue(&g)? <= 0.0 {
            return Err(Error::NotPsd { min_eig: min_eigenvalue(&g)? });
        }
        Ok(Self { a, b, g })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + w
    }

    /// Content hash of (A, B, G) for metadata sidecars (FNV-1a over the bit patterns).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.a.iter().chain(self.b.iter()).chain(self.g.as_matrix().iter()) {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Ellipsoidal input/state constraints `‖u‖_{S_u} ≤ 1`, `‖x‖_{S_x} ≤ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub s_u: SymMatrix,
    pub s_x: SymMatrix,
}

impl ConstraintSet {
    pub fn new(s_u: SymMatrix, s_x: SymMatrix) -> Result<Self> {
        let min_u = min_eigenvalue(&s_u)?;
        if min_u <= 0.0 {
            return Err(Error::ConfigError(format!(
                "S_u must be positive definite (min eigenvalue {min_u:e})"
            )));
        }
        let min_x = min_eigenvalue(&s_x)?;
        if min_x < -crate::numerics::PSD_TOL {
            return Err(Error::ConfigError(format!(
                "S_x must be positive semidefinite (min eigenvalue {min_x:e})"
            )));
        }
        Ok(Self { s_u, s_x })
    }

    /// `1 - ‖u‖_{S_u}`; negative means violation.
    pub fn input_margin(&self, u: &DVector<f64>) -> Result<f64> {
        Ok(1.0 - weighted_norm_sq(u, &self.s_u)?.max(0.0).sqrt())
    }

    /// `1 - ‖x‖_{S_x}`; negative means violation.
    pub fn state_margin(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(1.0 - weighted_norm_sq(x, &self.s_x)?.max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseDistribution {
    /// Uniform over the ellipsoid `{ω : ‖ω‖_G ≤ 1}`.
    UniformBall,
    /// Uniform over the ellipsoid surface `‖ω‖_G = 1`.
    Boundary,
    Zero,
}

impl std::str::FromStr for NoiseDistribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform_ball" | "uniform" => Ok(Self::UniformBall),
            "boundary" => Ok(Self::Boundary),
            "zero" | "none" => Ok(Self::Zero),
            other => Err(Error::ConfigError(format!("unknown noise distribution '{other}'"))),
        }
    }
}

/// Seeded noise source. The generator is ChaCha8 (`rand_chacha`), which
/// produces the same stream on every platform for a given seed.
///
/// Not meant to be shared between simulations; use [`NoiseSampler::fork`]
/// to get an independent stream.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    g: SymMatrix,
    g_inv_sqrt: DMatrix<f64>,
    seed: u64,
    distribution: NoiseDistribution,
    rng: ChaCha8Rng,
}

impl NoiseSampler {
    pub fn new(g: SymMatrix, seed: u64, distribution: NoiseDistribution) -> Result<Self> {
        let g_inv_sqrt = sqrt_factor(&g.inverse()?)?;
        Ok(Self { g, g_inv_sqrt, seed, distribution, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn distribution(&self) -> NoiseDistribution {
        self.distribution
    }

    pub fn g(&self) -> &SymMatrix {
        &self.g
    }

    /// Fresh sampler on a seed derived from this one.
    pub fn fork(&self, stream: u64) -> Self {
        let seed = derive_seed(self.seed, stream);
        Self { rng: ChaCha8Rng::seed_from_u64(seed), seed, ..self.clone() }
    }

    pub fn sample(&mut self) -> DVector<f64> {
        let n = self.g.dim();
        let radius = match self.distribution {
            NoiseDistribution::Zero => return DVector::zeros(n),
            NoiseDistribution::Boundary => 1.0,
            NoiseDistribution::UniformBall => {
                let u: f64 = self.rng.random();
                u.powf(1.0 / n as f64)
            }
        };
        let dir = unit_direction(&mut self.rng, n);
        &self.g_inv_sqrt * dir * radius
    }
}

/// Uniformly distributed unit vector (normalized Gaussian).
pub(crate) fn unit_direction<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// SplitMix64 mix of a base seed and a stream id.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Input sequence `U` (m×T), state sequence `X` (n×(T+1)) and the noise bound.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRecord {
    pub u: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub g: SymMatrix,
    /// Realized noise (n×T) when the record came from [`simulate`].
    pub noise: Option<DMatrix<f64>>,
}

impl DataRecord {
    pub fn new(u: DMatrix<f64>, x: DMatrix<f64>, g: SymMatrix) -> Result<Self> {
        if x.ncols() != u.ncols() + 1 {
            return Err(Error::DimError(format!(
                "X must have one more column than U ({} vs {})",
                x.ncols(),
                u.ncols()
            )));
        }
        if g.dim() != x.nrows() {
            return Err(Error::DimError("G does not match the state dimension".into()));
        }
        let min_eig = min_eigenvalue(&g)?;
        if min_eig <= 0.0 {
            return Err(Error::NotPsd { min_eig });
        }
        if u.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix("data contain non-finite entries".into()));
        }
        Ok(Self { u, x, g, noise: None })
    }

    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.u.ncols() == 0
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.u.nrows()
    }

    /// The triple `(x_i, u_i, x_{i+1})`.
    pub fn triple(&self, i: usize) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        (self.x.column(i).into_owned(), self.u.column(i).into_owned(), self.x.column(i + 1).into_owned())
    }

    /// Writes `t,u_0..,x_0..`; the last row carries the terminal state with empty input cells.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.m()).map(|j| format!("u_{j}")));
        header.extend((0..self.n()).map(|j| format!("x_{j}")));
        wtr.write_record(&header)?;
        for t in 0..=self.len() {
            let mut row = vec![t.to_string()];
            for j in 0..self.m() {
                row.push(if t < self.len() { self.u[(j, t)].to_string() } else { String::new() });
            }
            row.extend((0..self.n()).map(|j| self.x[(j, t)].to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, g: SymMatrix) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let m = header.iter().filter(|h| h.starts_with("u_")).count();
        let n = header.iter().filter(|h| h.starts_with("x_")).count();
        if header.len() != 1 + m + n || n == 0 {
            return Err(Error::Parse("unexpected data record header".into()));
        }
        let mut us: Vec<f64> = Vec::new();
        let mut xs: Vec<f64> = Vec::new();
        let mut rows = 0usize;
        let mut terminal = false;
        for rec in rdr.records() {
            let rec = rec?;
            if terminal {
                return Err(Error::Parse("rows after the terminal state row".into()));
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
            let ucells: Vec<&str> = (1..=m).map(|j| &rec[j]).collect();
            if ucells.iter().all(|c| c.trim().is_empty()) {
                terminal = true;
            } else {
                for c in ucells {
                    us.push(parse(c)?);
                }
            }
            for j in 0..n {
                xs.push(parse(&rec[1 + m + j])?);
            }
            rows += 1;
        }
        if !terminal || rows < 2 {
            return Err(Error::Parse("data record needs at least one step and a terminal row".into()));
        }
        let t = rows - 1;
        let u = DMatrix::from_column_slice(m, t, &us);
        let x = DMatrix::from_column_slice(n, t + 1, &xs);
        Self::new(u, x, g)
    }
}

/// Runs `x_{k+1} = A x_k + B u_k + ω_k`, storing the realized noise.
pub fn simulate(
    plant: &LtiPlant,
    x0: &DVector<f64>,
    inputs: &DMatrix<f64>,
    noise: &mut NoiseSampler,
) -> Result<DataRecord> {
    let (n, m) = (plant.n(), plant.m());
    if x0.len() != n || inputs.nrows() != m {
        return Err(Error::DimError(format!(
            "plant is {n} states / {m} inputs, got x0 of length {} and {} input rows",
            x0.len(),
            inputs.nrows()
        )));
    }
    if inputs.ncols() == 0 {
        return Err(Error::DimError("simulation needs at least one input".into()));
    }
    let t = inputs.ncols();
    let mut x = DMatrix::zeros(n, t + 1);
    let mut w = DMatrix::zeros(n, t);
    x.set_column(0, x0);
    for k in 0..t {
        let wk = noise.sample();
        let next = plant.step(&x.column(k).into_owned(), &inputs.column(k).into_owned(), &wk);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { step: k + 1 });
        }
        x.set_column(k + 1, &next);
        w.set_column(k, &wk);
    }
    Ok(DataRecord { u: inputs.clone(), x, g: plant.g.clone(), noise: Some(w) })
}

/// i.i.d. uniform excitation on `[lo, hi]`, m×T.
pub fn uniform_inputs(m: usize, t: usize, lo: f64, hi: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(m, t, |_, _| rng.random_range(lo..=hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioName {
    Suspension,
    Scalar,
}

impl std::str::FromStr for ScenarioName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "suspension" => Ok(Self::Suspension),
            "scalar" => Ok(Self::Scalar),
            other => Err(Error::ConfigError(format!("unknown scenario '{other}'"))),
        }
    }
}

impl std::fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Suspension => "suspension",
            Self::Scalar => "scalar",
        })
    }
}

/// A plant with its cost, constraints and experiment defaults.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub plant: LtiPlant,
    pub weights: CostWeights,
    pub constraints: ConstraintSet,
    pub x0: DVector<f64>,
    pub c: f64,
    pub t_f: usize,
    pub steps: usize,
    /// Offline excitation interval.
    pub excitation: (f64, f64),
}

impl Scenario {
    /// Offline record of length `t_f` from the origin with uniform excitation.
    pub fn collect_offline(&self, t_f: usize, seed: u64, distribution: NoiseDistribution) -> Result<DataRecord> {
        if t_f == 0 {
            return Err(Error::ConfigError("offline data length must be at least 1".into()));
        }
        let inputs = uniform_inputs(self.plant.m(), t_f, self.excitation.0, self.excitation.1, derive_seed(seed, 1));
        let mut noise = NoiseSampler::new(self.plant.g.clone(), derive_seed(seed, 2), distribution)?;
        simulate(&self.plant, &DVector::zeros(self.plant.n()), &inputs, &mut noise)
    }
}

pub fn builtin_scenario(name: ScenarioName) -> Scenario {
    match name {
        ScenarioName::Suspension => {
            let a = DMatrix::from_row_slice(
                4,
                4,
                &[
                    0.809, 0.009, 0.0, 0.0, //
                    -36.93, 0.8, 0.0, 0.0, //
                    0.191, -0.009, 1.0, 0.01, //
                    0.0, 0.0, 0.0, 1.0,
                ],
            );
            let b = DMatrix::from_column_slice(4, 1, &[0.0005, 0.0935, -0.005, -0.01]);
            let g = SymMatrix::scaled_identity(4, 1e8);
            Scenario {
                plant: LtiPlant::new(a, b, g).expect("built-in plant"),
                weights: CostWeights::new(SymMatrix::scaled_identity(4, 100.0), SymMatrix::identity(1))
                    .expect("built-in weights"),
                constraints: ConstraintSet::new(
                    SymMatrix::from_diagonal(&[0.25]),
                    SymMatrix::from_diagonal(&[2500.0, 1.0, 400.0, 1.0]),
                )
                .expect("built-in constraints"),
                x0: DVector::from_vec(vec![-0.01, -0.5, 0.03, 0.1]),
                c: 5e5,
                t_f: 200,
                steps: 150,
                excitation: (-5.0, 5.0),
            }
        }
        ScenarioName::Scalar => Scenario {
            plant: LtiPlant::new(
                DMatrix::from_element(1, 1, 1.1),
                DMatrix::from_element(1, 1, 0.5),
                SymMatrix::from_diagonal(&[1e8]),
            )
            .expect("built-in plant"),
            weights: CostWeights::new(SymMatrix::identity(1), SymMatrix::from_diagonal(&[0.1]))
                .expect("built-in weights"),
            // |u| ≤ 2 and |x| ≤ 2
            constraints: ConstraintSet::new(SymMatrix::from_diagonal(&[0.25]), SymMatrix::from_diagonal(&[0.25]))
                .expect("built-in constraints"),
            x0: DVector::from_vec(vec![-1.0]),
            c: 50.0,
            t_f: 20,
            steps: 20,
            excitation: (-5.0, 5.0),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_plant() -> LtiPlant {
        builtin_scenario(ScenarioName::Scalar).plant
    }

    #[test]
    fn scalar_zero_noise_step() {
        let mut noise = NoiseSampler::new(SymMatrix::from_diagonal(&[1e8]), 0, NoiseDistribution::Zero).unwrap();
        let rec = simulate(&scalar_plant(), &DVector::from_vec(vec![1.0]), &DMatrix::from_element(1, 1, 1.0), &mut noise)
            .unwrap();
        assert_eq!(rec.x[(0, 0)], 1.0);
        assert!((rec.x[(0, 1)] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn zero_inputs_stay_at_origin() {
        let s = builtin_scenario(ScenarioName::Suspension);
        let mut noise = NoiseSampler::new(s.plant.g.clone(), 0, NoiseDistribution::Zero).unwrap();
        let rec = simulate(&s.plant, &DVector::zeros(4), &DMatrix::zeros(1, 30), &mut noise).unwrap();
        assert!(rec.x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn suspension_record_is_noise_compliant() {
        let s = builtin_scenario(ScenarioName::Suspension);
        let rec = s.collect_offline(200, 7, NoiseDistribution::UniformBall).unwrap();
        assert_eq!(rec.len(), 200);
        assert!(rec.u.iter().all(|u| (-5.0..=5.0).contains(u)));
        for i in 0..rec.len() {
            let (x, u, xn) = rec.triple(i);
            let w = &xn - &s.plant.a * &x - &s.plant.b * &u;
            assert!(weighted_norm_sq(&w, &s.plant.g).unwrap() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn residual_recovery_and_determinism() {
        let s = builtin_scenario(ScenarioName::Suspension);
        let a = s.collect_offline(50, 3, NoiseDistribution::UniformBall).unwrap();
        let b = s.collect_offline(50, 3, NoiseDistribution::UniformBall).unwrap();
        assert_eq!(a, b);
        let w = a.noise.as_ref().unwrap();
        for i in 0..a.len() {
            let (x, u, xn) = a.triple(i);
            let r = &xn - &s.plant.a * &x - &s.plant.b * &u;
            assert!((r - w.column(i)).amax() < 1e-12);
        }
    }

    #[test]
    fn simulate_rejects_bad_dims() {
        let mut noise = NoiseSampler::new(SymMatrix::from_diagonal(&[1.0]), 0, NoiseDistribution::Zero).unwrap();
        let err = simulate(&scalar_plant(), &DVector::zeros(2), &DMatrix::zeros(1, 1), &mut noise);
        assert!(matches!(err, Err(Error::DimError(_))));
    }

    #[test]
    fn simulate_reports_divergence() {
        let plant = LtiPlant::new(
            DMatrix::from_element(1, 1, 1e200),
            DMatrix::from_element(1, 1, 0.0),
            SymMatrix::identity(1),
        )
        .unwrap();
        let mut noise = NoiseSampler::new(SymMatrix::identity(1), 0, NoiseDistribution::Zero).unwrap();
        let err = simulate(&plant, &DVector::from_vec(vec![1.0]), &DMatrix::zeros(1, 5), &mut noise);
        assert_eq!(err, Err(Error::Diverged { step: 2 }));
    }

    #[test]
    fn builtin_values() {
        let s = builtin_scenario(ScenarioName::Suspension);
        assert_eq!(s.plant.a[(1, 0)], -36.93);
        assert_eq!(s.x0.len(), 4);
        let sc = builtin_scenario(ScenarioName::Scalar);
        assert_eq!((sc.plant.a[(0, 0)], sc.plant.b[(0, 0)]), (1.1, 0.5));
        // ‖u‖_{S_u} ≤ 1 ⇔ |u| ≤ S_u^{-1/2} = 2
        assert_eq!(sc.constraints.s_u[(0, 0)], 0.25);
        assert!(sc.constraints.input_margin(&DVector::from_vec(vec![2.0])).unwrap().abs() < 1e-15);
        assert!("pendulum".parse::<ScenarioName>().is_err());
    }

    #[test]
    fn noise_examples() {
        let mut z = NoiseSampler::new(SymMatrix::identity(3), 1, NoiseDistribution::Zero).unwrap();
        assert_eq!(z.sample(), DVector::zeros(3));
        let mut b = NoiseSampler::new(SymMatrix::from_diagonal(&[1e8]), 1, NoiseDistribution::Boundary).unwrap();
        for _ in 0..100 {
            let w = b.sample()[0];
            assert!((w.abs() - 1e-4).abs() < 1e-16);
        }
    }

    #[test]
    fn uniform_ball_moments() {
        let mut s = NoiseSampler::new(SymMatrix::identity(2), 11, NoiseDistribution::UniformBall).unwrap();
        let draws = 100_000;
        let mut sum = 0.0;
        let mut max: f64 = 0.0;
        for _ in 0..draws {
            let r2 = s.sample().norm_squared();
            sum += r2;
            max = max.max(r2);
        }
        let mean = sum / draws as f64;
        assert!(max <= 1.0);
        // E‖ω‖² = n/(n+2) for the uniform unit ball
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn uniform_ball_never_leaves_ellipsoid() {
        let g = SymMatrix::from_row_slice(2, &[4.0, 1.0, 1.0, 9.0]).unwrap();
        let mut s = NoiseSampler::new(g.clone(), 5, NoiseDistribution::UniformBall).unwrap();
        let violations = (0..1_000_000)
            .filter(|_| weighted_norm_sq(&s.sample(), &g).unwrap() > 1.0 + 1e-12)
            .count();
        assert_eq!(violations, 0);
    }

    #[test]
    fn csv_round_trip() {
        let s = builtin_scenario(ScenarioName::Suspension);
        let rec = s.collect_offline(12, 9, NoiseDistribution::UniformBall).unwrap();
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,u_0,x_0,x_1,x_2,x_3\n"));
        assert_eq!(text.lines().count(), 14);
        assert!(text.lines().last().unwrap().starts_with("12,,"));
        let back = DataRecord::read_csv(buf.as_slice(), s.plant.g.clone()).unwrap();
        assert_eq!(back.u, rec.u);
        assert_eq!(back.x, rec.x);
    }
}
