//! The set of system matrices `(A, B)` consistent with measured data.
//!
//! Each sample `(x_i, u_i, x_{i+1})` contributes a quadratic matrix inequality
//! `[I A B] D_i [I A B]ᵀ ⪰ 0` with
//! `D_i = V_i diag(G⁻¹, -1) V_iᵀ`, `V_i = [I x_{i+1}; 0 -x_i; 0 -u_i]`,
//! which holds iff `‖x_{i+1} - A x_i - B u_i‖_G ≤ 1`. The set is the
//! intersection over all samples.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{min_eigenvalue, sqrt_factor, SymMatrix};
use crate::plant::DataRecord;

/// Default membership tolerance, relative to the noise ellipsoid.
pub const MEMBER_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSource {
    Offline,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiplierMode {
    /// One multiplier per offline sample.
    Full,
    /// All offline samples share one multiplier (summed block).
    Common,
}

impl std::str::FromStr for MultiplierMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "full_multipliers" => Ok(Self::Full),
            "common" | "common_multiplier" => Ok(Self::Common),
            other => Err(Error::ConfigError(format!("unknown multiplier mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for MultiplierMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Common => "common",
        })
    }
}

/// One per-sample data matrix `D_i` of dimension `2n+m`.
#[derive(Debug, Clone, PartialEq)]
pub struct QmiBlock {
    pub d: SymMatrix,
    pub source: BlockSource,
    pub sample_index: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
}

impl QmiBlock {
    pub fn new(
        x: &DVector<f64>,
        u: &DVector<f64>,
        x_next: &DVector<f64>,
        g_inv: &SymMatrix,
        source: BlockSource,
        sample_index: usize,
    ) -> Result<Self> {
        let d = data_matrix(x, u, x_next, g_inv)?;
        Ok(Self { d, source, sample_index, x: x.clone(), u: u.clone(), x_next: x_next.clone() })
    }

    /// `[I A B] D [I A B]ᵀ`.
    pub fn evaluate(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let s = selector(a, b);
        &s * self.d.as_matrix() * s.transpose()
    }
}

fn data_matrix(x: &DVector<f64>, u: &DVector<f64>, x_next: &DVector<f64>, g_inv: &SymMatrix) -> Result<SymMatrix> {
    let n = x.len();
    let m = u.len();
    if x_next.len() != n || g_inv.dim() != n {
        return Err(Error::DimError(format!(
            "sample dimensions disagree: x {n}, x_next {}, G {}",
            x_next.len(),
            g_inv.dim()
        )));
    }
    let dim = 2 * n + m;
    let mut v = DMatrix::zeros(dim, n + 1);
    v.view_mut((0, 0), (n, n)).fill_with_identity();
    v.view_mut((0, n), (n, 1)).copy_from(x_next);
    v.view_mut((n, n), (n, 1)).copy_from(&(-x));
    v.view_mut((2 * n, n), (m, 1)).copy_from(&(-u));
    let mut mid = DMatrix::zeros(n + 1, n + 1);
    mid.view_mut((0, 0), (n, n)).copy_from(g_inv.as_matrix());
    mid[(n, n)] = -1.0;
    SymMatrix::new(&v * mid * v.transpose())
}

/// `[I A B]`, n×(2n+m).
fn selector(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let mut s = DMatrix::zeros(n, 2 * n + m);
    s.view_mut((0, 0), (n, n)).fill_with_identity();
    s.view_mut((0, n), (n, n)).copy_from(a);
    s.view_mut((0, 2 * n), (n, m)).copy_from(b);
    s
}

/// Ordered QMI blocks; online blocks always follow the offline ones.
#[derive(Debug, Clone)]
pub struct ConsistencySet {
    n: usize,
    m: usize,
    g: SymMatrix,
    g_inv: SymMatrix,
    g_sqrt: DMatrix<f64>,
    blocks: Vec<Arc<QmiBlock>>,
    pub mode: MultiplierMode,
}

impl ConsistencySet {
    pub fn build_offline(data: &DataRecord, mode: MultiplierMode) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::ConfigError("offline data must contain at least one sample".into()));
        }
        let g = data.g.clone();
        let min = min_eigenvalue(&g)?;
        if min <= 0.0 {
            return Err(Error::NotPsd { min_eig: min });
        }
        let g_inv = g.inverse()?;
        let g_sqrt = sqrt_factor(&g)?;
        let blocks = (0..data.len())
            .map(|i| {
                let (x, u, xn) = data.triple(i);
                QmiBlock::new(&x, &u, &xn, &g_inv, BlockSource::Offline, i).map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n: data.n(), m: data.m(), g, g_inv, g_sqrt, blocks, mode })
    }

    /// New set with one more online block; existing blocks are shared.
    pub fn push_online(&self, x: &DVector<f64>, u: &DVector<f64>, x_next: &DVector<f64>) -> Result<Self> {
        if x.len() != self.n || x_next.len() != self.n || u.len() != self.m {
            return Err(Error::DimError(format!(
                "online triple has dims ({}, {}, {}), set expects ({}, {}, {})",
                x.len(),
                u.len(),
                x_next.len(),
                self.n,
                self.m,
                self.n
            )));
        }
        let idx = self.online_count();
        let block = QmiBlock::new(x, u, x_next, &self.g_inv, BlockSource::Online, idx)?;
        let mut next = self.clone();
        next.blocks.push(Arc::new(block));
        Ok(next)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn g(&self) -> &SymMatrix {
        &self.g
    }

    pub fn g_inv(&self) -> &SymMatrix {
        &self.g_inv
    }

    pub fn blocks(&self) -> &[Arc<QmiBlock>] {
        &self.blocks
    }

    pub fn offline_blocks(&self) -> impl Iterator<Item = &QmiBlock> {
        self.blocks.iter().map(|b| b.as_ref()).filter(|b| b.source == BlockSource::Offline)
    }

    pub fn online_blocks(&self) -> impl Iterator<Item = &QmiBlock> {
        self.blocks.iter().map(|b| b.as_ref()).filter(|b| b.source == BlockSource::Online)
    }

    pub fn offline_count(&self) -> usize {
        self.offline_blocks().count()
    }

    pub fn online_count(&self) -> usize {
        self.online_blocks().count()
    }

    /// Matrices that receive one multiplier each on the offline side: every
    /// `D_i` in full mode, or the single sum `Σ D_i` in common mode.
    pub fn offline_multiplier_blocks(&self) -> Vec<DMatrix<f64>> {
        match self.mode {
            MultiplierMode::Full => self.offline_blocks().map(|b| b.d.as_matrix().clone()).collect(),
            MultiplierMode::Common => {
                let dim = 2 * self.n + self.m;
                let sum = self.offline_blocks().fold(DMatrix::zeros(dim, dim), |acc, b| acc + b.d.as_matrix());
                vec![sum]
            }
        }
    }

    pub fn online_multiplier_blocks(&self) -> Vec<DMatrix<f64>> {
        self.online_blocks().map(|b| b.d.as_matrix().clone()).collect()
    }

    /// Smallest eigenvalue, over all blocks, of `G^{1/2} [I A B] D_i [I A B]ᵀ G^{1/2}`
    /// (equals `1 - max_i ‖x_{i+1} - A x_i - B u_i‖²_G`).
    pub fn membership_margin(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
        self.check_model_dims(a, b)?;
        let mut worst = f64::INFINITY;
        for blk in &self.blocks {
            let m = blk.evaluate(a, b);
            let w = SymMatrix::new(&self.g_sqrt * m * &self.g_sqrt)?;
            worst = worst.min(min_eigenvalue(&w)?);
        }
        Ok(worst)
    }

    /// Every block satisfies `[I A B] D_i [I A B]ᵀ ⪰ -tol·G⁻¹`.
    pub fn is_member(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> Result<bool> {
        Ok(self.membership_margin(a, b)? >= -tol)
    }

    fn check_model_dims(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
        if a.shape() != (self.n, self.n) || b.shape() != (self.n, self.m) {
            return Err(Error::DimError(format!(
                "model is A {:?}, B {:?}; set expects A ({n}, {n}), B ({n}, {m})",
                a.shape(),
                b.shape(),
                n = self.n,
                m = self.m
            )));
        }
        Ok(())
    }

    /// Members drawn around `center` along random Gaussian directions.
    ///
    /// Along each direction the boundary is located by doubling and then
    /// bisection until the bracket is within 1% of its lower end. Even-indexed
    /// samples sit at that near-boundary point, odd-indexed ones uniformly
    /// along the segment from the center. Every returned model passes
    /// `is_member` at [`MEMBER_TOL`].
    pub fn sample_members(
        &self,
        center: (&DMatrix<f64>, &DMatrix<f64>),
        count: usize,
        seed: u64,
    ) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
        let (a0, b0) = center;
        if !self.is_member(a0, b0, MEMBER_TOL)? {
            return Err(Error::NotInSet);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (self.n, self.m);
        let mut out = Vec::with_capacity(count);
        let mut step = 1e-6;
        const MAX_SCALE: f64 = 1e6;
        while out.len() < count {
            let mut dir = DMatrix::from_fn(n, n + m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let norm = dir.norm();
            if norm < 1e-12 {
                continue;
            }
            dir /= norm;
            let at = |t: f64| {
                let a = a0 + dir.columns(0, n) * t;
                let b = b0 + dir.columns(n, m) * t;
                (a, b)
            };
            let inside = |t: f64| -> Result<bool> {
                let (a, b) = at(t);
                self.is_member(&a, &b, MEMBER_TOL)
            };
            // bracket [lo, hi] with lo inside, hi outside
            let mut lo = 0.0;
            let mut hi = step;
            while inside(hi)? {
                lo = hi;
                hi *= 2.0;
                if hi > MAX_SCALE {
                    break;
                }
            }
            if hi <= MAX_SCALE {
                if lo == 0.0 {
                    // shrink until something inside is found
                    let mut probe = hi / 2.0;
                    while probe > 1e-300 && !inside(probe)? {
                        hi = probe;
                        probe /= 2.0;
                    }
                    lo = probe;
                }
                while hi - lo > 0.01 * lo {
                    let mid = 0.5 * (lo + hi);
                    if inside(mid)? {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                step = lo.max(1e-300);
            }
            let t = if out.len() % 2 == 0 { lo } else { lo * rng.random::<f64>() };
            let (a, b) = at(t);
            if self.is_member(&a, &b, MEMBER_TOL)? {
                out.push((a, b));
            }
        }
        Ok(out)
    }
}
