//! Symmetric-matrix substrate: storage, definiteness tests, eigen-extremes
//! and the cost-weight factorizations used when assembling the SDPs.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Default absolute tolerance for `is_psd` checks.
pub const PSD_TOL: f64 = 1e-9;
/// Default margin used to realize strict inequalities `M ≺ 0` as `λ_max(M) ≤ -margin`.
pub const STRICT_MARGIN: f64 = 1e-8;

/// A real symmetric matrix. Construction symmetrizes the input, so
/// `entries[(i, j)] == entries[(j, i)]` holds bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Builds from a square matrix, averaging it with its transpose.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimError(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::DimError("symmetric matrix must have dim >= 1".into()));
        }
        Ok(Self(symmetrize(&m)))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        Self(DMatrix::identity(n, n) * s)
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    pub fn from_row_slice(n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimError(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, n, data))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(&self.0 * s)
    }

    /// Inverse of a positive definite matrix.
    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .0
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| self.0.clone().try_inverse())
            .ok_or_else(|| Error::InvalidMatrix("matrix is singular".into()))?;
        Self::new(inv)
    }

    fn check_finite(&self) -> Result<()> {
        if self.0.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidMatrix("non-finite entry".into()))
        }
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        self.check_finite()?;
        let mut ev: Vec<f64> = SymmetricEigen::new(self.0.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        Ok(ev)
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = m.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &SymMatrix) -> Result<f64> {
    Ok(m.eigenvalues()?[0])
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(m: &SymMatrix) -> Result<f64> {
    let ev = m.eigenvalues()?;
    Ok(ev[ev.len() - 1])
}

/// `λ_min(M) ≥ -tol`.
pub fn is_psd(m: &SymMatrix, tol: f64) -> Result<bool> {
    Ok(min_eigenvalue(m)? >= -tol)
}

/// Symmetric square root `F = V diag(√λ) Vᵀ`, so `FᵀF = F² = M`.
///
/// Eigenvalues in `[-PSD_TOL·max(1, ‖M‖), 0)` are clamped to zero; anything
/// more negative is rejected.
pub fn sqrt_factor(m: &SymMatrix) -> Result<DMatrix<f64>> {
    m.check_finite()?;
    let eig = SymmetricEigen::new(m.as_matrix().clone());
    let scale = m.as_matrix().norm().max(1.0);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -PSD_TOL * scale {
        return Err(Error::NotPsd { min_eig: min });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(symmetrize(&(v * DMatrix::from_diagonal(&roots) * v.transpose())))
}

/// `xᵀMx`.
pub fn weighted_norm_sq(x: &DVector<f64>, m: &SymMatrix) -> Result<f64> {
    if x.len() != m.dim() {
        return Err(Error::DimError(format!(
            "vector of length {} against {}x{} weight",
            x.len(),
            m.dim(),
            m.dim()
        )));
    }
    Ok(x.dot(&(m.as_matrix() * x)))
}

/// Stage-cost weights with their square-root factors.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: SymMatrix,
    pub r: SymMatrix,
    /// `m_qᵀ m_q = q`.
    pub m_q: DMatrix<f64>,
    /// `m_rᵀ m_r = r`.
    pub m_r: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(q: SymMatrix, r: SymMatrix) -> Result<Self> {
        for (name, w) in [("Q", &q), ("R", &r)] {
            let min = min_eigenvalue(w)?;
            if min <= PSD_TOL {
                return Err(Error::ConfigError(format!(
                    "{name} must be positive definite (min eigenvalue {min:e})"
                )));
            }
        }
        let m_q = sqrt_factor(&q)?;
        let m_r = sqrt_factor(&r)?;
        Ok(Self { q, r, m_q, m_r })
    }

    pub fn n(&self) -> usize {
        self.q.dim()
    }

    pub fn m(&self) -> usize {
        self.r.dim()
    }

    /// `‖u‖²_R + ‖x‖²_Q`.
    pub fn stage_cost(&self, u: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        Ok(weighted_norm_sq(u, &self.r)? + weighted_norm_sq(x, &self.q)?)
    }
}

/// Relative Frobenius error `‖a - b‖_F / max(‖b‖_F, 1e-300)`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
