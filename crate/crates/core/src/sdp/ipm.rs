//! Dense primal-dual interior-point method for
//!
//! ```text
//! minimize cᵀy  subject to  F_k(y) = F_k0 + Σ_i y_i F_ki ⪰ 0   (k = 1..K)
//!                           f_r(y) = f_r0 + Σ_i y_i f_ri ≥ 0   (r = 1..R)
//! ```
//!
//! written in the conic form `G y + s = h, s ∈ K` with `G = -F`, `h = F_0`.
//! The iteration runs on the homogeneous self-dual embedding
//! (`G y + s = h τ`, `Gᵀ z + c τ = 0`, `cᵀ y + hᵀ z + κ = 0`) with
//! Nesterov–Todd scaling and a Mehrotra predictor-corrector step, so
//! infeasibility is detected from the `τ → 0` certificates instead of by
//! iteration exhaustion.

use nalgebra::{DMatrix, DVector};

use super::{SolveStatus, SolverOptions};

/// One semidefinite block: `F_0 + Σ y_i F_i ⪰ 0`.
#[derive(Debug, Clone)]
pub(crate) struct PsdBlock {
    pub f0: DMatrix<f64>,
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

/// One scalar row: `f_0 + Σ y_i f_i ≥ 0`.
#[derive(Debug, Clone)]
pub(crate) struct LpRow {
    pub f0: f64,
    pub terms: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub(crate) struct ConicProblem {
    pub c: DVector<f64>,
    pub psd: Vec<PsdBlock>,
    pub lp: Vec<LpRow>,
}

#[derive(Debug, Clone)]
pub(crate) struct ConicResult {
    pub status: SolveStatus,
    pub y: DVector<f64>,
    pub iterations: usize,
    pub primal_obj: f64,
    pub dual_obj: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub detail: String,
}

/// Element of the product cone (or its dual space).
#[derive(Debug, Clone)]
struct ConeVec {
    psd: Vec<DMatrix<f64>>,
    lp: DVector<f64>,
}

impl ConeVec {
    fn dot(&self, o: &ConeVec) -> f64 {
        self.psd.iter().zip(&o.psd).map(|(a, b)| a.dot(b)).sum::<f64>() + self.lp.dot(&o.lp)
    }

    fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    fn axpy(&mut self, alpha: f64, o: &ConeVec) {
        for (a, b) in self.psd.iter_mut().zip(&o.psd) {
            a.zip_apply(b, |p, q| *p += alpha * q);
        }
        self.lp.axpy(alpha, &o.lp, 1.0);
    }

    fn scaled(&self, alpha: f64) -> ConeVec {
        ConeVec { psd: self.psd.iter().map(|a| a * alpha).collect(), lp: &self.lp * alpha }
    }

    fn sub(&self, o: &ConeVec) -> ConeVec {
        let mut out = self.clone();
        out.axpy(-1.0, o);
        out
    }
}

/// Nesterov–Todd scaling. For a PSD block `W(u) = rᵀ u r`, `W*(v) = r v rᵀ`,
/// and `λ = W(z) = W⁻*(s)` is diagonal. For the scalar rows `W(u) = d∘u`.
#[derive(Debug, Clone)]
struct Scaling {
    r: Vec<DMatrix<f64>>,
    rinv: Vec<DMatrix<f64>>,
    lam: Vec<DVector<f64>>,
    d: DVector<f64>,
    lam_lp: DVector<f64>,
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// NT scaling of a PSD pair: `r̃ᵀ z r̃ = r̃⁻¹ s r̃⁻ᵀ = diag(λ)`.
fn nt_block(s: &DMatrix<f64>, z: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let l1 = s.clone().cholesky()?.l();
    let l2 = z.clone().cholesky()?.l();
    let svd = (l2.transpose() * &l1).svd(true, true);
    let u = svd.u?;
    let vt = svd.v_t?;
    let lam = svd.singular_values;
    if lam.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return None;
    }
    let isq = DMatrix::from_diagonal(&lam.map(|v| 1.0 / v.sqrt()));
    let r = &l1 * vt.transpose() * &isq;
    let rinv = &isq * u.transpose() * l2.transpose();
    Some((r, rinv, lam))
}

impl Scaling {
    fn from_pair(s: &ConeVec, z: &ConeVec) -> Option<Self> {
        let mut r = Vec::with_capacity(s.psd.len());
        let mut rinv = Vec::with_capacity(s.psd.len());
        let mut lam = Vec::with_capacity(s.psd.len());
        for (sb, zb) in s.psd.iter().zip(&z.psd) {
            let (rb, rib, lb) = nt_block(sb, zb)?;
            r.push(rb);
            rinv.push(rib);
            lam.push(lb);
        }
        if s.lp.iter().chain(z.lp.iter()).any(|v| !(*v > 0.0)) {
            return None;
        }
        let d = s.lp.zip_map(&z.lp, |a, b| (a / b).sqrt());
        let lam_lp = s.lp.zip_map(&z.lp, |a, b| (a * b).sqrt());
        Some(Self { r, rinv, lam, d, lam_lp })
    }

    /// Scaling after moving to `s̃ = λ + α ds̃`, `z̃ = λ + α dz̃` in scaled coordinates.
    fn updated(&self, ds: &ConeVec, dz: &ConeVec, alpha: f64) -> Option<Self> {
        let mut next = self.clone();
        for k in 0..self.r.len() {
            let lam = DMatrix::from_diagonal(&self.lam[k]);
            let st = sym(&lam + &ds.psd[k] * alpha);
            let zt = sym(&lam + &dz.psd[k] * alpha);
            let (rt, rti, lt) = nt_block(&st, &zt)?;
            next.r[k] = &self.r[k] * rt;
            next.rinv[k] = rti * &self.rinv[k];
            next.lam[k] = lt;
        }
        let st = &self.lam_lp + &ds.lp * alpha;
        let zt = &self.lam_lp + &dz.lp * alpha;
        if st.iter().chain(zt.iter()).any(|v| !(*v > 0.0)) {
            return None;
        }
        next.d = self.d.component_mul(&st.zip_map(&zt, |a, b| (a / b).sqrt()));
        next.lam_lp = st.zip_map(&zt, |a, b| (a * b).sqrt());
        Some(next)
    }

    fn lambda(&self) -> ConeVec {
        ConeVec { psd: self.lam.iter().map(DMatrix::from_diagonal).collect(), lp: self.lam_lp.clone() }
    }

    /// `W(u)`.
    fn w(&self, u: &ConeVec) -> ConeVec {
        ConeVec {
            psd: u.psd.iter().zip(&self.r).map(|(a, r)| sym(r.transpose() * a * r)).collect(),
            lp: u.lp.component_mul(&self.d),
        }
    }

    /// `W*(v)`.
    fn w_star(&self, v: &ConeVec) -> ConeVec {
        ConeVec {
            psd: v.psd.iter().zip(&self.r).map(|(a, r)| sym(r * a * r.transpose())).collect(),
            lp: v.lp.component_mul(&self.d),
        }
    }

    /// `W⁻¹(v)`.
    fn w_inv(&self, v: &ConeVec) -> ConeVec {
        ConeVec {
            psd: v.psd.iter().zip(&self.rinv).map(|(a, ri)| sym(ri.transpose() * a * ri)).collect(),
            lp: v.lp.component_div(&self.d),
        }
    }

    /// `W⁻*(u)`.
    fn w_inv_star(&self, u: &ConeVec) -> ConeVec {
        ConeVec {
            psd: u.psd.iter().zip(&self.rinv).map(|(a, ri)| sym(ri * a * ri.transpose())).collect(),
            lp: u.lp.component_div(&self.d),
        }
    }

    /// Solves `λ ∘ u = v` for `u`.
    fn lambda_solve(&self, v: &ConeVec) -> ConeVec {
        ConeVec {
            psd: v
                .psd
                .iter()
                .zip(&self.lam)
                .map(|(a, l)| DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| 2.0 * a[(i, j)] / (l[i] + l[j])))
                .collect(),
            lp: v.lp.component_div(&self.lam_lp),
        }
    }

    /// Largest `α` with `λ + α Δ` in the cone (∞ if unbounded).
    fn max_step(&self, delta: &ConeVec) -> f64 {
        let mut alpha = f64::INFINITY;
        for (dm, l) in delta.psd.iter().zip(&self.lam) {
            let isq = l.map(|v| 1.0 / v.sqrt());
            let scaled = DMatrix::from_fn(dm.nrows(), dm.ncols(), |i, j| dm[(i, j)] * isq[i] * isq[j]);
            let min = sym(scaled).symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
            if min < 0.0 {
                alpha = alpha.min(-1.0 / min);
            }
        }
        for (dv, l) in delta.lp.iter().zip(self.lam_lp.iter()) {
            if *dv < 0.0 {
                alpha = alpha.min(-l / dv);
            }
        }
        alpha
    }
}

fn jordan(a: &ConeVec, b: &ConeVec) -> ConeVec {
    ConeVec {
        psd: a.psd.iter().zip(&b.psd).map(|(x, y)| sym(x * y)).collect(),
        lp: a.lp.component_mul(&b.lp),
    }
}

struct Operator<'a> {
    p: &'a ConicProblem,
    nvar: usize,
}

impl<'a> Operator<'a> {
    fn zero(&self) -> ConeVec {
        ConeVec {
            psd: self.p.psd.iter().map(|b| DMatrix::zeros(b.f0.nrows(), b.f0.ncols())).collect(),
            lp: DVector::zeros(self.p.lp.len()),
        }
    }

    fn identity(&self) -> ConeVec {
        ConeVec {
            psd: self.p.psd.iter().map(|b| DMatrix::identity(b.f0.nrows(), b.f0.nrows())).collect(),
            lp: DVector::from_element(self.p.lp.len(), 1.0),
        }
    }

    fn h(&self) -> ConeVec {
        ConeVec {
            psd: self.p.psd.iter().map(|b| b.f0.clone()).collect(),
            lp: DVector::from_iterator(self.p.lp.len(), self.p.lp.iter().map(|r| r.f0)),
        }
    }

    /// `G y = -Σ y_i F_i`.
    fn g(&self, y: &DVector<f64>) -> ConeVec {
        let mut out = self.zero();
        for (blk, acc) in self.p.psd.iter().zip(out.psd.iter_mut()) {
            for (i, f) in &blk.terms {
                acc.zip_apply(f, |p, q| *p -= y[*i] * q);
            }
        }
        for (row, acc) in self.p.lp.iter().zip(out.lp.iter_mut()) {
            *acc = -row.terms.iter().map(|(i, f)| y[*i] * f).sum::<f64>();
        }
        out
    }

    /// `Gᵀ z`.
    fn gt(&self, z: &ConeVec) -> DVector<f64> {
        let mut out = DVector::zeros(self.nvar);
        for (blk, zb) in self.p.psd.iter().zip(&z.psd) {
            for (i, f) in &blk.terms {
                out[*i] -= f.dot(zb);
            }
        }
        for (row, zr) in self.p.lp.iter().zip(z.lp.iter()) {
            for (i, f) in &row.terms {
                out[*i] -= f * zr;
            }
        }
        out
    }

    /// `Gᵀ (W*W)⁻¹ G`.
    fn schur(&self, w: &Scaling) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nvar, self.nvar);
        for (k, blk) in self.p.psd.iter().enumerate() {
            let dim = blk.f0.nrows();
            let ri = &w.rinv[k];
            let vars: Vec<usize> = blk.terms.iter().map(|(i, _)| *i).collect();
            let mut cols = DMatrix::zeros(dim * dim, blk.terms.len());
            for (c, (_, f)) in blk.terms.iter().enumerate() {
                let scaled = ri * f * ri.transpose();
                cols.column_mut(c).copy_from_slice(scaled.as_slice());
            }
            let local = cols.transpose() * &cols;
            for (a, &i) in vars.iter().enumerate() {
                for (b, &j) in vars.iter().enumerate() {
                    m[(i, j)] += local[(a, b)];
                }
            }
        }
        for (row, d) in self.p.lp.iter().zip(w.d.iter()) {
            let s = 1.0 / (d * d);
            for (i, fi) in &row.terms {
                for (j, fj) in &row.terms {
                    m[(*i, *j)] += s * fi * fj;
                }
            }
        }
        m
    }
}

/// Factored reduced KKT system `Gᵀ dz = bx`, `G dx - W*W dz = bz`.
struct Kkt<'a, 'b> {
    op: &'b Operator<'a>,
    w: &'b Scaling,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl<'a, 'b> Kkt<'a, 'b> {
    const REFINE: usize = 4;

    fn factor(op: &'b Operator<'a>, w: &'b Scaling) -> Option<Self> {
        let m = op.schur(w);
        if m.iter().any(|v| !v.is_finite()) {
            return None;
        }
        if let Some(chol) = m.clone().cholesky() {
            return Some(Self { op, w, chol: Some(chol), lu: None });
        }
        let lu = m.lu();
        if !lu.is_invertible() {
            return None;
        }
        Some(Self { op, w, chol: None, lu: Some(lu) })
    }

    fn m_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match (&self.chol, &self.lu) {
            (Some(c), _) => c.solve(b),
            (None, Some(lu)) => lu.solve(b).unwrap_or_else(|| DVector::from_element(b.len(), f64::NAN)),
            _ => unreachable!(),
        }
    }

    fn solve_once(&self, bx: &DVector<f64>, bz: &ConeVec) -> (DVector<f64>, ConeVec) {
        let wwinv_bz = self.w.w_inv(&self.w.w_inv_star(bz));
        let dx = self.m_solve(&(bx + self.op.gt(&wwinv_bz)));
        let dz = self.w.w_inv(&self.w.w_inv_star(&self.op.g(&dx).sub(bz)));
        (dx, dz)
    }

    fn residual(&self, bx: &DVector<f64>, bz: &ConeVec, dx: &DVector<f64>, dz: &ConeVec) -> (DVector<f64>, ConeVec) {
        let rx = bx - self.op.gt(dz);
        let rz = bz.sub(&self.op.g(dx).sub(&self.w.w_star(&self.w.w(dz))));
        (rx, rz)
    }

    /// Solve with iterative refinement, stopping once the residual no longer shrinks.
    fn solve(&self, bx: &DVector<f64>, bz: &ConeVec) -> (DVector<f64>, ConeVec) {
        let (mut dx, mut dz) = self.solve_once(bx, bz);
        let (mut rx, mut rz) = self.residual(bx, bz, &dx, &dz);
        let mut err = rx.norm().hypot(rz.norm());
        for _ in 0..Self::REFINE {
            let (ex, ez) = self.solve_once(&rx, &rz);
            let nx = &dx + ex;
            let mut nz = dz.clone();
            nz.axpy(1.0, &ez);
            let (qx, qz) = self.residual(bx, bz, &nx, &nz);
            let next = qx.norm().hypot(qz.norm());
            if !(next < 0.5 * err) {
                if next < err {
                    dx = nx;
                    dz = nz;
                }
                break;
            }
            dx = nx;
            dz = nz;
            rx = qx;
            rz = qz;
            err = next;
        }
        (dx, dz)
    }
}

struct Direction {
    dx: DVector<f64>,
    ds: ConeVec, // scaled
    dz: ConeVec, // scaled
    dtau: f64,
    dkappa: f64,
}

/// Ruiz-style equilibration: a positive diagonal congruence per PSD block, a
/// positive scale per LP row and a positive scale per variable. All of them
/// map the cone onto itself, so the scaled problem has the same feasible set
/// up to the variable substitution `y = d ∘ ŷ`.
struct Equilibration {
    d: DVector<f64>,
    scaled: ConicProblem,
}

impl Equilibration {
    const PASSES: usize = 12;
    const CLAMP: f64 = 1e4;

    fn new(p: &ConicProblem) -> Self {
        let nvar = p.c.len();
        let mut d = DVector::from_element(nvar, 1.0);
        let mut e: Vec<DVector<f64>> = p.psd.iter().map(|b| DVector::from_element(b.f0.nrows(), 1.0)).collect();
        let mut r = DVector::from_element(p.lp.len(), 1.0);
        for _ in 0..Self::PASSES {
            let mut col = DVector::<f64>::zeros(nvar);
            for (k, blk) in p.psd.iter().enumerate() {
                let mut row = DVector::<f64>::zeros(blk.f0.nrows());
                for (i, f) in &blk.terms {
                    for a in 0..f.nrows() {
                        for b in 0..f.ncols() {
                            let v = (f[(a, b)] * e[k][a] * e[k][b] * d[*i]).abs();
                            row[a] = row[a].max(v);
                            col[*i] = col[*i].max(v);
                        }
                    }
                }
                for a in 0..row.len() {
                    if row[a] > 0.0 {
                        e[k][a] = (e[k][a] / row[a].sqrt()).clamp(1.0 / Self::CLAMP, Self::CLAMP);
                    }
                }
            }
            for (q, lp) in p.lp.iter().enumerate() {
                let mut row = 0.0f64;
                for (i, f) in &lp.terms {
                    let v = (f * r[q] * d[*i]).abs();
                    row = row.max(v);
                    col[*i] = col[*i].max(v);
                }
                if row > 0.0 {
                    r[q] = (r[q] / row.sqrt()).clamp(1.0 / Self::CLAMP, Self::CLAMP);
                }
            }
            for i in 0..nvar {
                if col[i] > 0.0 {
                    d[i] = (d[i] / col[i].sqrt()).clamp(1.0 / Self::CLAMP, Self::CLAMP);
                }
            }
        }
        let congruence = |m: &DMatrix<f64>, e: &DVector<f64>, s: f64| {
            DMatrix::from_fn(m.nrows(), m.ncols(), |a, b| m[(a, b)] * e[a] * e[b] * s)
        };
        let scaled = ConicProblem {
            c: p.c.component_mul(&d),
            psd: p
                .psd
                .iter()
                .zip(&e)
                .map(|(blk, e)| PsdBlock {
                    f0: congruence(&blk.f0, e, 1.0),
                    terms: blk.terms.iter().map(|(i, f)| (*i, congruence(f, e, d[*i]))).collect(),
                })
                .collect(),
            lp: p
                .lp
                .iter()
                .zip(r.iter())
                .map(|(row, r)| LpRow { f0: row.f0 * r, terms: row.terms.iter().map(|(i, f)| (*i, f * r * d[*i])).collect() })
                .collect(),
        };
        Self { d, scaled }
    }
}

pub(crate) fn solve_conic(p: &ConicProblem, opts: &SolverOptions) -> ConicResult {
    let eq = Equilibration::new(p);
    let mut res = solve_homogeneous(&eq.scaled, opts);
    res.y = res.y.component_mul(&eq.d);
    res
}

fn solve_homogeneous(p: &ConicProblem, opts: &SolverOptions) -> ConicResult {
    let nvar = p.c.len();
    let op = Operator { p, nvar };
    let failure = |status: SolveStatus, detail: String, it: usize| ConicResult {
        status,
        y: DVector::from_element(nvar, f64::NAN),
        iterations: it,
        primal_obj: f64::NAN,
        dual_obj: f64::NAN,
        primal_residual: f64::NAN,
        dual_residual: f64::NAN,
        gap: f64::NAN,
        detail,
    };

    let h = op.h();
    let c = &p.c;
    let nu = p.psd.iter().map(|b| b.f0.nrows()).sum::<usize>() + p.lp.len();
    let resx0 = c.norm().max(1.0);
    let resz0 = h.norm().max(1.0);

    // initial point: least-norm primal slack and dual with unit scaling
    let ident = Scaling {
        r: p.psd.iter().map(|b| DMatrix::identity(b.f0.nrows(), b.f0.nrows())).collect(),
        rinv: p.psd.iter().map(|b| DMatrix::identity(b.f0.nrows(), b.f0.nrows())).collect(),
        lam: p.psd.iter().map(|b| DVector::from_element(b.f0.nrows(), 1.0)).collect(),
        d: DVector::from_element(p.lp.len(), 1.0),
        lam_lp: DVector::from_element(p.lp.len(), 1.0),
    };
    let Some(kkt0) = Kkt::factor(&op, &ident) else {
        return failure(SolveStatus::NumericalFailure, "singular initial Schur complement".into(), 0);
    };
    let (mut x, neg_s) = kkt0.solve(&DVector::zeros(nvar), &h);
    let (_, mut z) = kkt0.solve(&(-c), &op.zero());
    let mut s = neg_s.scaled(-1.0);
    let e = op.identity();
    let deficiency = |v: &ConeVec| -> f64 {
        let psd = v.psd.iter().map(|b| -b.symmetric_eigenvalues().min()).fold(f64::NEG_INFINITY, f64::max);
        let lp = v.lp.iter().map(|x| -x).fold(f64::NEG_INFINITY, f64::max);
        psd.max(lp)
    };
    let ts = deficiency(&s);
    if ts >= -1e-8 * s.norm().max(1.0) {
        s.axpy(1.0 + ts, &e);
    }
    let tz = deficiency(&z);
    if tz >= -1e-8 * z.norm().max(1.0) {
        z.axpy(1.0 + tz, &e);
    }
    let Some(mut w) = Scaling::from_pair(&s, &z) else {
        return failure(SolveStatus::NumericalFailure, "initial scaling failed".into(), 0);
    };
    let mut tau = 1.0;
    let mut kappa = 1.0;

    let mut last = failure(SolveStatus::MaxIter, "iteration limit".into(), 0);
    let mut best: Option<(f64, ConicResult)> = None;
    for iter in 0..=opts.max_iter {
        let lam = w.lambda();
        let s = w.w_star(&lam);
        let z = w.w_inv(&lam);
        let gx = op.g(&x);
        let rx = op.gt(&z) + c * tau;
        let mut rz = s.clone();
        rz.axpy(1.0, &gx);
        rz.axpy(-tau, &h);
        let cx = c.dot(&x);
        let hz = h.dot(&z);
        let rtau = kappa + cx + hz;
        let sz = lam.dot(&lam);

        let pcost = cx / tau;
        let dcost = -hz / tau;
        let gap = sz / (tau * tau);
        let pres = rz.norm() / tau / resz0;
        let dres = rx.norm() / tau / resx0;
        let relgap = if pcost.abs().max(dcost.abs()) > 0.0 { gap / pcost.abs().max(dcost.abs()) } else { f64::INFINITY };
        log::trace!(
            "ipm it {iter:3} pcost {pcost:+.8e} dcost {dcost:+.8e} gap {gap:.2e} pres {pres:.2e} dres {dres:.2e} tau {tau:.2e} kappa {kappa:.2e}"
        );
        last = ConicResult {
            status: SolveStatus::MaxIter,
            y: &x / tau,
            iterations: iter,
            primal_obj: pcost,
            dual_obj: dcost,
            primal_residual: pres,
            dual_residual: dres,
            gap,
            detail: String::new(),
        };
        if !(pres.is_finite() && dres.is_finite() && gap.is_finite()) {
            last.status = SolveStatus::NumericalFailure;
            last.detail = "non-finite iterate".into();
            return fallback(last, best);
        }
        let merit = (pres / opts.feas_tol).max(dres / opts.feas_tol).max((relgap / opts.rel_gap).min(gap / opts.abs_gap));
        if best.as_ref().is_none_or(|(m, _)| merit < *m) {
            best = Some((merit, last.clone()));
        }
        if pres <= opts.feas_tol && dres <= opts.feas_tol && (relgap <= opts.rel_gap || gap <= opts.abs_gap) {
            last.status = SolveStatus::Optimal;
            last.detail = format!("converged in {iter} iterations");
            return last;
        }
        if hz < 0.0 {
            let pinf = op.gt(&z).norm() / resx0 / (-hz);
            if pinf <= opts.feas_tol {
                last.status = SolveStatus::Infeasible;
                last.detail = format!("primal infeasibility certificate: ‖Gᵀz‖/(-hᵀz) = {pinf:.2e}");
                return last;
            }
        }
        if cx < 0.0 {
            let mut gs = gx.clone();
            gs.axpy(1.0, &s);
            let dinf = gs.norm() / resz0 / (-cx);
            if dinf <= opts.feas_tol {
                last.status = SolveStatus::Unbounded;
                last.detail = format!("dual infeasibility certificate: ‖Gy+s‖/(-cᵀy) = {dinf:.2e}");
                return last;
            }
        }
        if iter == opts.max_iter {
            break;
        }

        let mu = (sz + tau * kappa) / (nu as f64 + 1.0);
        let Some(kkt) = Kkt::factor(&op, &w) else {
            last.status = SolveStatus::NumericalFailure;
            last.detail = format!("Schur complement factorization failed at iteration {iter}");
            return fallback(last, best);
        };
        let (dx1, dz1) = kkt.solve(&(-c), &h);
        let denom = c.dot(&dx1) + h.dot(&dz1) - kappa / tau;

        let direction = |rs: &ConeVec, rk: f64, eta: f64| -> Direction {
            let lam_rs = w.lambda_solve(rs);
            let mut bz = rz.scaled(-eta);
            bz.axpy(-1.0, &w.w_star(&lam_rs));
            let bx = &rx * (-eta);
            let (dx2, dz2) = kkt.solve(&bx, &bz);
            let dtau = (-eta * rtau - rk / tau - c.dot(&dx2) - h.dot(&dz2)) / denom;
            let dx = dx2 + &dx1 * dtau;
            let mut dz = dz2;
            dz.axpy(dtau, &dz1);
            let dz_s = w.w(&dz);
            let ds_s = lam_rs.sub(&dz_s);
            let dkappa = (rk - kappa * dtau) / tau;
            Direction { dx, ds: ds_s, dz: dz_s, dtau, dkappa }
        };
        let step_to_boundary = |d: &Direction| -> f64 {
            let mut a = w.max_step(&d.ds).min(w.max_step(&d.dz));
            if d.dtau < 0.0 {
                a = a.min(-tau / d.dtau);
            }
            if d.dkappa < 0.0 {
                a = a.min(-kappa / d.dkappa);
            }
            a
        };

        // predictor
        let lam_sq = jordan(&lam, &lam);
        let aff = direction(&lam_sq.scaled(-1.0), -tau * kappa, 1.0);
        let alpha_aff = step_to_boundary(&aff).min(1.0);
        let sigma = (1.0 - alpha_aff).clamp(0.0, 1.0).powi(3);

        // corrector
        let mut rs = lam_sq.scaled(-1.0);
        rs.axpy(-1.0, &jordan(&aff.ds, &aff.dz));
        rs.axpy(sigma * mu, &e);
        let rk = -tau * kappa - aff.dtau * aff.dkappa + sigma * mu;
        let dir = direction(&rs, rk, 1.0 - sigma);
        let mut alpha = (0.99 * step_to_boundary(&dir)).min(1.0);

        let mut updated = None;
        for _ in 0..30 {
            if let Some(next) = w.updated(&dir.ds, &dir.dz, alpha) {
                updated = Some(next);
                break;
            }
            alpha *= 0.8;
        }
        let Some(next) = updated else {
            last.status = SolveStatus::NumericalFailure;
            last.detail = format!("scaling update failed at iteration {iter}");
            return fallback(last, best);
        };
        log::trace!("ipm step alpha_aff {alpha_aff:.3e} sigma {sigma:.3e} alpha {alpha:.3e}");
        w = next;
        x.axpy(alpha, &dir.dx, 1.0);
        tau += alpha * dir.dtau;
        kappa += alpha * dir.dkappa;
    }
    last.status = SolveStatus::MaxIter;
    last.detail = format!("no convergence in {} iterations", opts.max_iter);
    fallback(last, best)
}

/// Best iterate within this factor of every tolerance is reported as optimal
/// when the iteration later stalls; callers re-verify it against the
/// original constraints.
const NEAR_OPTIMAL: f64 = 10.0;

fn fallback(last: ConicResult, best: Option<(f64, ConicResult)>) -> ConicResult {
    match best {
        Some((merit, mut b)) if merit <= NEAR_OPTIMAL => {
            b.status = SolveStatus::Optimal;
            b.detail = format!("near-optimal iterate {} kept after: {}", b.iterations, last.detail);
            b
        }
        _ => last,
    }
}
