//! Dense kernels: Stein/Lyapunov solvers, the Riccati oracle, pseudo-inverse.

use nalgebra::{DMatrix, DVector, Schur};

use crate::error::{Error, Result};

/// Largest Stein dimension solved by Kronecker vectorization.
pub const Q_SWITCH: usize = 30;
pub const DARE_TOL: f64 = 1e-12;
pub const DARE_MAX_ITER: usize = 100_000;

/// Numerical-rank threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum RankTol {
    /// `max(rows, cols) · σ_max · f64::EPSILON`
    #[default]
    Auto,
    Absolute(f64),
}

impl RankTol {
    pub fn threshold(self, rows: usize, cols: usize, sigma_max: f64) -> f64 {
        match self {
            RankTol::Auto => rows.max(cols) as f64 * sigma_max * f64::EPSILON,
            RankTol::Absolute(t) => t,
        }
    }
}

pub fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    // the unbounded Schur iteration can cycle on some defective matrices
    match Schur::try_new(m.clone(), f64::EPSILON, 10_000) {
        Some(schur) => schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max),
        None => gelfand_radius(m),
    }
}

/// ‖M^(2^k)‖^(1/2^k) by repeated squaring with rescaling.
fn gelfand_radius(m: &DMatrix<f64>) -> f64 {
    let mut a = m.clone();
    let mut log_scale = 0.0;
    let mut est = f64::INFINITY;
    for k in 0..64 {
        let nrm = a.norm();
        if nrm == 0.0 || !nrm.is_finite() {
            return if nrm == 0.0 { 0.0 } else { est };
        }
        a /= nrm;
        log_scale += nrm.ln() / 2f64.powi(k);
        est = log_scale.exp();
        a = &a * &a;
    }
    est
}

pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.is_empty() {
        return DVector::zeros(0);
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    DVector::from_vec(s)
}

pub fn rank(m: &DMatrix<f64>, tol: RankTol) -> usize {
    let s = singular_values(m);
    if s.is_empty() {
        return 0;
    }
    let thr = tol.threshold(m.nrows(), m.ncols(), s[0]);
    s.iter().filter(|&&x| x > thr).count()
}

/// Smallest of the min(rows, cols) singular values (0 for empty input).
pub fn sigma_min(m: &DMatrix<f64>) -> f64 {
    singular_values(m).iter().copied().reduce(f64::min).unwrap_or(0.0)
}

/// Moore–Penrose pseudo-inverse via SVD, discarding singular values at or below the rank threshold.
pub fn pinv(m: &DMatrix<f64>, tol: RankTol) -> DMatrix<f64> {
    let (r, c) = m.shape();
    if m.is_empty() {
        return DMatrix::zeros(c, r);
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let thr = tol.threshold(r, c, smax);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut out = DMatrix::zeros(c, r);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > thr && s > 0.0 {
            out += vt.row(i).transpose() * u.column(i).transpose() / s;
        }
    }
    out
}

/// Θ = G + MᵀΘM.
#[derive(Clone, Debug)]
pub struct SteinProblem {
    pub m: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

impl SteinProblem {
    pub fn residual(&self, theta: &DMatrix<f64>) -> f64 {
        spectral_norm(&(theta - &self.g - self.m.transpose() * theta * &self.m))
    }
}

/// Solves Θ = G + MᵀΘM, Kronecker for q ≤ [`Q_SWITCH`], doubling otherwise.
pub fn solve_stein(m: &DMatrix<f64>, g: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    let q = check_stein(m, g)?;
    let solve = |rhs: &DMatrix<f64>| if q <= Q_SWITCH { stein_kronecker(m, rhs) } else { stein_doubling(m, rhs, tol, max_iter) };
    let mut theta = solve(g)?;
    // one refinement sweep: Θ's error is then set by the residual's rounding, not the factorization's
    let defect = sym(&(g + m.transpose() * &theta * m - &theta));
    theta = sym(&(theta + solve(&defect)?));
    let prob = SteinProblem { m: m.clone(), g: g.clone() };
    let res = prob.residual(&theta);
    let scale = spectral_norm(&theta).max(1.0);
    if !res.is_finite() || res > tol.max(1e-9) * scale {
        return Err(Error::Conditioning(format!("Stein residual {res:.3e} (scale {scale:.3e})")));
    }
    Ok(theta)
}

fn check_stein(m: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<usize> {
    let q = m.nrows();
    if m.ncols() != q || g.shape() != (q, q) {
        return Err(Error::Shape(format!("Stein: M {:?}, G {:?}", m.shape(), g.shape())));
    }
    let rho = spectral_radius(m);
    if !rho.is_finite() || rho >= 1.0 {
        return Err(Error::Unstable { rho });
    }
    Ok(q)
}

/// (I − Mᵀ⊗Mᵀ) vec Θ = vec G.
pub fn stein_kronecker(m: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = check_stein(m, g)?;
    if q == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let mt = m.transpose();
    let lhs = DMatrix::identity(q * q, q * q) - mt.kronecker(&mt);
    let rhs = DVector::from_column_slice(g.as_slice());
    let x = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Conditioning("singular Kronecker system".into()))?;
    Ok(sym(&DMatrix::from_column_slice(q, q, x.as_slice())))
}

/// Θ ← Θ + AᵀΘA, A ← A².
pub fn stein_doubling(m: &DMatrix<f64>, g: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    check_stein(m, g)?;
    let mut theta = sym(g);
    let mut a = m.clone();
    let mut last = f64::INFINITY;
    for _ in 0..max_iter.max(1) {
        let inc = a.transpose() * &theta * &a;
        theta += &inc;
        a = &a * &a;
        last = spectral_norm(&inc);
        if last <= tol * spectral_norm(&theta).max(1.0) * 1e-3 || spectral_norm(&a) < f64::EPSILON {
            return Ok(sym(&theta));
        }
    }
    Err(Error::NonConvergence { iterations: max_iter, last, residuals: vec![last] })
}

/// P = FᵀPF + Qc.
pub fn solve_discrete_lyapunov(f: &DMatrix<f64>, qc: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    solve_stein(f, qc, tol, 200)
}

#[derive(Clone, Debug)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Greedy gain −(BᵀPB+R)⁻¹BᵀPA.
pub fn greedy_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let h = sym(&(b.transpose() * p * b + r));
    let rhs = b.transpose() * p * a;
    let chol = h
        .cholesky()
        .ok_or_else(|| Error::Evaluation("BᵀPB + R not positive definite".into()))?;
    Ok(-chol.solve(&rhs))
}

/// Fixed-point iteration on the DARE from P₀ = Qx.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    qx: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DareSolution> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || qx.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Shape("DARE operand dimensions".into()));
    }
    let at = a.transpose();
    let mut p = sym(qx);
    let mut history = Vec::new();
    for it in 1..=max_iter {
        let k = greedy_gain(a, b, r, &p)?;
        // Pₖ₊₁ = Qx + AᵀPA + AᵀPBK
        let next = sym(&(qx + &at * &p * a + &at * &p * b * &k));
        let diff = sym_norm(&(&next - &p));
        p = next;
        if !diff.is_finite() {
            break;
        }
        if it % 64 == 0 || diff <= tol * sym_norm(&p).max(1.0) {
            history.push(diff);
        }
        if diff <= tol * sym_norm(&p).max(1.0) {
            let k = greedy_gain(a, b, r, &p)?;
            let residual = dare_residual(a, b, qx, r, &p);
            return Ok(DareSolution { p, k, iterations: it, residual });
        }
    }
    let last = history.last().copied().unwrap_or(f64::NAN);
    Err(Error::NonConvergence { iterations: max_iter, last, residuals: history })
}

pub fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, qx: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let at = a.transpose();
    let h = b.transpose() * p * b + r;
    let Some(hinv) = h.try_inverse() else { return f64::INFINITY };
    let rhs = qx + &at * p * a - &at * p * b * hinv * b.transpose() * p * a;
    spectral_norm(&(p - rhs))
}

/// Spectral norm of a symmetric matrix (largest |eigenvalue|).
pub fn sym_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().symmetric_eigenvalues().iter().fold(0.0, |acc: f64, x| acc.max(x.abs()))
}

pub fn min_eigenvalue_sym(m: &DMatrix<f64>) -> f64 {
    sym(m).symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}
