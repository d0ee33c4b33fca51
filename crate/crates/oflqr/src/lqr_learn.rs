//! Off-policy output-feedback policy iteration and value iteration on
//! projected substitute-state data.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti_sim::CostWeights;
use crate::solver_core::{pinv, spectral_norm, spectral_radius, sym, sym_norm, solve_stein, RankTol};
use crate::state_param::SubstituteData;

/// Θ_uu with a condition number above this is treated as singular.
pub const MAX_UU_COND: f64 = 1e12;

/// Symmetric (n_v+m)×(n_v+m) Q-function kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct QMatrix {
    pub theta: DMatrix<f64>,
    pub n_v: usize,
}

impl QMatrix {
    pub fn new(theta: DMatrix<f64>, n_v: usize) -> Result<Self> {
        if !theta.is_square() || theta.nrows() <= n_v {
            return Err(Error::Shape(format!("Θ {:?} with n_v = {n_v}", theta.shape())));
        }
        Ok(QMatrix { theta: sym(&theta), n_v })
    }
    pub fn m(&self) -> usize {
        self.theta.nrows() - self.n_v
    }
    pub fn vv(&self) -> DMatrix<f64> {
        self.theta.view((0, 0), (self.n_v, self.n_v)).into_owned()
    }
    pub fn vu(&self) -> DMatrix<f64> {
        self.theta.view((0, self.n_v), (self.n_v, self.m())).into_owned()
    }
    pub fn uu(&self) -> DMatrix<f64> {
        let m = self.m();
        self.theta.view((self.n_v, self.n_v), (m, m)).into_owned()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueMatrix(pub DMatrix<f64>);

/// m×n_v output-feedback gain, u = K v.
#[derive(Clone, Debug, PartialEq)]
pub struct Gain(pub DMatrix<f64>);

impl Gain {
    pub fn zeros(m: usize, n_v: usize) -> Self {
        Gain(DMatrix::zeros(m, n_v))
    }
    /// [I; K]
    pub fn stacked(&self) -> DMatrix<f64> {
        let (m, nv) = self.0.shape();
        DMatrix::from_fn(nv + m, nv, |i, j| if i < nv { (i == j) as u8 as f64 } else { self.0[(i - nv, j)] })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// ‖K^{i+1}−K^i‖ (PI) or ‖P^{i+1}−P^i‖ (VI), spectral norm.
    pub residual: f64,
    pub wall_time_ms: f64,
    /// Relative Frobenius residual of the un-reduced data equation.
    pub equation_residual: f64,
    #[serde(skip)]
    pub theta: DMatrix<f64>,
    #[serde(skip)]
    pub p: Option<DMatrix<f64>>,
    #[serde(skip)]
    pub k: DMatrix<f64>,
}

impl IterationRecord {
    pub fn write_csv<W: std::io::Write>(records: &[IterationRecord], w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iteration", "residual", "wall_time_ms"])?;
        for r in records {
            wr.write_record([r.iteration.to_string(), format!("{:.16e}", r.residual), format!("{:.6}", r.wall_time_ms)])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// JSON history; Θ, P and K matrices only when `full` is set.
    pub fn to_json(records: &[IterationRecord], full: bool) -> serde_json::Value {
        let mat = |m: &DMatrix<f64>| {
            serde_json::json!({ "rows": m.nrows(), "cols": m.ncols(), "data": m.as_slice() })
        };
        serde_json::Value::Array(
            records
                .iter()
                .map(|r| {
                    let mut v = serde_json::to_value(r).unwrap_or_default();
                    if full {
                        v["theta"] = mat(&r.theta);
                        v["k"] = mat(&r.k);
                        if let Some(p) = &r.p {
                            v["p"] = mat(p);
                        }
                    }
                    v
                })
                .collect(),
        )
    }
}

/// Quantities derived once from the data: Ψ0⁺, W = V1Ψ0⁺ and the stage-cost kernel G.
#[derive(Clone, Debug)]
pub struct Learner<'a> {
    pub data: &'a SubstituteData,
    pub weights: CostWeights,
    psi_pinv: DMatrix<f64>,
    w: DMatrix<f64>,
    g: DMatrix<f64>,
    /// R factor of [Ψ0; Y0; U0; V1]ᵀ = QR, for residual certificates.
    r_fac: DMatrix<f64>,
}

impl<'a> Learner<'a> {
    pub fn new(data: &'a SubstituteData, weights: CostWeights) -> Result<Self> {
        let (n_v, m, p) = (data.n_v, data.m(), data.p());
        if weights.q.nrows() != p || weights.r.nrows() != m {
            return Err(Error::Shape("cost weights do not match the data".into()));
        }
        let psi_pinv = pinv(&data.psi0, RankTol::Auto);
        let check = &data.psi0 * &psi_pinv;
        if (check - DMatrix::identity(n_v + m, n_v + m)).abs().max() > 1e-6 {
            return Err(Error::PeViolation("[V0; U0] lacks full row rank".into()));
        }
        let yp = &data.y0 * &psi_pinv;
        let up = &data.u0 * &psi_pinv;
        let g = sym(&(yp.transpose() * &weights.q * &yp + up.transpose() * &weights.r * &up));
        let w = &data.v1 * &psi_pinv;
        let stack = DMatrix::from_fn(2 * (n_v + m) + p, data.samples(), |i, j| {
            if i < n_v + m {
                data.psi0[(i, j)]
            } else if i < n_v + m + p {
                data.y0[(i - n_v - m, j)]
            } else if i < n_v + 2 * m + p {
                data.u0[(i - n_v - m - p, j)]
            } else {
                data.v1[(i - n_v - 2 * m - p, j)]
            }
        });
        let r_fac = stack.transpose().qr().r();
        Ok(Learner { data, weights, psi_pinv, w, g, r_fac })
    }

    pub fn n_v(&self) -> usize {
        self.data.n_v
    }
    pub fn m(&self) -> usize {
        self.data.m()
    }

    /// [Â B̂] = V1Ψ0⁺.
    pub fn transition(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn stage_kernel(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn psi_pinv(&self) -> &DMatrix<f64> {
        &self.psi_pinv
    }

    /// [I; K]·V1Ψ0⁺, the data-space closed loop on ψ = [v; u].
    pub fn closed_loop(&self, k: &Gain) -> DMatrix<f64> {
        k.stacked() * &self.w
    }

    pub fn closed_loop_radius(&self, k: &Gain) -> f64 {
        spectral_radius(&self.closed_loop(k))
    }

    /// ‖Ψ0ᵀΘΨ0 − Y0ᵀQY0 − U0ᵀRU0 − V1ᵀ S V1‖_F / ‖Ψ0ᵀΘΨ0‖_F without forming T×T products:
    /// with Lᵀ = QR, ‖LᵀSL‖_F = ‖RSRᵀ‖_F.
    fn equation_residual(&self, theta: &DMatrix<f64>, next: &DMatrix<f64>) -> f64 {
        let (nv, m, p) = (self.n_v(), self.m(), self.data.p());
        let q = nv + m;
        let size = 2 * q + p;
        let mut s = DMatrix::zeros(size, size);
        s.view_mut((0, 0), (q, q)).copy_from(theta);
        s.view_mut((q, q), (p, p)).copy_from(&(-&self.weights.q));
        s.view_mut((q + p, q + p), (m, m)).copy_from(&(-&self.weights.r));
        s.view_mut((q + p + m, q + p + m), (nv, nv)).copy_from(&(-next));
        let r = &self.r_fac;
        let res = (r * &s * r.transpose()).norm();
        let rp = r.columns(0, q);
        let base = (rp * theta * rp.transpose()).norm();
        res / base.max(f64::MIN_POSITIVE)
    }

    /// Θ = G + MᵀΘM, M = [I; K]V1Ψ0⁺.
    pub fn pi_policy_evaluation(&self, k: &Gain) -> Result<(QMatrix, f64)> {
        if k.0.shape() != (self.m(), self.n_v()) {
            return Err(Error::Shape(format!("gain {:?}, expected {}×{}", k.0.shape(), self.m(), self.n_v())));
        }
        let mcl = self.closed_loop(k);
        let theta = solve_stein(&mcl, &self.g, 1e-9, 200).map_err(|e| match e {
            Error::Unstable { rho } => Error::Evaluation(format!("gain is not stabilizing on the data (ρ = {rho:.6})")),
            other => other,
        })?;
        let st = k.stacked();
        let next = st.transpose() * &theta * &st;
        let res = self.equation_residual(&theta, &next);
        Ok((QMatrix::new(theta, self.n_v())?, res))
    }

    /// Θ = G + WᵀPW.
    pub fn vi_q_evaluation(&self, p: &ValueMatrix) -> Result<(QMatrix, f64)> {
        if p.0.shape() != (self.n_v(), self.n_v()) {
            return Err(Error::Shape(format!("P {:?}, expected n_v = {}", p.0.shape(), self.n_v())));
        }
        let theta = sym(&(&self.g + self.w.transpose() * &p.0 * &self.w));
        let res = self.equation_residual(&theta, &p.0);
        Ok((QMatrix::new(theta, self.n_v())?, res))
    }
}

/// Solves Θ_uu X = rhs via Cholesky with a conditioning guard.
fn solve_uu(theta: &QMatrix, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let uu = sym(&theta.uu());
    let ev = uu.clone().symmetric_eigenvalues();
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x.abs())));
    if !(lo > 0.0) || hi / lo > MAX_UU_COND {
        return Err(Error::Evaluation(format!("Θ_uu singular or indefinite (λ ∈ [{lo:.3e}, {hi:.3e}])")));
    }
    let chol = uu.cholesky().ok_or_else(|| Error::Evaluation("Θ_uu Cholesky failed".into()))?;
    Ok(chol.solve(rhs))
}

/// K = −Θ_uu⁻¹Θ_vuᵀ.
pub fn policy_improvement(theta: &QMatrix) -> Result<Gain> {
    Ok(Gain(-solve_uu(theta, &theta.vu().transpose())?))
}

/// P = Θ_vv − Θ_vu Θ_uu⁻¹ Θ_vuᵀ.
pub fn vi_value_update(theta: &QMatrix) -> Result<ValueMatrix> {
    let vu = theta.vu();
    let x = solve_uu(theta, &vu.transpose())?;
    Ok(ValueMatrix(sym(&(theta.vv() - vu * x))))
}

/// v0ᵀ[I; K]ᵀΘ[I; K]v0.
pub fn evaluate_learned_cost(k: &Gain, theta: &QMatrix, v0: &DVector<f64>) -> f64 {
    let z = k.stacked() * v0;
    (z.transpose() * &theta.theta * z)[(0, 0)]
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub k_star: Gain,
    pub theta: QMatrix,
    pub p: Option<ValueMatrix>,
    pub records: Vec<IterationRecord>,
    pub converged: bool,
}

impl RunOutcome {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }
    pub fn final_residual(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.residual)
    }
    pub fn residuals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.residual).collect()
    }
}

/// Policy iteration until ‖K^{i+1}−K^i‖ ≤ eps or `max_iter` evaluations.
pub fn run_pi(learner: &Learner, k0: &Gain, eps: f64, max_iter: usize) -> Result<RunOutcome> {
    let mut k = k0.clone();
    let mut records = Vec::new();
    let clock = Instant::now();
    let mut last_theta = None;
    for i in 1..=max_iter {
        let (theta, eq) = learner.pi_policy_evaluation(&k).map_err(|e| e.at(i))?;
        let next = policy_improvement(&theta).map_err(|e| e.at(i))?;
        let residual = spectral_norm(&(&next.0 - &k.0));
        records.push(IterationRecord {
            iteration: i,
            residual,
            wall_time_ms: clock.elapsed().as_secs_f64() * 1e3,
            equation_residual: eq,
            theta: theta.theta.clone(),
            p: None,
            k: next.0.clone(),
        });
        k = next;
        last_theta = Some(theta);
        if residual <= eps {
            return Ok(RunOutcome { k_star: k, theta: last_theta.unwrap(), p: None, records, converged: true });
        }
    }
    let theta = last_theta.ok_or_else(|| Error::InvalidArgument("max_iter must be positive".into()))?;
    Ok(RunOutcome { k_star: k, theta, p: None, records, converged: false })
}

/// Value iteration until ‖P^{i+1}−P^i‖ ≤ eps, then one more Q-evaluation and gain extraction.
pub fn run_vi(learner: &Learner, p0: &ValueMatrix, eps: f64, max_iter: usize) -> Result<RunOutcome> {
    let out = vi_loop(learner, p0, eps, max_iter)?;
    if !out.converged {
        let residuals = out.residuals();
        return Err(Error::NonConvergence { iterations: max_iter, last: out.final_residual(), residuals });
    }
    Ok(out)
}

/// Exactly `iterations` value updates (no stop rule), then gain extraction.
pub fn run_vi_fixed(learner: &Learner, p0: &ValueMatrix, iterations: usize) -> Result<RunOutcome> {
    vi_loop(learner, p0, -1.0, iterations)
}

fn vi_loop(learner: &Learner, p0: &ValueMatrix, eps: f64, max_iter: usize) -> Result<RunOutcome> {
    let mut p = ValueMatrix(sym(&p0.0));
    let mut records = Vec::new();
    let clock = Instant::now();
    let mut converged = false;
    for i in 1..=max_iter {
        let (theta, eq) = learner.vi_q_evaluation(&p).map_err(|e| e.at(i))?;
        let next = vi_value_update(&theta).map_err(|e| e.at(i))?;
        let residual = sym_norm(&(&next.0 - &p.0));
        if !residual.is_finite() {
            return Err(Error::Evaluation(format!("value iterate diverged at iteration {i}")));
        }
        let k = policy_improvement(&theta).map_err(|e| e.at(i))?;
        records.push(IterationRecord {
            iteration: i,
            residual,
            wall_time_ms: clock.elapsed().as_secs_f64() * 1e3,
            equation_residual: eq,
            theta: theta.theta,
            p: Some(next.0.clone()),
            k: k.0,
        });
        p = next;
        if residual <= eps {
            converged = true;
            break;
        }
    }
    let (theta, _) = learner.vi_q_evaluation(&p)?;
    let k_star = policy_improvement(&theta)?;
    Ok(RunOutcome { k_star, theta, p: Some(p), records, converged })
}

/// Dead-beat initial gain K⁰ = U0(V0⁺ + g·K_d), g spanning ker V0.
pub fn deadbeat_initial_gain(data: &SubstituteData) -> Result<Gain> {
    let (nv, t) = (data.n_v, data.samples());
    let v0p = pinv(&data.v0, RankTol::Auto);
    if (&data.v0 * &v0p - DMatrix::identity(nv, nv)).abs().max() > 1e-6 {
        return Err(Error::Initialization("V0 lacks full row rank".into()));
    }
    if t == nv {
        return Ok(Gain(&data.u0 * v0p));
    }
    let g = null_space(&data.v0);
    let a = &data.v1 * &v0p;
    let b = &data.v1 * &g;
    let kd = deadbeat(&a, &b)?;
    let k = &data.u0 * (v0p + g * kd);
    Ok(Gain(k))
}

/// Orthonormal basis of ker(M) for a full-row-rank M.
fn null_space(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let qr = m.transpose().qr();
    let q = qr.q();
    // full Q of Mᵀ: complete the thin factor to an orthonormal basis
    let mut basis = DMatrix::zeros(c, c);
    basis.columns_mut(0, r).copy_from(&q);
    let mut k = r;
    for e in 0..c {
        if k == c {
            break;
        }
        let mut v = DVector::zeros(c);
        v[e] = 1.0;
        for _ in 0..2 {
            let proj = basis.columns(0, k).transpose() * &v;
            v -= basis.columns(0, k) * proj;
        }
        let nrm = v.norm();
        if nrm > 1e-8 {
            basis.set_column(k, &(v / nrm));
            k += 1;
        }
    }
    basis.columns(r, c - r).into_owned()
}

/// Gain placing all eigenvalues of A + BK at the origin (Luenberger canonical form).
pub fn deadbeat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let q = b.ncols();
    let scale = spectral_norm(b).max(f64::MIN_POSITIVE);
    let tol = 1e-9 * scale.max(1.0);
    // crate-order selection over [B, AB, A²B, …]
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut chains: Vec<Vec<DVector<f64>>> = vec![Vec::new(); q];
    let mut active: Vec<bool> = vec![true; q];
    let mut cur: Vec<DVector<f64>> = (0..q).map(|i| b.column(i).into_owned()).collect();
    while basis.len() < n && active.iter().any(|&x| x) {
        for i in 0..q {
            if !active[i] || basis.len() == n {
                continue;
            }
            let v = cur[i].clone();
            let mut r = v.clone();
            for _ in 0..2 {
                for e in &basis {
                    r -= e * e.dot(&r);
                }
            }
            let nrm = r.norm();
            if nrm > tol * v.norm().max(1.0) && nrm > f64::EPSILON * scale {
                basis.push(r / nrm);
                chains[i].push(v);
            } else {
                active[i] = false;
            }
        }
        for c in cur.iter_mut() {
            *c = a * &*c;
        }
    }
    if basis.len() < n {
        return Err(Error::Initialization(format!(
            "pair is not controllable: reachable dimension {} < {n}",
            basis.len()
        )));
    }
    let used: Vec<usize> = (0..q).filter(|&i| !chains[i].is_empty()).collect();
    let mut s = DMatrix::zeros(n, n);
    let mut last_pos = Vec::new();
    let mut col = 0;
    for &i in &used {
        for v in &chains[i] {
            s.set_column(col, v);
            col += 1;
        }
        last_pos.push(col - 1);
    }
    let sinv = s.try_inverse().ok_or_else(|| Error::Initialization("chain matrix singular".into()))?;
    let mu: Vec<usize> = used.iter().map(|&i| chains[i].len()).collect();
    let nu = used.len();
    let mut gamma = DMatrix::zeros(nu, nu);
    let mut xi = DMatrix::zeros(nu, n);
    for (r, (&pos, &mi)) in last_pos.iter().zip(&mu).enumerate() {
        let si = sinv.row(pos).into_owned();
        let mut sa = si.clone();
        for _ in 0..mi - 1 {
            sa = &sa * a;
        }
        for (c, &l) in used.iter().enumerate() {
            gamma[(r, c)] = (&sa * b.column(l))[(0, 0)];
        }
        xi.set_row(r, &(&sa * a));
    }
    let ginv = gamma.try_inverse().ok_or_else(|| Error::Initialization("Γ singular".into()))?;
    let ksel = -ginv * xi;
    let mut k = DMatrix::zeros(q, n);
    for (r, &i) in used.iter().enumerate() {
        k.set_row(i, &ksel.row(r));
    }
    Ok(k)
}

/// λ_min(Θ^i − Θ^{i+1}) over consecutive PI records (monotonicity ⇒ ≥ 0).
pub fn pi_monotonicity_margin(records: &[IterationRecord]) -> f64 {
    records
        .windows(2)
        .map(|w| crate::solver_core::min_eigenvalue_sym(&(&w[0].theta - &w[1].theta)))
        .fold(f64::INFINITY, f64::min)
}

/// Least-squares slope of log r_{i+1} against log r_i over consecutive pairs
/// whose members both lie in [lo, hi]; None with fewer than one such pair.
pub fn convergence_order(residuals: &[f64], lo: f64, hi: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = residuals
        .windows(2)
        .filter(|w| w.iter().all(|&r| r >= lo && r <= hi))
        .map(|w| (w[0].ln(), w[1].ln()))
        .collect();
    match pts.len() {
        0 => None,
        1 => Some(pts[0].1 / pts[0].0),
        k => {
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / k as f64;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / k as f64;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            (sxx > 0.0).then(|| sxy / sxx)
        }
    }
}

/// Mean and coefficient of variation of r_{i+1}/r_i over the last `window` ratios.
pub fn terminal_ratio(residuals: &[f64], window: usize) -> Option<(f64, f64)> {
    let ratios: Vec<f64> = residuals.windows(2).map(|w| w[1] / w[0]).collect();
    if ratios.len() < window || window == 0 {
        return None;
    }
    let tail = &ratios[ratios.len() - window..];
    let mean = tail.iter().sum::<f64>() / window as f64;
    let var = tail.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / window as f64;
    Some((mean, var.sqrt() / mean.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti_sim::{generate_pe_input, simulate, LtiSystem};
    use crate::solver_core::{solve_dare, solve_discrete_lyapunov, DARE_MAX_ITER, DARE_TOL};
    use crate::state_param::{build_delayed, build_filtered, project, ParamConfig};
    use proptest::prelude::*;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn siso() -> LtiSystem {
        LtiSystem::new(
            m(3, 3, &[0.8, 0.2, 0.0, -0.1, 0.6, 0.3, 0.0, 0.1, 0.5]),
            m(3, 1, &[0.0, 0.3, 1.0]),
            m(1, 3, &[1.0, 0.0, 0.0]),
        )
        .unwrap()
    }

    fn mimo_unstable() -> LtiSystem {
        LtiSystem::new(
            m(3, 3, &[1.05, 0.2, 0.0, 0.0, 0.9, 0.3, 0.1, 0.0, 0.7]),
            m(3, 2, &[1.0, 0.0, 0.0, 0.4, 0.2, 1.0]),
            m(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
        )
        .unwrap()
    }

    fn filtered_data(sys: &LtiSystem, seed: u32) -> (SubstituteData, DVector<f64>) {
        let x0 = DVector::from_vec(vec![0.3, -0.2, 0.4]);
        let u = generate_pe_input(sys.m(), 60, 50, seed).unwrap();
        let tr = simulate(sys, &x0, &u, None).unwrap();
        let cfg = ParamConfig::filtered(&[-0.5, 0.4, 0.2], DVector::from_vec(vec![0.2, -0.1, 0.3]));
        let raw = build_filtered(&tr, &cfg).unwrap();
        (project(&raw, 3, RankTol::Auto).unwrap(), x0)
    }

    fn oracle_cost(sys: &LtiSystem, w: &CostWeights, x0: &DVector<f64>) -> f64 {
        let s = solve_dare(&sys.a, &sys.b, &w.qx(sys), &w.r, DARE_TOL, DARE_MAX_ITER).unwrap();
        (x0.transpose() * s.p * x0)[(0, 0)]
    }

    #[test]
    fn gain_stacking() {
        let k = Gain(m(1, 2, &[3.0, 4.0]));
        assert_eq!(k.stacked(), m(3, 2, &[1.0, 0.0, 0.0, 1.0, 3.0, 4.0]));
    }

    #[test]
    fn improvement_trivial_cases() {
        let th = QMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 1.0])), 2).unwrap();
        assert_eq!(policy_improvement(&th).unwrap().0, DMatrix::zeros(1, 2));
        let mut t = DMatrix::identity(4, 4) * 5.0;
        t.view_mut((2, 2), (2, 2)).copy_from(&DMatrix::identity(2, 2));
        // Θ_vu = c·e₀e₁ᵀ
        t[(0, 3)] = 0.7;
        t[(3, 0)] = 0.7;
        let k = policy_improvement(&QMatrix::new(t, 2).unwrap()).unwrap();
        assert_eq!(k.0, m(2, 2, &[0.0, 0.0, -0.7, 0.0]));
    }

    #[test]
    fn value_update_trivial_cases() {
        let th = QMatrix::new(m(2, 2, &[2.0, 1.0, 1.0, 1.0]), 1).unwrap();
        assert!((vi_value_update(&th).unwrap().0[(0, 0)] - 1.0).abs() < 1e-15);
        let bd = QMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 1.0])), 2).unwrap();
        assert_eq!(vi_value_update(&bd).unwrap().0, m(2, 2, &[2.0, 0.0, 0.0, 3.0]));
        let sing = QMatrix::new(m(2, 2, &[1.0, 0.0, 0.0, 0.0]), 1).unwrap();
        assert!(matches!(vi_value_update(&sing), Err(Error::Evaluation(_))));
    }

    #[test]
    fn zero_initial_state_costs_nothing() {
        let th = QMatrix::new(DMatrix::identity(3, 3), 2).unwrap();
        assert_eq!(evaluate_learned_cost(&Gain::zeros(1, 2), &th, &DVector::zeros(2)), 0.0);
    }

    #[test]
    fn degenerate_v1_gives_stage_kernel() {
        let (mut sd, _) = filtered_data(&siso(), 3);
        sd.v1.fill(0.0);
        let l = Learner::new(&sd, CostWeights::identity(1, 1)).unwrap();
        let (th, _) = l.pi_policy_evaluation(&Gain::zeros(1, sd.n_v)).unwrap();
        assert!((&th.theta - l.stage_kernel()).abs().max() < 1e-12);
        let (th, _) = l.vi_q_evaluation(&ValueMatrix(DMatrix::zeros(sd.n_v, sd.n_v))).unwrap();
        assert!((&th.theta - l.stage_kernel()).abs().max() < 1e-12);
    }

    // Θ against the model-based assembly F̄ᵀ[diag(Qx,R) + [A B]ᵀP[A B]]F̄, F̄ = [F 0; 0 I], F = X0·V0⁺.
    #[test]
    fn q_evaluation_matches_model_oracle() {
        let sys = siso();
        let x0 = DVector::from_vec(vec![0.3, -0.2, 0.4]);
        let u = generate_pe_input(1, 60, 50, 5).unwrap();
        let tr = simulate(&sys, &x0, &u, None).unwrap();
        let cfg = ParamConfig::filtered(&[-0.5, 0.4, 0.2], DVector::from_vec(vec![0.2, -0.1, 0.3]));
        let sd = project(&build_filtered(&tr, &cfg).unwrap(), 3, RankTol::Auto).unwrap();
        let x = tr.x.clone().unwrap();
        let x0m = x.columns(0, sd.samples()).into_owned();
        let f = &x0m * pinv(&sd.v0, RankTol::Auto);
        assert!((&f * &sd.v0 - &x0m).abs().max() < 1e-9);
        let w = CostWeights::new(m(1, 1, &[2.0]), m(1, 1, &[1.0])).unwrap();
        let l = Learner::new(&sd, w.clone()).unwrap();
        let pv = DMatrix::identity(3, 3) * 1.5;
        let (th, eq) = l.vi_q_evaluation(&ValueMatrix(f.transpose() * &pv * &f)).unwrap();
        let nv = sd.n_v;
        let mut fbar = DMatrix::zeros(4, nv + 1);
        fbar.view_mut((0, 0), (3, nv)).copy_from(&f);
        fbar[(3, nv)] = 1.0;
        let ab = DMatrix::from_fn(3, 4, |i, j| if j < 3 { sys.a[(i, j)] } else { sys.b[(i, 0)] });
        let mut mid = ab.transpose() * &pv * &ab;
        let mut blk = mid.view_mut((0, 0), (3, 3));
        blk += w.qx(&sys);
        mid[(3, 3)] += 1.0;
        let want = fbar.transpose() * mid * &fbar;
        assert!((&th.theta - &want).abs().max() < 1e-8 * want.abs().max());
        assert!(eq < 1e-8);
    }

    #[test]
    fn policy_evaluation_matches_lyapunov_oracle() {
        let sys = siso();
        let (sd, _) = filtered_data(&sys, 5);
        let w = CostWeights::identity(1, 1);
        let l = Learner::new(&sd, w.clone()).unwrap();
        let (th, eq) = l.pi_policy_evaluation(&Gain::zeros(1, sd.n_v)).unwrap();
        assert!(eq < 1e-8);
        // u = 0: Θ_vv = Fᵀ(Qx + AᵀP A)F, P from the open-loop Lyapunov equation
        let x = simulate(&sys, &DVector::from_vec(vec![0.3, -0.2, 0.4]), &generate_pe_input(1, 60, 50, 5).unwrap(), None)
            .unwrap()
            .x
            .unwrap();
        let f = x.columns(0, sd.samples()).into_owned() * pinv(&sd.v0, RankTol::Auto);
        let p = solve_discrete_lyapunov(&sys.a, &w.qx(&sys), 1e-12).unwrap();
        let want = f.transpose() * (w.qx(&sys) + sys.a.transpose() * &p * &sys.a) * &f;
        assert!((th.vv() - &want).abs().max() < 1e-8 * want.abs().max());
    }

    #[test]
    fn pi_and_vi_reach_oracle_cost() {
        let sys = siso();
        let (sd, x0) = filtered_data(&sys, 7);
        let w = CostWeights::new(m(1, 1, &[2.0]), m(1, 1, &[1.0])).unwrap();
        let l = Learner::new(&sd, w.clone()).unwrap();
        let oc = oracle_cost(&sys, &w, &x0);
        let pi = run_pi(&l, &Gain::zeros(1, sd.n_v), 1e-10, 30).unwrap();
        assert!(pi.converged);
        let c = evaluate_learned_cost(&pi.k_star, &pi.theta, &sd.v_initial());
        assert!(((c - oc) / oc).abs() < 1e-8, "{c} vs {oc}");
        let vi = run_vi(&l, &ValueMatrix(DMatrix::identity(sd.n_v, sd.n_v) * 1e3), 1e-10, 5000).unwrap();
        let c = evaluate_learned_cost(&vi.k_star, &vi.theta, &sd.v_initial());
        assert!(((c - oc) / oc).abs() < 1e-7, "{c} vs {oc}");
        assert!(pi_monotonicity_margin(&pi.records) >= -1e-8);
    }

    #[test]
    fn pi_from_fixed_point_stops_at_once() {
        let sys = siso();
        let (sd, _) = filtered_data(&sys, 8);
        let l = Learner::new(&sd, CostWeights::identity(1, 1)).unwrap();
        let pi = run_pi(&l, &Gain::zeros(1, sd.n_v), 1e-12, 30).unwrap();
        let again = run_pi(&l, &pi.k_star, 1e-8, 30).unwrap();
        assert_eq!(again.iterations(), 1);
        let p = pi.p.clone().unwrap_or_else(|| vi_value_update(&pi.theta).unwrap());
        let vi = run_vi(&l, &p, 1e-8, 30).unwrap();
        assert!(vi.iterations() <= 2);
        let (th, _) = l.vi_q_evaluation(&p).unwrap();
        assert!((vi_value_update(&th).unwrap().0 - &p.0).abs().max() < 1e-8 * p.0.abs().max());
    }

    #[test]
    fn destabilizing_gain_is_rejected() {
        let sys = siso();
        let (sd, _) = filtered_data(&sys, 9);
        let l = Learner::new(&sd, CostWeights::identity(1, 1)).unwrap();
        let k = Gain(DMatrix::from_element(1, sd.n_v, 50.0));
        assert!(l.closed_loop_radius(&k) >= 1.0);
        assert!(matches!(run_pi(&l, &k, 1e-6, 5), Err(Error::AtIteration { iteration: 1, .. })));
    }

    #[test]
    fn vi_reports_non_convergence() {
        let sys = siso();
        let (sd, _) = filtered_data(&sys, 10);
        let l = Learner::new(&sd, CostWeights::identity(1, 1)).unwrap();
        let err = run_vi(&l, &ValueMatrix(DMatrix::identity(sd.n_v, sd.n_v)), 1e-14, 3).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 3, .. }));
    }

    #[test]
    fn deadbeat_square_case_and_origin_poles() {
        let a = m(3, 3, &[1.2, 1.0, 0.0, 0.0, 0.5, 1.0, 0.3, 0.0, -0.8]);
        let b = m(3, 2, &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let k = deadbeat(&a, &b).unwrap();
        let cl = &a + &b * &k;
        assert!(cl.pow(3).abs().max() < 1e-10);
        assert!(deadbeat(&DMatrix::identity(2, 2), &m(2, 1, &[1.0, 0.0])).is_err());
    }

    #[test]
    fn deadbeat_gain_stabilizes_unstable_plant() {
        let sys = mimo_unstable();
        let x0 = DVector::from_vec(vec![0.3, -0.2, 0.4]);
        let u = generate_pe_input(2, 80, 50, 4).unwrap();
        let tr = simulate(&sys, &x0, &u, None).unwrap();
        let sd = project(&build_delayed(&tr, 3).unwrap(), 3, RankTol::Auto).unwrap();
        let l = Learner::new(&sd, CostWeights::identity(2, 2)).unwrap();
        assert!(l.closed_loop_radius(&Gain::zeros(2, sd.n_v)) > 1.0);
        let k0 = deadbeat_initial_gain(&sd).unwrap();
        let rho = l.closed_loop_radius(&k0);
        assert!(rho < 1.0, "ρ = {rho}");
        let pi = run_pi(&l, &k0, 1e-10, 40).unwrap();
        assert!(pi.converged);
    }

    #[test]
    fn convergence_diagnostics() {
        let q = [1e-1, 1e-2, 1e-4, 1e-8];
        assert!((convergence_order(&q, 1e-10, 1e-2).unwrap() - 2.0).abs() < 1e-12);
        let lin: Vec<f64> = (0..30).map(|i| 0.5f64.powi(i)).collect();
        let (mean, cv) = terminal_ratio(&lin, 20).unwrap();
        assert!((mean - 0.5).abs() < 1e-12 && cv < 1e-12);
        assert!(terminal_ratio(&lin[..5], 20).is_none());
    }

    #[test]
    fn record_serialization() {
        let rec = IterationRecord {
            iteration: 1,
            residual: 0.25,
            wall_time_ms: 1.5,
            equation_residual: 0.0,
            theta: DMatrix::identity(2, 2),
            p: None,
            k: DMatrix::zeros(1, 1),
        };
        let mut buf = Vec::new();
        IterationRecord::write_csv(std::slice::from_ref(&rec), &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("iteration,residual,wall_time_ms\n1,2.5"));
        let js = IterationRecord::to_json(&[rec], true);
        assert_eq!(js[0]["theta"]["rows"], 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn pi_iterates_stay_stable_and_monotone(seed in 0u32..10_000) {
            let sys = siso();
            let (sd, _) = filtered_data(&sys, seed);
            let l = Learner::new(&sd, CostWeights::identity(1, 1)).unwrap();
            let pi = run_pi(&l, &Gain::zeros(1, sd.n_v), 1e-9, 30).unwrap();
            prop_assert!(pi_monotonicity_margin(&pi.records) >= -1e-8);
            for r in &pi.records {
                prop_assert!(l.closed_loop_radius(&Gain(r.k.clone())) < 1.0);
            }
        }
    }
}
