//! Substitute states built from input-output data, and their projection onto
//! a full-row-rank parameterization.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti_sim::{hankel, Trajectory};
use crate::solver_core::{pinv, rank, singular_values, RankTol};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamMode {
    Delayed,
    Filtered,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamConfig {
    pub mode: ParamMode,
    /// State dimension (known or estimated).
    pub n: usize,
    /// Window length for delayed mode; defaults to `n`.
    pub window: Option<usize>,
    /// a_0..a_{n−1} of Λ(z) = zⁿ + a_{n−1}z^{n−1} + … + a_0.
    pub lambda_coeffs: Vec<f64>,
    /// Error-generator dynamics; companion form of Λ when absent.
    pub eps_dynamics: Option<DMatrix<f64>>,
    pub eta0_eps: DVector<f64>,
    pub rank_tol: RankTol,
}

impl ParamConfig {
    pub fn delayed(n: usize) -> Self {
        ParamConfig {
            mode: ParamMode::Delayed,
            n,
            window: None,
            lambda_coeffs: vec![0.0; n],
            eps_dynamics: None,
            eta0_eps: DVector::zeros(n),
            rank_tol: RankTol::Auto,
        }
    }

    pub fn filtered(roots: &[f64], eta0_eps: DVector<f64>) -> Self {
        ParamConfig {
            mode: ParamMode::Filtered,
            n: roots.len(),
            window: None,
            lambda_coeffs: poly_from_roots(roots),
            eps_dynamics: None,
            eta0_eps,
            rank_tol: RankTol::Auto,
        }
    }

    pub fn window_len(&self) -> usize {
        self.window.unwrap_or(self.n)
    }

    /// True iff some root of Λ is nonzero.
    pub fn keep_error_block(&self) -> bool {
        self.lambda_coeffs.iter().any(|&a| a != 0.0)
    }

    pub fn a_eps(&self) -> DMatrix<f64> {
        self.eps_dynamics.clone().unwrap_or_else(|| companion(&self.lambda_coeffs))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        match self.mode {
            ParamMode::Delayed => {
                if self.window_len() == 0 {
                    return Err(Error::Config("window length must be positive".into()));
                }
            }
            ParamMode::Filtered => {
                let n = self.n;
                if self.lambda_coeffs.len() != n {
                    return Err(Error::Config(format!("need {n} coefficients of Λ, got {}", self.lambda_coeffs.len())));
                }
                if !self.keep_error_block() {
                    return Ok(());
                }
                if self.eta0_eps.len() != n || self.eta0_eps.iter().all(|&v| v == 0.0) {
                    return Err(Error::Config("eta0_eps must be a nonzero n-vector".into()));
                }
                let ae = self.a_eps();
                if ae.shape() != (n, n) {
                    return Err(Error::Config("eps_dynamics must be n×n".into()));
                }
                let mut k = DMatrix::zeros(n, n);
                let mut v = self.eta0_eps.clone();
                for j in (0..n).rev() {
                    k.set_column(j, &v);
                    v = &ae * v;
                }
                if rank(&k, self.rank_tol) < n {
                    return Err(Error::Config("[A_ε^{n−1}η₀, …, η₀] is singular".into()));
                }
            }
        }
        Ok(())
    }
}

/// Coefficients a_0..a_{n−1} of the monic polynomial with the given roots.
pub fn poly_from_roots(roots: &[f64]) -> Vec<f64> {
    // c[k] multiplies z^k; c[n] = 1
    let mut c = vec![1.0];
    for &r in roots {
        let mut next = vec![0.0; c.len() + 1];
        for (k, &ck) in c.iter().enumerate() {
            next[k + 1] += ck;
            next[k] -= r * ck;
        }
        c = next;
    }
    c.pop();
    c
}

/// Companion matrix with last row [−a_0 … −a_{n−1}].
pub fn companion(coeffs: &[f64]) -> DMatrix<f64> {
    let n = coeffs.len();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        a[(i, i + 1)] = 1.0;
    }
    for (j, &c) in coeffs.iter().enumerate() {
        a[(n - 1, j)] = -c;
    }
    a
}

/// Which rows of a substitute state come from inputs, outputs and the error generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLayout {
    pub input: Range<usize>,
    pub output: Range<usize>,
    pub error: Option<Range<usize>>,
}

impl RowLayout {
    fn kept(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.input.clone().collect();
        if let Some(e) = &self.error {
            v.extend(e.clone());
        }
        v
    }
}

/// Raw substitute-state matrices before projection.
#[derive(Clone, Debug, PartialEq)]
pub struct RawData {
    pub z0: DMatrix<f64>,
    pub z1: DMatrix<f64>,
    pub u0: DMatrix<f64>,
    pub y0: DMatrix<f64>,
    pub layout: RowLayout,
    /// Time index of column 0.
    pub start: i64,
}

impl RawData {
    pub fn n_zeta(&self) -> usize {
        self.z0.nrows()
    }
    pub fn samples(&self) -> usize {
        self.z0.ncols()
    }

    /// [Z0, last column of Z1]: T+1 consecutive substitute states.
    pub fn z_all(&self) -> DMatrix<f64> {
        let t = self.samples();
        let mut z = self.z0.clone().insert_column(t, 0.0);
        z.set_column(t, &self.z1.column(t - 1));
        z
    }

    fn with_z_all(&self, z: &DMatrix<f64>) -> RawData {
        let t = self.samples();
        RawData {
            z0: z.columns(0, t).into_owned(),
            z1: z.columns(1, t).into_owned(),
            ..self.clone()
        }
    }
}

/// ξ_t = [u_{t−N}; …; u_{t−1}; y_{t−N}; …; y_{t−1}], first column at `traj.t0 + N`.
pub fn build_delayed(traj: &Trajectory, window: usize) -> Result<RawData> {
    let (m, p, len) = (traj.m(), traj.p(), traj.len());
    if window == 0 || len <= window {
        return Err(Error::DataWindow(format!("{len} samples cannot supply a window of {window} plus data")));
    }
    let t = len - window;
    let nz = (m + p) * window;
    let xi = |k: usize| -> DVector<f64> {
        // columns k..k+N−1 of the trajectory
        let mut v = DVector::zeros(nz);
        for d in 0..window {
            for i in 0..m {
                v[d * m + i] = traj.u[(i, k + d)];
            }
            for i in 0..p {
                v[m * window + d * p + i] = traj.y[(i, k + d)];
            }
        }
        v
    };
    let mut z0 = DMatrix::zeros(nz, t);
    let mut z1 = DMatrix::zeros(nz, t);
    for k in 0..t {
        z0.set_column(k, &xi(k));
        z1.set_column(k, &xi(k + 1));
    }
    Ok(RawData {
        z0,
        z1,
        u0: traj.u.columns(window, t).into_owned(),
        y0: traj.y.columns(window, t).into_owned(),
        layout: RowLayout { input: 0..m * window, output: m * window..nz, error: None },
        start: traj.t0 + window as i64,
    })
}

/// Runs the user-defined filter bank η_{t+1} = 𝒜_s η_t + ℬ_s [u_t; y_t; 0] from η_0 = [0; η₀^ε].
pub fn build_filtered(traj: &Trajectory, cfg: &ParamConfig) -> Result<RawData> {
    if cfg.mode != ParamMode::Filtered {
        return Err(Error::Config("build_filtered needs a filtered configuration".into()));
    }
    cfg.validate()?;
    let (m, p, len, n) = (traj.m(), traj.p(), traj.len(), cfg.n);
    let keep_err = cfg.keep_error_block();
    let skip = if keep_err { 0 } else { n };
    if len <= skip + 1 {
        return Err(Error::DataWindow(format!("{len} samples, need more than {}", skip + 1)));
    }
    let step = Stepper::new(cfg, m, p);
    let nio = (m + p) * n;
    let nz = step.n_zeta();
    let mut z = DMatrix::zeros(nz, len + 1);
    if keep_err {
        z.view_mut((nio, 0), (n, 1)).copy_from(&cfg.eta0_eps);
    }
    for t in 0..len {
        let next = step.advance(&z.column(t).into_owned(), &traj.u.column(t).into_owned(), &traj.y.column(t).into_owned());
        z.set_column(t + 1, &next);
    }
    let t = len - skip;
    Ok(RawData {
        z0: z.columns(skip, t).into_owned(),
        z1: z.columns(skip + 1, t).into_owned(),
        u0: traj.u.columns(skip, t).into_owned(),
        y0: traj.y.columns(skip, t).into_owned(),
        layout: RowLayout {
            input: 0..m * n,
            output: m * n..nio,
            error: keep_err.then_some(nio..nz),
        },
        start: traj.t0 + skip as i64,
    })
}

/// One-step update ζ_{t+1} = f(ζ_t, u_t, y_t) of the raw substitute state, for running
/// the parameterization online (e.g. closing the loop with a learned gain).
#[derive(Clone, Debug)]
pub struct Stepper {
    mode: ParamMode,
    m: usize,
    p: usize,
    n: usize,
    a_s: DMatrix<f64>,
    a_e: Option<DMatrix<f64>>,
}

impl Stepper {
    pub fn new(cfg: &ParamConfig, m: usize, p: usize) -> Self {
        let n = match cfg.mode {
            ParamMode::Delayed => cfg.window_len(),
            ParamMode::Filtered => cfg.n,
        };
        let filtered = cfg.mode == ParamMode::Filtered;
        Stepper {
            mode: cfg.mode,
            m,
            p,
            n,
            a_s: if filtered { companion(&cfg.lambda_coeffs) } else { DMatrix::zeros(0, 0) },
            a_e: (filtered && cfg.keep_error_block()).then(|| cfg.a_eps()),
        }
    }

    pub fn n_zeta(&self) -> usize {
        (self.m + self.p) * self.n + self.a_e.as_ref().map_or(0, |a| a.nrows())
    }

    pub fn advance(&self, z: &DVector<f64>, u: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let (m, p, n) = (self.m, self.p, self.n);
        let mut next = DVector::zeros(z.len());
        match self.mode {
            ParamMode::Delayed => {
                // drop the oldest sample of each block, append the newest
                let (nu, ny) = (m * n, p * n);
                next.rows_mut(0, nu - m).copy_from(&z.rows(m, nu - m));
                next.rows_mut(nu - m, m).copy_from(u);
                next.rows_mut(nu, ny - p).copy_from(&z.rows(nu + p, ny - p));
                next.rows_mut(nu + ny - p, p).copy_from(y);
            }
            ParamMode::Filtered => {
                for ch in 0..m + p {
                    let mut nb = &self.a_s * z.rows(ch * n, n);
                    nb[n - 1] += if ch < m { u[ch] } else { y[ch - m] };
                    next.rows_mut(ch * n, n).copy_from(&nb);
                }
                if let Some(a_e) = &self.a_e {
                    let nio = (m + p) * n;
                    next.rows_mut(nio, n).copy_from(&(a_e * z.rows(nio, n)));
                }
            }
        }
        next
    }
}

pub fn build(traj: &Trajectory, cfg: &ParamConfig) -> Result<RawData> {
    match cfg.mode {
        ParamMode::Delayed => {
            cfg.validate()?;
            build_delayed(traj, cfg.window_len())
        }
        ParamMode::Filtered => build_filtered(traj, cfg),
    }
}

/// Data matrices consumed by the learning algorithms.
#[derive(Clone, Debug, PartialEq)]
pub struct SubstituteData {
    pub z0: DMatrix<f64>,
    pub z1: DMatrix<f64>,
    pub v0: DMatrix<f64>,
    pub v1: DMatrix<f64>,
    /// Z0 ≈ Pproj·V0.
    pub pproj: DMatrix<f64>,
    pub u0: DMatrix<f64>,
    pub y0: DMatrix<f64>,
    pub psi0: DMatrix<f64>,
    pub n_v: usize,
    pub n_zeta: usize,
    /// Rows of Z retained in V.
    pub rows: Vec<usize>,
    pub start: i64,
}

impl SubstituteData {
    pub fn m(&self) -> usize {
        self.u0.nrows()
    }
    pub fn p(&self) -> usize {
        self.y0.nrows()
    }
    pub fn samples(&self) -> usize {
        self.v0.ncols()
    }

    /// Substitute state at the first data instant.
    pub fn v_initial(&self) -> DVector<f64> {
        self.v0.column(0).into_owned()
    }

    fn assemble(raw: &RawData, rows: Vec<usize>, tol: RankTol) -> Result<Self> {
        let n_v = rows.len();
        let m = raw.u0.nrows();
        let t = raw.samples();
        if t < n_v + m {
            return Err(Error::DataWindow(format!("T = {t} below n_v + m = {}; need T ≥ {}", n_v + m, n_v + m)));
        }
        let v0 = raw.z0.select_rows(rows.iter());
        let v1 = raw.z1.select_rows(rows.iter());
        let psi0 = DMatrix::from_fn(n_v + m, t, |i, j| if i < n_v { v0[(i, j)] } else { raw.u0[(i - n_v, j)] });
        let r = rank(&psi0, tol);
        if r < n_v + m {
            return Err(Error::PeViolation(format!("rank([V0; U0]) = {r} < n_v + m = {}", n_v + m)));
        }
        let pproj = &raw.z0 * pinv(&v0, tol);
        Ok(SubstituteData {
            z0: raw.z0.clone(),
            z1: raw.z1.clone(),
            v0,
            v1,
            pproj,
            u0: raw.u0.clone(),
            y0: raw.y0.clone(),
            psi0,
            n_v,
            n_zeta: raw.n_zeta(),
            rows,
            start: raw.start,
        })
    }

    /// Uses Z directly as V (no projection).
    pub fn unprojected(raw: &RawData, tol: RankTol) -> Result<Self> {
        Self::assemble(raw, (0..raw.n_zeta()).collect(), tol)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SubstituteJson {
            n_v: self.n_v,
            n_zeta: self.n_zeta,
            m: self.m(),
            p: self.p(),
            samples: self.samples(),
            start: self.start,
            rows: self.rows.clone(),
            z0: self.z0.as_slice().to_vec(),
            z1: self.z1.as_slice().to_vec(),
            v0: self.v0.as_slice().to_vec(),
            v1: self.v1.as_slice().to_vec(),
            pproj: self.pproj.as_slice().to_vec(),
            u0: self.u0.as_slice().to_vec(),
            y0: self.y0.as_slice().to_vec(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: SubstituteJson = serde_json::from_str(s)?;
        let t = d.samples;
        let mat = |r: usize, v: &[f64]| -> Result<DMatrix<f64>> {
            if v.len() != r * t {
                return Err(Error::Shape("substitute data payload length".into()));
            }
            Ok(DMatrix::from_column_slice(r, t, v))
        };
        let v0 = mat(d.n_v, &d.v0)?;
        let u0 = mat(d.m, &d.u0)?;
        if d.pproj.len() != d.n_zeta * d.n_v {
            return Err(Error::Shape("pproj payload length".into()));
        }
        let psi0 = DMatrix::from_fn(d.n_v + d.m, t, |i, j| if i < d.n_v { v0[(i, j)] } else { u0[(i - d.n_v, j)] });
        Ok(SubstituteData {
            z0: mat(d.n_zeta, &d.z0)?,
            z1: mat(d.n_zeta, &d.z1)?,
            v1: mat(d.n_v, &d.v1)?,
            pproj: DMatrix::from_column_slice(d.n_zeta, d.n_v, &d.pproj),
            y0: mat(d.p, &d.y0)?,
            v0,
            u0,
            psi0,
            n_v: d.n_v,
            n_zeta: d.n_zeta,
            rows: d.rows,
            start: d.start,
        })
    }

    /// V0 as CSV, one row per substitute-state component.
    pub fn write_matrix_csv<W: std::io::Write>(m: &DMatrix<f64>, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for i in 0..m.nrows() {
            wr.write_record(m.row(i).iter().map(|v| format!("{v:.16e}")))?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SubstituteJson {
    n_v: usize,
    n_zeta: usize,
    m: usize,
    p: usize,
    samples: usize,
    start: i64,
    rows: Vec<usize>,
    z0: Vec<f64>,
    z1: Vec<f64>,
    v0: Vec<f64>,
    v1: Vec<f64>,
    pproj: Vec<f64>,
    u0: Vec<f64>,
    y0: Vec<f64>,
}

/// Orthonormal basis (as columns, T×k) of the row space of `rows`.
fn row_space_basis(rows: &DMatrix<f64>, tol: RankTol) -> DMatrix<f64> {
    let t = rows.ncols();
    if rows.nrows() == 0 {
        return DMatrix::zeros(t, 0);
    }
    let svd = rows.transpose().svd(true, false);
    let u = svd.u.unwrap();
    let smax = svd.singular_values.max();
    let thr = tol.threshold(rows.nrows(), t, smax);
    let keep: Vec<usize> = (0..svd.singular_values.len()).filter(|&i| svd.singular_values[i] > thr).collect();
    u.select_columns(keep.iter())
}

/// Component of `zy` orthogonal to the row space of the kept rows.
fn residual_rows(zy: &DMatrix<f64>, basis: &DMatrix<f64>) -> DMatrix<f64> {
    zy - (zy * basis) * basis.transpose()
}

/// Greedy pivoted Gram–Schmidt over rows: indices of `count` rows with the largest
/// successive residual norms, or None when fewer than `count` exceed `thr`.
fn pivoted_rows(r: &DMatrix<f64>, count: usize, thr: f64) -> Option<Vec<usize>> {
    let mut work = r.clone();
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count {
        let (best, norm) = (0..work.nrows())
            .filter(|i| !chosen.contains(i))
            .map(|i| (i, work.row(i).norm()))
            .max_by(|a, b| a.1.total_cmp(&b.1))?;
        if norm <= thr {
            return None;
        }
        let q = work.row(best) / norm;
        chosen.push(best);
        for i in 0..work.nrows() {
            let c = work.row(i).dot(&q);
            let upd = work.row(i) - q.clone() * c;
            work.set_row(i, &upd);
        }
    }
    chosen.sort_unstable();
    Some(chosen)
}

/// Keeps input (and error) rows and `n` output rows independent of them.
pub fn project(raw: &RawData, n: usize, tol: RankTol) -> Result<SubstituteData> {
    let kept = raw.layout.kept();
    let other = raw.z0.select_rows(kept.iter());
    let zy = raw.z0.rows_range(raw.layout.output.clone()).into_owned();
    if zy.nrows() < n {
        return Err(Error::InsufficientExcitation(format!("only {} output rows for n = {n}", zy.nrows())));
    }
    let need = kept.len() + n + raw.u0.nrows();
    if raw.samples() < need {
        return Err(Error::DataWindow(format!("T = {} below n_v + m = {need}; need T ≥ {need}", raw.samples())));
    }
    let basis = row_space_basis(&other, tol);
    let res = residual_rows(&zy, &basis);
    let smax = singular_values(&raw.z0).get(0).copied().unwrap_or(0.0);
    let thr = tol.threshold(raw.z0.nrows(), raw.z0.ncols(), smax);
    let picked = pivoted_rows(&res, n, thr).ok_or_else(|| {
        Error::InsufficientExcitation(format!("fewer than {n} output rows independent of the input/error rows"))
    })?;
    let mut rows = kept;
    rows.extend(picked.iter().map(|&i| raw.layout.output.start + i));
    rows.sort_unstable();
    SubstituteData::assemble(raw, rows, tol)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoised {
    pub rows: DMatrix<f64>,
    /// σ_n / σ_1 of the input.
    pub ratio: f64,
    pub warning: Option<String>,
}

/// Rank-n SVD truncation.
pub fn svd_denoise(zy: &DMatrix<f64>, n: usize) -> Result<Denoised> {
    let (r, c) = zy.shape();
    if n == 0 || n > r.min(c) {
        return Err(Error::InvalidArgument(format!("cannot truncate a {r}×{c} matrix to rank {n}")));
    }
    let svd = zy.clone().svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = DMatrix::zeros(r, c);
    for &i in order.iter().take(n) {
        out += u.column(i) * vt.row(i) * svd.singular_values[i];
    }
    let s1 = svd.singular_values[order[0]];
    let ratio = if s1 > 0.0 { svd.singular_values[order[n - 1]] / s1 } else { 0.0 };
    let warning = (ratio < 1e-10).then(|| format!("σ_n/σ_1 = {ratio:.2e}: signal content may be lost"));
    Ok(Denoised { rows: out, ratio, warning })
}

/// Truncates the part of the output block that is not explained by the kept rows to rank `n`.
pub fn denoise_output_block(raw: &RawData, n: usize, tol: RankTol) -> Result<(RawData, Denoised)> {
    let z = raw.z_all();
    let other = z.select_rows(raw.layout.kept().iter());
    let zy = z.rows_range(raw.layout.output.clone()).into_owned();
    let basis = row_space_basis(&other, tol);
    let res = residual_rows(&zy, &basis);
    let d = svd_denoise(&res, n)?;
    let new_y = &zy - &res + &d.rows;
    let mut z = z;
    z.rows_range_mut(raw.layout.output.clone()).copy_from(&new_y);
    Ok((raw.with_z_all(&z), d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DimEstimate {
    pub n_hat: usize,
    /// rank([H_N(u); H_N(y)]) − mN for N = 1, 2, ….
    pub curve: Vec<i64>,
}

fn rank_gap(u: &DMatrix<f64>, y: &DMatrix<f64>, depth: usize, tol: RankTol) -> Result<i64> {
    let hu = hankel(u, depth)?;
    let hy = hankel(y, depth)?;
    let stacked = DMatrix::from_fn(hu.nrows() + hy.nrows(), hu.ncols(), |i, j| {
        if i < hu.nrows() { hu[(i, j)] } else { hy[(i - hu.nrows(), j)] }
    });
    Ok(rank(&stacked, tol) as i64 - (u.nrows() * depth) as i64)
}

/// rank([H_N(u); H_N(y)]) − mN for every N in 1..=n_max.
pub fn rank_curve(u: &DMatrix<f64>, y: &DMatrix<f64>, n_max: usize, tol: RankTol) -> Result<Vec<i64>> {
    (1..=n_max).map(|d| rank_gap(u, y, d, tol)).collect()
}

/// Increases N until rank([H_N(u); H_N(y)]) − mN repeats.
pub fn estimate_state_dim(u: &DMatrix<f64>, y: &DMatrix<f64>, n_max: usize, tol: RankTol) -> Result<DimEstimate> {
    let mut curve = Vec::new();
    for depth in 1..=n_max {
        let val = rank_gap(u, y, depth, tol)?;
        if let Some(&prev) = curve.last() {
            if prev == val {
                curve.push(val);
                return Ok(DimEstimate { n_hat: val.max(0) as usize, curve });
            }
        }
        curve.push(val);
    }
    Err(Error::Undetermined { curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti_sim::{generate_pe_input, simulate, LtiSystem};
    use proptest::prelude::*;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn stepper_reproduces_z1() {
        let sys = mo_system();
        let u = generate_pe_input(sys.m(), 40, 20, 4).unwrap();
        let traj = simulate(&sys, &DVector::from_element(3, 0.3), &u, None).unwrap();
        for cfg in [ParamConfig::delayed(3), ParamConfig::filtered(&[0.5, -0.2, 0.1], DVector::from_element(3, 0.4))] {
            let raw = build(&traj, &cfg).unwrap();
            let step = Stepper::new(&cfg, sys.m(), sys.p());
            assert_eq!(step.n_zeta(), raw.n_zeta());
            for k in 0..raw.samples() {
                let next = step.advance(&raw.z0.column(k).into_owned(), &raw.u0.column(k).into_owned(), &raw.y0.column(k).into_owned());
                assert!((next - raw.z1.column(k)).norm() < 1e-12);
            }
        }
    }

    fn mo_system() -> LtiSystem {
        LtiSystem::new(
            m(3, 3, &[0.6, 0.2, 0.0, -0.1, 0.5, 0.3, 0.2, 0.0, 0.7]),
            m(3, 2, &[1.0, 0.0, 0.3, 1.0, 0.0, 0.5]),
            m(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn delayed_scalar_unrolled() {
        let tr = Trajectory::new(m(1, 3, &[1.0, 0.0, 2.0]), m(1, 3, &[0.0, 1.0, 1.0]), 0).unwrap();
        let raw = build_delayed(&tr, 1).unwrap();
        assert_eq!(raw.z0, m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(raw.z1, m(2, 2, &[0.0, 2.0, 1.0, 1.0]));
        assert!(build_delayed(&tr, 3).is_err());
    }

    #[test]
    fn filtered_scalar_recursion() {
        let tr = Trajectory::new(m(1, 2, &[1.0, 0.0]), m(1, 2, &[0.0, 1.0]), 0).unwrap();
        let cfg = ParamConfig::filtered(&[0.5], DVector::from_vec(vec![1.0]));
        let raw = build_filtered(&tr, &cfg).unwrap();
        let z = raw.z_all();
        assert_eq!(z.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.5]);
        assert_eq!(z.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
        assert_eq!(z.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn zero_spectrum_filter_reproduces_delayed_window() {
        let sys = mo_system();
        let u = generate_pe_input(2, 40, 10, 1).unwrap();
        let tr = simulate(&sys, &DVector::from_vec(vec![0.1, -0.2, 0.3]), &u, None).unwrap();
        let cfg = ParamConfig::filtered(&[0.0, 0.0, 0.0], DVector::zeros(3));
        let f = build_filtered(&tr, &cfg).unwrap();
        let d = build_delayed(&tr, 3).unwrap();
        assert_eq!(f.start, d.start);
        assert_eq!(f.z0.ncols(), d.z0.ncols());
        // η stacks per-channel windows [s_{t−n}, …, s_{t−1}]; ξ stacks per-time blocks.
        let (mm, p, n) = (2, 2, 3);
        for k in 0..f.z0.ncols() {
            for ch in 0..mm + p {
                for d_ in 0..n {
                    let fi = f.z0[(ch * n + d_, k)];
                    let di = if ch < mm { d.z0[(d_ * mm + ch, k)] } else { d.z0[(mm * n + d_ * p + ch - mm, k)] };
                    assert!((fi - di).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn poly_and_companion() {
        let c = poly_from_roots(&[0.5, -0.25]);
        // (z − 0.5)(z + 0.25) = z² − 0.25 z − 0.125
        assert!((c[0] + 0.125).abs() < 1e-15 && (c[1] + 0.25).abs() < 1e-15);
        let a = companion(&c);
        let mut ev: Vec<f64> = a.complex_eigenvalues().iter().map(|z| z.re).collect();
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] + 0.25).abs() < 1e-12 && (ev[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ParamConfig::filtered(&[0.5, 0.2], DVector::zeros(2));
        assert!(cfg.validate().is_err());
        cfg.eta0_eps = DVector::from_vec(vec![0.0, 1.0]);
        assert!(cfg.validate().is_ok());
        cfg.lambda_coeffs.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn siso_filtered_projection_is_identity() {
        let sys = LtiSystem::new(
            m(2, 2, &[0.7, 0.2, -0.1, 0.5]),
            m(2, 1, &[0.0, 1.0]),
            m(1, 2, &[1.0, 0.0]),
        )
        .unwrap();
        let u = generate_pe_input(1, 40, 20, 2).unwrap();
        let tr = simulate(&sys, &DVector::from_vec(vec![0.2, 0.1]), &u, None).unwrap();
        let cfg = ParamConfig::filtered(&[-0.3, 0.4], DVector::from_vec(vec![0.3, -0.4]));
        let raw = build_filtered(&tr, &cfg).unwrap();
        let sd = project(&raw, 2, RankTol::Auto).unwrap();
        assert_eq!(sd.rows, (0..6).collect::<Vec<_>>());
        assert_eq!(sd.v0, raw.z0);
    }

    #[test]
    fn mo_projection_restores_full_row_rank() {
        let sys = mo_system();
        let u = generate_pe_input(2, 80, 50, 6).unwrap();
        let tr = simulate(&sys, &DVector::from_vec(vec![0.4, -0.1, 0.2]), &u, None).unwrap();
        let cfg = ParamConfig::filtered(&[0.3, -0.2, 0.5], DVector::from_vec(vec![0.1, 0.2, -0.3]));
        let raw = build_filtered(&tr, &cfg).unwrap();
        assert_eq!(raw.n_zeta(), 15);
        assert_eq!(rank(&raw.z0, RankTol::Auto), 12);
        let sd = project(&raw, 3, RankTol::Auto).unwrap();
        assert_eq!(sd.n_v, 12);
        assert_eq!(rank(&sd.v0, RankTol::Auto), 12);
        assert_eq!(rank(&sd.psi0, RankTol::Auto), 14);
        // Z0 = Pproj·V0 on noise-free data
        assert!((&sd.pproj * &sd.v0 - &raw.z0).abs().max() < 1e-9);
    }

    #[test]
    fn delayed_mo_rank_accounting() {
        let sys = mo_system();
        let u = generate_pe_input(2, 80, 50, 7).unwrap();
        let tr = simulate(&sys, &DVector::from_vec(vec![0.4, -0.1, 0.2]), &u, None).unwrap();
        let raw = build_delayed(&tr, 3).unwrap();
        assert_eq!(raw.n_zeta(), 12);
        assert_eq!(rank(&raw.z0, RankTol::Auto), 9);
        let sd = project(&raw, 3, RankTol::Auto).unwrap();
        assert_eq!(sd.n_v, 9);
        assert!(SubstituteData::unprojected(&raw, RankTol::Auto).is_err());
    }

    #[test]
    fn short_record_names_minimum_t() {
        let sys = mo_system();
        let u = generate_pe_input(2, 12, 50, 7).unwrap();
        let tr = simulate(&sys, &DVector::from_vec(vec![0.4, -0.1, 0.2]), &u, None).unwrap();
        let cfg = ParamConfig::filtered(&[0.3, -0.2, 0.5], DVector::from_vec(vec![0.1, 0.2, -0.3]));
        let raw = build_filtered(&tr, &cfg).unwrap();
        let err = project(&raw, 3, RankTol::Auto).unwrap_err();
        assert!(err.to_string().contains("T ≥ 14"), "{err}");
    }

    #[test]
    fn denoise_exact_rank_is_identity() {
        let a = DMatrix::from_fn(5, 2, |i, j| (i + 2 * j) as f64 + 0.5);
        let b = DMatrix::from_fn(2, 30, |i, j| ((i + 1) as f64 * j as f64 * 0.3).sin());
        let zy = &a * &b;
        let d = svd_denoise(&zy, 2).unwrap();
        assert!((&d.rows - &zy).abs().max() < 1e-12);
        assert!(d.warning.is_none());
        assert!(svd_denoise(&zy, 6).is_err());
    }

    #[test]
    fn denoise_noise_free_pipeline_unchanged() {
        let sys = mo_system();
        let u = generate_pe_input(2, 60, 50, 9).unwrap();
        let tr = simulate(&sys, &DVector::from_vec(vec![0.4, -0.1, 0.2]), &u, None).unwrap();
        let cfg = ParamConfig::filtered(&[0.3, -0.2, 0.5], DVector::from_vec(vec![0.1, 0.2, -0.3]));
        let raw = build_filtered(&tr, &cfg).unwrap();
        let (den, _) = denoise_output_block(&raw, 3, RankTol::Auto).unwrap();
        assert!((&den.z0 - &raw.z0).abs().max() < 1e-10);
        assert!((&den.z1 - &raw.z1).abs().max() < 1e-10);
    }

    #[test]
    fn estimate_dim_small_systems() {
        let sys = LtiSystem::new(m(1, 1, &[0.6]), m(1, 1, &[1.0]), m(1, 1, &[1.0])).unwrap();
        let u = generate_pe_input(1, 100, 50, 1).unwrap();
        let tr = simulate(&sys, &DVector::from_vec(vec![0.3]), &u, None).unwrap();
        assert_eq!(estimate_state_dim(&tr.u, &tr.y, 6, RankTol::Auto).unwrap().n_hat, 1);
        let sys = mo_system();
        let u = generate_pe_input(2, 200, 50, 2).unwrap();
        let tr = simulate(&sys, &DVector::from_vec(vec![0.3, 0.1, -0.2]), &u, None).unwrap();
        let est = estimate_state_dim(&tr.u, &tr.y, 6, RankTol::Auto).unwrap();
        assert_eq!(est.n_hat, 3);
        assert!(matches!(
            estimate_state_dim(&tr.u, &tr.y, 1, RankTol::Auto),
            Err(Error::Undetermined { .. })
        ));
    }

    #[test]
    fn substitute_json_round_trip() {
        let sys = mo_system();
        let u = generate_pe_input(2, 40, 50, 3).unwrap();
        let tr = simulate(&sys, &DVector::from_vec(vec![0.4, -0.1, 0.2]), &u, None).unwrap();
        let sd = project(&build_delayed(&tr, 3).unwrap(), 3, RankTol::Auto).unwrap();
        let back = SubstituteData::from_json(&sd.to_json().unwrap()).unwrap();
        assert_eq!(back, sd);
    }

    proptest! {
        #[test]
        fn shift_structure_holds(seed in 0u32..1000, delayed in any::<bool>()) {
            let sys = mo_system();
            let u = generate_pe_input(2, 50, 30, seed).unwrap();
            let tr = simulate(&sys, &DVector::from_vec(vec![0.4, -0.1, 0.2]), &u, None).unwrap();
            let raw = if delayed {
                build_delayed(&tr, 3).unwrap()
            } else {
                build_filtered(&tr, &ParamConfig::filtered(&[0.3, -0.2, 0.5], DVector::from_vec(vec![0.1, 0.2, -0.3]))).unwrap()
            };
            let sd = project(&raw, 3, RankTol::Auto).unwrap();
            for k in 0..sd.samples() - 1 {
                prop_assert_eq!(sd.v1.column(k), sd.v0.column(k + 1));
            }
        }
    }
}
