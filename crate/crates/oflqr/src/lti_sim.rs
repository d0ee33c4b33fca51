//! Plant simulation, sum-of-sinusoids excitation, Hankel matrices and PE checks.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::solver_core::{rank, singular_values, RankTol};

#[derive(Clone, Debug, PartialEq)]
pub struct LtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::Shape(format!("A must be square and non-empty, got {:?}", a.shape())));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Shape(format!("B must be {n}×m, got {:?}", b.shape())));
        }
        if c.ncols() != n || c.nrows() == 0 || c.nrows() > n {
            return Err(Error::Shape(format!("C must be p×{n} with p ≤ n, got {:?}", c.shape())));
        }
        if rank(&c, RankTol::Auto) < c.nrows() {
            return Err(Error::InvalidArgument("C must have full row rank".into()));
        }
        Ok(LtiSystem { a, b, c })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// [B, AB, …, A^{n−1}B]
    pub fn controllability(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        let mut out = DMatrix::zeros(n, n * m);
        let mut blk = self.b.clone();
        for k in 0..n {
            out.view_mut((0, k * m), (n, m)).copy_from(&blk);
            blk = &self.a * blk;
        }
        out
    }

    /// [C; CA; …; CA^{n−1}]
    pub fn observability(&self) -> DMatrix<f64> {
        let (n, p) = (self.n(), self.p());
        let mut out = DMatrix::zeros(n * p, n);
        let mut blk = self.c.clone();
        for k in 0..n {
            out.view_mut((k * p, 0), (p, n)).copy_from(&blk);
            blk *= &self.a;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl CostWeights {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if !q.is_square() || !r.is_square() || q.is_empty() || r.is_empty() {
            return Err(Error::Shape("Q and R must be square".into()));
        }
        let tol = 1e-12;
        if (&q - q.transpose()).abs().max() > tol || (&r - r.transpose()).abs().max() > tol {
            return Err(Error::InvalidArgument("Q and R must be symmetric".into()));
        }
        let qmin = q.clone().symmetric_eigenvalues().min();
        let rmin = r.clone().symmetric_eigenvalues().min();
        if qmin < -tol {
            return Err(Error::InvalidArgument("Q must be positive semidefinite".into()));
        }
        if rmin <= 0.0 {
            return Err(Error::InvalidArgument("R must be positive definite".into()));
        }
        Ok(CostWeights { q, r })
    }

    pub fn identity(p: usize, m: usize) -> Self {
        CostWeights { q: DMatrix::identity(p, p), r: DMatrix::identity(m, m) }
    }

    /// Qx = CᵀQC.
    pub fn qx(&self, sys: &LtiSystem) -> DMatrix<f64> {
        sys.c.transpose() * &self.q * &sys.c
    }

    pub fn check_against(&self, sys: &LtiSystem) -> Result<()> {
        if self.q.nrows() != sys.p() || self.r.nrows() != sys.m() {
            return Err(Error::Shape(format!(
                "weights Q {:?}, R {:?} do not match p = {}, m = {}",
                self.q.shape(),
                self.r.shape(),
                sys.p(),
                sys.m()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub w_max: f64,
    pub e_max: f64,
    #[serde(default)]
    pub seed: u32,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_max >= 0.0 && self.e_max >= 0.0) {
            return Err(Error::InvalidArgument("noise bounds must be non-negative".into()));
        }
        Ok(())
    }
}

/// Disturbances actually applied during a noisy simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRecord {
    pub w: DMatrix<f64>,
    pub e: DMatrix<f64>,
}

/// Input/output record; column j holds time `t0 + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// n×(T+1) states when produced by simulation.
    pub x: Option<DMatrix<f64>>,
    pub t0: i64,
    pub noise: Option<NoiseRecord>,
}

impl Trajectory {
    pub fn new(u: DMatrix<f64>, y: DMatrix<f64>, t0: i64) -> Result<Self> {
        if u.ncols() != y.ncols() {
            return Err(Error::Shape(format!("U has {} samples, Y has {}", u.ncols(), y.ncols())));
        }
        Ok(Trajectory { u, y, x: None, t0, noise: None })
    }

    pub fn len(&self) -> usize {
        self.u.ncols()
    }
    pub fn is_empty(&self) -> bool {
        self.u.ncols() == 0
    }
    pub fn m(&self) -> usize {
        self.u.nrows()
    }
    pub fn p(&self) -> usize {
        self.y.nrows()
    }

    /// Column index of time t.
    pub fn col(&self, t: i64) -> Option<usize> {
        let j = t - self.t0;
        (j >= 0 && (j as usize) < self.len()).then_some(j as usize)
    }

    /// State at time t, if recorded.
    pub fn state_at(&self, t: i64) -> Option<DVector<f64>> {
        let x = self.x.as_ref()?;
        let j = t - self.t0;
        (j >= 0 && (j as usize) < x.ncols()).then(|| x.column(j as usize).into_owned())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.m()).map(|i| format!("u_{i}")));
        header.extend((1..=self.p()).map(|i| format!("y_{i}")));
        wr.write_record(&header)?;
        for j in 0..self.len() {
            let mut row = vec![(self.t0 + j as i64).to_string()];
            row.extend(self.u.column(j).iter().map(|v| format!("{v:.16e}")));
            row.extend(self.y.column(j).iter().map(|v| format!("{v:.16e}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let m = header.iter().filter(|h| h.starts_with("u_")).count();
        let p = header.iter().filter(|h| h.starts_with("y_")).count();
        if header.len() != 1 + m + p {
            return Err(Error::Shape("unexpected trajectory CSV header".into()));
        }
        let mut t0 = None;
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| Error::InvalidArgument(format!("bad CSV number: {e}")))?;
            if t0.is_none() {
                t0 = Some(vals[0] as i64);
            }
            cols.push(vals[1..].to_vec());
        }
        let t = cols.len();
        let u = DMatrix::from_fn(m, t, |i, j| cols[j][i]);
        let y = DMatrix::from_fn(p, t, |i, j| cols[j][m + i]);
        Trajectory::new(u, y, t0.unwrap_or(0))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = TrajectoryJson {
            m: self.m(),
            p: self.p(),
            samples: self.len(),
            t0: self.t0,
            u: self.u.as_slice().to_vec(),
            y: self.y.as_slice().to_vec(),
            n: self.x.as_ref().map(|x| x.nrows()),
            x: self.x.as_ref().map(|x| x.as_slice().to_vec()),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: TrajectoryJson = serde_json::from_str(s)?;
        if d.u.len() != d.m * d.samples || d.y.len() != d.p * d.samples {
            return Err(Error::Shape("trajectory JSON payload length".into()));
        }
        let mut tr = Trajectory::new(
            DMatrix::from_column_slice(d.m, d.samples, &d.u),
            DMatrix::from_column_slice(d.p, d.samples, &d.y),
            d.t0,
        )?;
        if let (Some(n), Some(x)) = (d.n, d.x) {
            if x.len() != n * (d.samples + 1) {
                return Err(Error::Shape("trajectory JSON state payload length".into()));
            }
            tr.x = Some(DMatrix::from_column_slice(n, d.samples + 1, &x));
        }
        Ok(tr)
    }
}

/// Column-major JSON container.
#[derive(Serialize, Deserialize)]
struct TrajectoryJson {
    m: usize,
    p: usize,
    samples: usize,
    t0: i64,
    u: Vec<f64>,
    y: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    x: Option<Vec<f64>>,
}

/// Simulates x⁺ = Ax + Bu + w, y = Cx + e starting at t = 0.
pub fn simulate(sys: &LtiSystem, x0: &DVector<f64>, u: &DMatrix<f64>, noise: Option<&NoiseSpec>) -> Result<Trajectory> {
    match noise {
        Some(ns) => {
            ns.validate()?;
            let mut rng = Stream::new(ns.seed);
            simulate_with(sys, x0, u, ns.w_max, ns.e_max, &mut rng)
        }
        None => {
            let mut rng = Stream::new(0);
            simulate_with(sys, x0, u, 0.0, 0.0, &mut rng)
        }
    }
}

/// Same as [`simulate`] but drawing disturbances from a caller-owned stream:
/// per step, n process-noise draws then p measurement-noise draws. A zero bound draws nothing.
pub fn simulate_with(
    sys: &LtiSystem,
    x0: &DVector<f64>,
    u: &DMatrix<f64>,
    w_max: f64,
    e_max: f64,
    rng: &mut Stream,
) -> Result<Trajectory> {
    let (n, m, p) = (sys.n(), sys.m(), sys.p());
    if x0.len() != n || u.nrows() != m {
        return Err(Error::Shape(format!("x0 has {} entries (n = {n}), U has {} rows (m = {m})", x0.len(), u.nrows())));
    }
    let t = u.ncols();
    let mut x = DMatrix::zeros(n, t + 1);
    let mut y = DMatrix::zeros(p, t);
    let noisy = w_max > 0.0 || e_max > 0.0;
    let mut wrec = DMatrix::zeros(n, t);
    let mut erec = DMatrix::zeros(p, t);
    x.set_column(0, x0);
    for k in 0..t {
        if w_max > 0.0 {
            for i in 0..n {
                wrec[(i, k)] = rng.uniform(-w_max, w_max);
            }
        }
        if e_max > 0.0 {
            for i in 0..p {
                erec[(i, k)] = rng.uniform(-e_max, e_max);
            }
        }
        let xk = x.column(k).into_owned();
        y.set_column(k, &(&sys.c * &xk + erec.column(k)));
        let next = &sys.a * &xk + &sys.b * u.column(k) + wrec.column(k);
        x.set_column(k + 1, &next);
    }
    Ok(Trajectory {
        u: u.clone(),
        y,
        x: Some(x),
        t0: 0,
        noise: noisy.then_some(NoiseRecord { w: wrec, e: erec }),
    })
}

/// u_t = Σ cᵢ sin(aᵢ t + bᵢ) per channel, aᵢ, bᵢ ~ U(0, 2π), cᵢ ~ U(0, 1).
pub fn generate_pe_input(m: usize, t: usize, num_terms: usize, seed: u32) -> Result<DMatrix<f64>> {
    generate_pe_input_from(&mut Stream::new(seed), m, t, num_terms)
}

/// Draw order per channel: all a, then all b, then all c.
pub fn generate_pe_input_from(rng: &mut Stream, m: usize, t: usize, num_terms: usize) -> Result<DMatrix<f64>> {
    if m == 0 || t == 0 || num_terms == 0 {
        return Err(Error::InvalidArgument(format!(
            "need m ≥ 1, T ≥ 1, num_terms ≥ 1 (got {m}, {t}, {num_terms})"
        )));
    }
    let mut u = DMatrix::zeros(m, t);
    for ch in 0..m {
        let a: Vec<f64> = (0..num_terms).map(|_| 2.0 * PI * rng.next_f64()).collect();
        let b: Vec<f64> = (0..num_terms).map(|_| 2.0 * PI * rng.next_f64()).collect();
        let c: Vec<f64> = (0..num_terms).map(|_| rng.next_f64()).collect();
        for k in 0..t {
            let tk = k as f64;
            u[(ch, k)] = (0..num_terms).map(|i| c[i] * (a[i] * tk + b[i]).sin()).sum();
        }
    }
    Ok(u)
}

/// Depth-N block Hankel matrix; column j stacks samples j..j+N−1.
pub fn hankel(seq: &DMatrix<f64>, depth: usize) -> Result<DMatrix<f64>> {
    let (q, t) = seq.shape();
    if depth == 0 || depth > t {
        return Err(Error::Shape(format!("Hankel depth {depth} invalid for {t} samples")));
    }
    let cols = t - depth + 1;
    Ok(DMatrix::from_fn(q * depth, cols, |i, j| seq[(i % q, j + i / q)]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeCheck {
    pub is_pe: bool,
    pub min_singular_value: f64,
    pub reason: Option<String>,
}

/// Persistency of excitation of the given order.
pub fn check_pe(seq: &DMatrix<f64>, order: usize) -> PeCheck {
    check_pe_with(seq, order, RankTol::Auto)
}

pub fn check_pe_with(seq: &DMatrix<f64>, order: usize, tol: RankTol) -> PeCheck {
    let (m, t) = seq.shape();
    if order == 0 || m == 0 || t + 1 < (m + 1) * order {
        return PeCheck {
            is_pe: false,
            min_singular_value: 0.0,
            reason: Some(format!("T = {t} < (m+1)N − 1 = {}", ((m + 1) * order).saturating_sub(1))),
        };
    }
    let h = match hankel(seq, order) {
        Ok(h) => h,
        Err(e) => return PeCheck { is_pe: false, min_singular_value: 0.0, reason: Some(e.to_string()) },
    };
    let s = singular_values(&h);
    let smin = s.iter().copied().fold(f64::INFINITY, f64::min);
    let r = rank(&h, tol);
    let is_pe = r == m * order;
    PeCheck {
        is_pe,
        min_singular_value: smin,
        reason: (!is_pe).then(|| format!("rank {r} < {}", m * order)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateData {
    pub x0: DMatrix<f64>,
    pub u0: DMatrix<f64>,
    pub x1: DMatrix<f64>,
    pub y0: DMatrix<f64>,
}

pub fn build_state_data(traj: &Trajectory) -> Result<StateData> {
    let x = traj
        .x
        .as_ref()
        .ok_or_else(|| Error::Unsupported("trajectory carries no state samples".into()))?;
    let t = traj.len();
    Ok(StateData {
        x0: x.columns(0, t).into_owned(),
        u0: traj.u.clone(),
        x1: x.columns(1, t).into_owned(),
        y0: traj.y.clone(),
    })
}
