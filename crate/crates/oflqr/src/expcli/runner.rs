//! Experiment execution: simulate → parameterize → project → learn → evaluate.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::config::{ExperimentConfig, InputKind, K0Spec, NoiseConfig, PlantSpec, Rows, Setup};
use crate::error::{Error, Result};
use crate::lqr_learn::{
    deadbeat_initial_gain, evaluate_learned_cost, pi_monotonicity_margin, run_pi, run_vi, run_vi_fixed, Gain,
    IterationRecord, Learner, RunOutcome, ValueMatrix,
};
use crate::lti_sim::{generate_pe_input_from, simulate_with, Trajectory};
use crate::rng::Stream;
use crate::solver_core::{rank, singular_values, solve_dare, spectral_norm, DareSolution, RankTol, DARE_MAX_ITER, DARE_TOL};
use crate::state_param::{
    build, denoise_output_block, estimate_state_dim, project, rank_curve, Denoised, ParamConfig, RawData, Stepper,
    SubstituteData,
};

/// Environment variable naming the default artifact directory.
pub const OUT_DIR_ENV: &str = "OFLQR_OUT_DIR";

/// `--out` beats the config's `output.dir`, which beats the environment, which beats `./oflqr-out`.
pub fn resolve_out_dir(cli: Option<&Path>, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.output.dir.as_ref()).map(PathBuf::from))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("oflqr-out"))
}

/// 2 for invalid inputs, 3 for numerical failures.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}

/// Data produced before any learning happens.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub setup: Setup,
    /// Plant state at the first trajectory sample.
    pub x0: DVector<f64>,
    pub eta0_eps: DVector<f64>,
    pub param: ParamConfig,
    pub traj: Trajectory,
    /// Substitute states as built (before any denoising).
    pub raw: RawData,
    pub denoised: Option<Denoised>,
    pub data: SubstituteData,
}

impl Prepared {
    /// True plant state at the first data column.
    pub fn x_start(&self) -> DVector<f64> {
        self.traj.state_at(self.data.start).expect("simulated trajectories record the state")
    }

    pub fn learner(&self) -> Result<Learner<'_>> {
        Learner::new(&self.data, self.setup.weights.clone())
    }
}

/// Draws x0, η0ε, the input and (unless seeded separately) the noise from one stream, in that order.
pub fn simulate_experiment(setup: &Setup) -> Result<(Trajectory, DVector<f64>, DVector<f64>)> {
    let sys = &setup.system;
    let (n, m) = (sys.n(), sys.m());
    let mut rng = Stream::new(setup.seed);
    let x0_draw = DVector::from_vec(rng.fill(n, -0.5, 0.5));
    let eta_draw = DVector::from_vec(rng.fill(setup.param.n, -0.5, 0.5));
    let x0 = setup.x0_override.clone().unwrap_or(x0_draw);
    let eta0 = setup.eta0_override.clone().unwrap_or(eta_draw);
    let burn = setup.burn_in();
    let len = setup.samples + burn;
    let u = match setup.input_kind {
        InputKind::Sinusoids => generate_pe_input_from(&mut rng, m, len, setup.num_terms)?,
        InputKind::Uniform => DMatrix::from_vec(m, len, rng.fill(m * len, -1.0, 1.0)),
    };
    let mut traj = match setup.noise {
        Some((ns, true)) => simulate_with(sys, &x0, &u, ns.w_max, ns.e_max, &mut Stream::new(ns.seed))?,
        Some((ns, false)) => simulate_with(sys, &x0, &u, ns.w_max, ns.e_max, &mut rng)?,
        None => simulate_with(sys, &x0, &u, 0.0, 0.0, &mut rng)?,
    };
    traj.t0 = -(burn as i64);
    Ok((traj, x0, eta0))
}

pub fn prepare(setup: &Setup) -> Result<Prepared> {
    let (traj, x0, eta0_eps) = simulate_experiment(setup).map_err(|e| e.in_stage("simulate"))?;
    let param = setup.param_with(eta0_eps.clone());
    let raw = build(&traj, &param).map_err(|e| e.in_stage("parameterize"))?;
    let tol = param.rank_tol;
    let (source, denoised) = if setup.denoise {
        let (d_raw, d) = denoise_output_block(&raw, param.n, tol).map_err(|e| e.in_stage("denoise"))?;
        (d_raw, Some(d))
    } else {
        (raw.clone(), None)
    };
    let data = if setup.project {
        project(&source, param.n, tol)
    } else {
        SubstituteData::unprojected(&source, tol)
    }
    .map_err(|e| e.in_stage("project"))?;
    Ok(Prepared { setup: setup.clone(), x0, eta0_eps, param, traj, raw, denoised, data })
}

/// One learning run and its evaluation.
#[derive(Clone, Debug)]
pub struct AlgorithmRun {
    pub algorithm: &'static str,
    pub outcome: RunOutcome,
    pub k0: Option<Gain>,
    /// v0ᵀ[I; K]ᵀΘ[I; K]v0 at the first data column.
    pub learned_cost: f64,
    /// ρ(V1Ψ0⁺[I; K]) of the final gain.
    pub data_radius: f64,
    pub wall_time_ms: f64,
}

#[derive(Clone, Debug)]
pub struct Execution {
    pub prepared: Prepared,
    pub oracle: std::result::Result<DareSolution, String>,
    pub pi: Option<AlgorithmRun>,
    pub vi: Option<AlgorithmRun>,
    pub prepare_ms: f64,
    pub total_ms: f64,
}

impl Execution {
    pub fn oracle_cost(&self) -> Option<f64> {
        let x = self.prepared.x_start();
        self.oracle.as_ref().ok().map(|s| (x.transpose() * &s.p * &x)[(0, 0)])
    }

    pub fn runs(&self) -> impl Iterator<Item = &AlgorithmRun> {
        self.pi.iter().chain(self.vi.iter())
    }

    /// |learned − oracle| / oracle.
    pub fn relative_gap(&self, run: &AlgorithmRun) -> Option<f64> {
        self.oracle_cost().map(|o| (run.learned_cost - o).abs() / o.abs().max(f64::MIN_POSITIVE))
    }
}

pub fn initial_gain(spec: &K0Spec, explicit: Option<&DMatrix<f64>>, data: &SubstituteData) -> Result<Gain> {
    let (m, n_v) = (data.m(), data.n_v);
    match spec {
        K0Spec::Zero => Ok(Gain::zeros(m, n_v)),
        K0Spec::Deadbeat => deadbeat_initial_gain(data),
        K0Spec::Explicit(_) => {
            let k = explicit.ok_or_else(|| Error::Config("explicit k0 missing".into()))?;
            if k.shape() != (m, n_v) {
                return Err(Error::Config(format!("k0 is {:?}, expected {m}×{n_v} (m × n_v)", k.shape())));
            }
            Ok(Gain(k.clone()))
        }
    }
}

pub fn oracle(setup: &Setup) -> std::result::Result<DareSolution, String> {
    let sys = &setup.system;
    solve_dare(&sys.a, &sys.b, &setup.weights.qx(sys), &setup.weights.r, DARE_TOL, DARE_MAX_ITER).map_err(|e| e.to_string())
}

pub fn execute(setup: &Setup) -> Result<Execution> {
    let clock = Instant::now();
    let prepared = prepare(setup)?;
    let prepare_ms = clock.elapsed().as_secs_f64() * 1e3;
    let learner = prepared.learner().map_err(|e| e.in_stage("learner"))?;
    let v0 = prepared.data.v_initial();
    let finish = |name: &'static str, outcome: RunOutcome, k0: Option<Gain>, started: Instant| AlgorithmRun {
        algorithm: name,
        learned_cost: evaluate_learned_cost(&outcome.k_star, &outcome.theta, &v0),
        data_radius: learner.closed_loop_radius(&outcome.k_star),
        outcome,
        k0,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    };

    let pi = if setup.algorithm.runs_pi() {
        let started = Instant::now();
        let k0 = initial_gain(&setup.k0_spec, setup.k0.as_ref(), &prepared.data).map_err(|e| e.in_stage("k0"))?;
        let out = run_pi(&learner, &k0, setup.eps_pi, setup.max_iter_pi).map_err(|e| e.in_stage("pi"))?;
        if !out.converged {
            let residuals = out.residuals();
            let err = Error::NonConvergence { iterations: setup.max_iter_pi, last: out.final_residual(), residuals };
            return Err(err.in_stage("pi"));
        }
        Some(finish("pi", out, Some(k0), started))
    } else {
        None
    };
    let vi = if setup.algorithm.runs_vi() {
        let started = Instant::now();
        let p0 = ValueMatrix(DMatrix::identity(prepared.data.n_v, prepared.data.n_v) * setup.p0_scale);
        let out = run_vi(&learner, &p0, setup.eps_vi, setup.max_iter_vi).map_err(|e| e.in_stage("vi"))?;
        Some(finish("vi", out, None, started))
    } else {
        None
    };
    drop(learner);
    let oracle = oracle(setup);
    Ok(Execution { prepared, oracle, pi, vi, prepare_ms, total_ms: clock.elapsed().as_secs_f64() * 1e3 })
}

/// Runs the plant in closed loop with u_t = K v_t, v_t read from the online substitute state.
/// Returns the noise-free trajectory and the accumulated stage cost.
pub fn closed_loop(prep: &Prepared, k: &Gain, steps: usize) -> Result<(Trajectory, f64)> {
    let sys = &prep.setup.system;
    let w = &prep.setup.weights;
    let stepper = Stepper::new(&prep.param, sys.m(), sys.p());
    let mut x = prep.x_start();
    let mut z = prep.raw.z0.column(0).into_owned();
    if z.len() != stepper.n_zeta() {
        return Err(Error::Shape("substitute state does not match the parameterization".into()));
    }
    let mut u = DMatrix::zeros(sys.m(), steps);
    let mut y = DMatrix::zeros(sys.p(), steps);
    let mut xs = DMatrix::zeros(sys.n(), steps + 1);
    let mut cost = 0.0;
    xs.set_column(0, &x);
    for t in 0..steps {
        let v = z.select_rows(prep.data.rows.iter());
        let ut = &k.0 * v;
        let yt = &sys.c * &x;
        cost += (yt.transpose() * &w.q * &yt)[(0, 0)] + (ut.transpose() * &w.r * &ut)[(0, 0)];
        z = stepper.advance(&z, &ut, &yt);
        x = &sys.a * &x + &sys.b * &ut;
        u.set_column(t, &ut);
        y.set_column(t, &yt);
        xs.set_column(t + 1, &x);
    }
    let traj = Trajectory { u, y, x: Some(xs), t0: prep.data.start, noise: None };
    Ok((traj, cost))
}

#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics {
    pub samples: usize,
    pub n_zeta: usize,
    pub rank_z0: usize,
    pub n_v: usize,
    pub rank_v0: usize,
    pub sigma_min_v0: f64,
    pub sigma_min_psi0: f64,
    /// Rows of the raw substitute state kept in V.
    pub rows: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denoise_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denoise_warning: Option<String>,
}

impl Diagnostics {
    pub fn of(prep: &Prepared) -> Self {
        let d = &prep.data;
        let tol = prep.param.rank_tol;
        let last_sv = |m: &DMatrix<f64>| singular_values(m).iter().copied().take(m.nrows()).next_back().unwrap_or(0.0);
        Diagnostics {
            samples: d.samples(),
            n_zeta: d.n_zeta,
            rank_z0: rank(&prep.raw.z0, tol),
            n_v: d.n_v,
            rank_v0: rank(&d.v0, tol),
            sigma_min_v0: last_sv(&d.v0),
            sigma_min_psi0: last_sv(&d.psi0),
            rows: d.rows.clone(),
            denoise_ratio: prep.denoised.as_ref().map(|x| x.ratio),
            denoise_warning: prep.denoised.as_ref().and_then(|x| x.warning.clone()),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub cost: f64,
    pub p: Rows,
    pub k: Rows,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AlgorithmReport {
    pub algorithm: String,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k0: Option<Rows>,
    pub gain: Rows,
    pub learned_cost: f64,
    /// oracle − learned.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_difference: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relative_gap: Option<f64>,
    pub data_closed_loop_radius: f64,
    /// Stage cost accumulated over the closed-loop run written to disk.
    pub closed_loop_cost: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monotonicity_margin: Option<f64>,
    pub wall_time_ms: f64,
    pub records: serde_json::Value,
}

#[derive(Clone, Debug, Serialize)]
pub struct Timings {
    pub prepare_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub label: String,
    pub config: ExperimentConfig,
    pub x0: Vec<f64>,
    pub eta0_eps: Vec<f64>,
    pub x_start: Vec<f64>,
    pub diagnostics: Diagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_error: Option<String>,
    pub runs: Vec<AlgorithmReport>,
    pub timings: Timings,
    pub artifacts: Vec<String>,
}

impl ExperimentReport {
    pub fn run(&self, algorithm: &str) -> Option<&AlgorithmReport> {
        self.runs.iter().find(|r| r.algorithm == algorithm)
    }

    pub fn all_converged(&self) -> bool {
        self.runs.iter().all(|r| r.converged)
    }
}

fn create(dir: &Path, name: &str, artifacts: &mut Vec<String>) -> Result<BufWriter<File>> {
    artifacts.push(name.to_string());
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Executes the experiment and writes report.json, the data trajectory, substitute data,
/// per-algorithm residual CSVs and closed-loop trajectories to `out`.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    let setup = cfg.resolve()?;
    let exec = execute(&setup)?;
    fs::create_dir_all(out)?;
    let mut artifacts = Vec::new();
    exec.prepared.traj.write_csv(create(out, "trajectory.csv", &mut artifacts)?)?;
    fs::write(out.join("substitute_data.json"), exec.prepared.data.to_json()?)?;
    artifacts.push("substitute_data.json".into());

    let oracle_cost = exec.oracle_cost();
    let mut runs = Vec::new();
    for run in exec.runs() {
        let name = run.algorithm;
        IterationRecord::write_csv(&run.outcome.records, create(out, &format!("residuals_{name}.csv"), &mut artifacts)?)?;
        let (cl, cl_cost) = closed_loop(&exec.prepared, &run.outcome.k_star, setup.closed_loop_steps)
            .map_err(|e| e.in_stage("closed_loop"))?;
        cl.write_csv(create(out, &format!("closed_loop_{name}.csv"), &mut artifacts)?)?;
        runs.push(AlgorithmReport {
            algorithm: name.to_string(),
            converged: run.outcome.converged,
            iterations: run.outcome.iterations(),
            final_residual: run.outcome.final_residual(),
            k0: run.k0.as_ref().map(|k| (&k.0).into()),
            gain: (&run.outcome.k_star.0).into(),
            learned_cost: run.learned_cost,
            cost_difference: oracle_cost.map(|o| o - run.learned_cost),
            relative_gap: exec.relative_gap(run),
            data_closed_loop_radius: run.data_radius,
            closed_loop_cost: cl_cost,
            monotonicity_margin: (name == "pi").then(|| pi_monotonicity_margin(&run.outcome.records)),
            wall_time_ms: run.wall_time_ms,
            records: IterationRecord::to_json(&run.outcome.records, setup.full_matrices),
        });
    }
    artifacts.push("report.json".into());
    let report = ExperimentReport {
        label: setup.label.clone(),
        config: setup.echo.clone(),
        x0: exec.prepared.x0.iter().copied().collect(),
        eta0_eps: exec.prepared.eta0_eps.iter().copied().collect(),
        x_start: exec.prepared.x_start().iter().copied().collect(),
        diagnostics: Diagnostics::of(&exec.prepared),
        oracle: exec.oracle.as_ref().ok().map(|s| OracleReport {
            cost: oracle_cost.unwrap_or(f64::NAN),
            p: (&s.p).into(),
            k: (&s.k).into(),
            iterations: s.iterations,
            residual: s.residual,
        }),
        oracle_error: exec.oracle.as_ref().err().cloned(),
        runs,
        timings: Timings { prepare_ms: exec.prepare_ms, total_ms: exec.total_ms },
        artifacts,
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct DimReport {
    pub label: String,
    /// Plateau value, when the curve repeats within `n_max`.
    pub n_hat: Option<usize>,
    /// rank([H_N(u); H_N(y)]) − mN for N = 1..=n_max.
    pub curve: Vec<i64>,
    /// Every value from the first repeat onwards equals the plateau.
    pub plateau_holds: bool,
}

/// Rank-vs-N curve over the whole simulated trajectory; writes rank_curve.csv and dim_report.json.
/// An undetermined plateau still writes the curve before returning the error.
pub fn cmd_estimate_dim(cfg: &ExperimentConfig, out: &Path) -> Result<DimReport> {
    let setup = cfg.resolve()?;
    let (traj, _, _) = simulate_experiment(&setup).map_err(|e| e.in_stage("simulate"))?;
    let tol = RankTol::Auto;
    let curve = rank_curve(&traj.u, &traj.y, setup.n_max, tol).map_err(|e| e.in_stage("estimate"))?;
    let estimate = estimate_state_dim(&traj.u, &traj.y, setup.n_max, tol);
    fs::create_dir_all(out)?;
    let mut wr = csv::Writer::from_path(out.join("rank_curve.csv"))?;
    wr.write_record(["N", "rank_minus_mN"])?;
    for (i, v) in curve.iter().enumerate() {
        wr.write_record([(i + 1).to_string(), v.to_string()])?;
    }
    wr.flush()?;
    let n_hat = estimate.as_ref().ok().map(|e| e.n_hat);
    let plateau_holds = match &estimate {
        Ok(e) => curve[e.curve.len() - 2..].iter().all(|&v| v == e.n_hat as i64),
        Err(_) => false,
    };
    let report = DimReport { label: setup.label, n_hat, curve, plateau_holds };
    fs::write(out.join("dim_report.json"), serde_json::to_string_pretty(&report)?)?;
    estimate.map_err(|e| e.in_stage("estimate"))?;
    Ok(report)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SweepRow {
    pub index: usize,
    pub plant_seed: u32,
    pub pi_iterations: Option<usize>,
    pub pi_wall_ms: Option<f64>,
    pub pi_relative_gap: Option<f64>,
    pub vi_iterations: Option<usize>,
    pub vi_wall_ms: Option<f64>,
    pub vi_relative_gap: Option<f64>,
    pub n_v: Option<usize>,
    pub sigma_min_v0: Option<f64>,
    pub sigma_min_psi0: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub count: usize,
    pub failures: usize,
    pub mean_pi_iterations: Option<f64>,
    pub mean_vi_iterations: Option<f64>,
    pub mean_pi_wall_ms: Option<f64>,
    pub mean_vi_wall_ms: Option<f64>,
    pub min_sigma_v0: Option<f64>,
    pub min_sigma_psi0: Option<f64>,
    pub max_relative_gap: Option<f64>,
    pub rows: Vec<SweepRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Config for member `index` of a sweep: plant and input seeds both shift by `index`.
pub fn sweep_member(cfg: &ExperimentConfig, index: usize) -> Result<ExperimentConfig> {
    let PlantSpec::Random { n, m, p, seed } = cfg.plant else {
        return Err(Error::Config("sweep needs a random plant recipe".into()));
    };
    let mut member = cfg.clone();
    let shift = index as u32;
    member.plant = PlantSpec::Random { n, m, p, seed: seed.wrapping_add(shift) };
    member.input.seed = cfg.input.seed.map(|s| s.wrapping_add(shift));
    Ok(member)
}

fn sweep_row(cfg: &ExperimentConfig, index: usize) -> SweepRow {
    let mut row = SweepRow { index, ..Default::default() };
    let result = sweep_member(cfg, index).and_then(|c| {
        if let PlantSpec::Random { seed, .. } = c.plant {
            row.plant_seed = seed;
        }
        c.resolve().and_then(|s| execute(&s))
    });
    match result {
        Ok(exec) => {
            let diag = Diagnostics::of(&exec.prepared);
            row.n_v = Some(diag.n_v);
            row.sigma_min_v0 = Some(diag.sigma_min_v0);
            row.sigma_min_psi0 = Some(diag.sigma_min_psi0);
            if let Some(r) = &exec.pi {
                row.pi_iterations = Some(r.outcome.iterations());
                row.pi_wall_ms = Some(r.wall_time_ms);
                row.pi_relative_gap = exec.relative_gap(r);
            }
            if let Some(r) = &exec.vi {
                row.vi_iterations = Some(r.outcome.iterations());
                row.vi_wall_ms = Some(r.wall_time_ms);
                row.vi_relative_gap = exec.relative_gap(r);
            }
            if let Err(e) = &exec.oracle {
                row.error = Some(format!("oracle: {e}"));
            }
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Runs `count` independent random systems on a worker pool; individual failures are recorded.
pub fn cmd_sweep(cfg: &ExperimentConfig, count: usize, threads: Option<usize>, out: &Path) -> Result<SweepReport> {
    sweep_member(cfg, 0)?.resolve()?;
    if count == 0 {
        return Err(Error::Config("sweep count must be positive".into()));
    }
    let work = || (0..count).into_par_iter().map(|i| sweep_row(cfg, i)).collect::<Vec<_>>();
    let rows = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let ok = || rows.iter().filter(|r| r.error.is_none());
    let report = SweepReport {
        count,
        failures: rows.iter().filter(|r| r.error.is_some()).count(),
        mean_pi_iterations: mean(ok().filter_map(|r| r.pi_iterations.map(|v| v as f64))),
        mean_vi_iterations: mean(ok().filter_map(|r| r.vi_iterations.map(|v| v as f64))),
        mean_pi_wall_ms: mean(ok().filter_map(|r| r.pi_wall_ms)),
        mean_vi_wall_ms: mean(ok().filter_map(|r| r.vi_wall_ms)),
        min_sigma_v0: ok().filter_map(|r| r.sigma_min_v0).reduce(f64::min),
        min_sigma_psi0: ok().filter_map(|r| r.sigma_min_psi0).reduce(f64::min),
        max_relative_gap: ok().flat_map(|r| [r.pi_relative_gap, r.vi_relative_gap]).flatten().reduce(f64::max),
        rows,
    };
    fs::create_dir_all(out)?;
    let mut wr = csv::Writer::from_path(out.join("sweep.csv"))?;
    wr.write_record([
        "index", "plant_seed", "pi_iterations", "pi_wall_ms", "pi_relative_gap", "vi_iterations", "vi_wall_ms",
        "vi_relative_gap", "n_v", "sigma_min_v0", "sigma_min_psi0", "error",
    ])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6e}"));
    let opt_n = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
    for r in &report.rows {
        wr.write_record([
            r.index.to_string(),
            r.plant_seed.to_string(),
            opt_n(r.pi_iterations),
            opt(r.pi_wall_ms),
            opt(r.pi_relative_gap),
            opt_n(r.vi_iterations),
            opt(r.vi_wall_ms),
            opt(r.vi_relative_gap),
            opt_n(r.n_v),
            opt(r.sigma_min_v0),
            opt(r.sigma_min_psi0),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    wr.flush()?;
    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Fixed iteration budgets of the noise study.
pub const NOISE_PI_ITERATIONS: usize = 6;
pub const NOISE_VI_ITERATIONS: usize = 150;

#[derive(Clone, Debug, Serialize)]
pub struct NoiseRow {
    pub w_max: f64,
    /// "raw" (unprojected Z) or "denoised" (SVD-truncated, then projected).
    pub pipeline: String,
    pub algorithm: String,
    /// ‖K^last − K^{last−1}‖ over the final two iterates.
    pub delta_k: Option<f64>,
    /// oracle − learned cost.
    pub delta_xpx: Option<f64>,
    pub error: Option<String>,
}

fn noise_variant(cfg: &ExperimentConfig, w_max: f64, denoised: bool) -> ExperimentConfig {
    let mut c = cfg.clone();
    let seed = cfg.noise.and_then(|n| n.seed);
    c.noise = (w_max > 0.0).then_some(NoiseConfig { w_max, e_max: None, seed });
    c.denoise = denoised && w_max > 0.0;
    c.param.project = Some(denoised);
    c
}

fn last_gain_step(records: &[IterationRecord]) -> Option<f64> {
    match records {
        [.., a, b] => Some(spectral_norm(&(&b.k - &a.k))),
        _ => None,
    }
}

fn noise_cells(cfg: &ExperimentConfig, w_max: f64, denoised: bool) -> Vec<NoiseRow> {
    let pipeline = if denoised { "denoised" } else { "raw" };
    let row = |alg: &str, res: Result<(Option<f64>, f64, Option<f64>)>| {
        let (delta_k, delta_xpx, error) = match res {
            Ok((dk, learned, oracle)) => (dk, oracle.map(|o| o - learned), None),
            Err(e) => (None, None, Some(e.to_string())),
        };
        NoiseRow { w_max, pipeline: pipeline.into(), algorithm: alg.into(), delta_k, delta_xpx, error }
    };
    let prepared = noise_variant(cfg, w_max, denoised).resolve().and_then(|s| prepare(&s));
    let prep = match prepared {
        Ok(p) => p,
        Err(e) => {
            let msg = e.to_string();
            return ["pi", "vi"].iter().map(|a| row(a, Err(Error::Evaluation(msg.clone())))).collect();
        }
    };
    let oracle_cost = oracle(&prep.setup).ok().map(|s| {
        let x = prep.x_start();
        (x.transpose() * &s.p * &x)[(0, 0)]
    });
    let v0 = prep.data.v_initial();
    let eval = |out: RunOutcome| (last_gain_step(&out.records), evaluate_learned_cost(&out.k_star, &out.theta, &v0), oracle_cost);
    let learner = prep.learner();
    let pi = learner.as_ref().map_err(|e| Error::Evaluation(e.to_string())).and_then(|l| {
        let k0 = initial_gain(&prep.setup.k0_spec, prep.setup.k0.as_ref(), &prep.data)?;
        run_pi(l, &k0, 0.0, NOISE_PI_ITERATIONS).map(eval)
    });
    let vi = learner.as_ref().map_err(|e| Error::Evaluation(e.to_string())).and_then(|l| {
        let n_v = prep.data.n_v;
        run_vi_fixed(l, &ValueMatrix(DMatrix::identity(n_v, n_v) * prep.setup.p0_scale), NOISE_VI_ITERATIONS).map(eval)
    });
    vec![row("pi", pi), row("vi", vi)]
}

/// PI (6 iterations) and VI (150 iterations) at each noise level, raw vs denoised; writes noise_table.csv.
/// Per-cell failures become table entries.
pub fn cmd_noise_table(cfg: &ExperimentConfig, w_max_list: &[f64], out: &Path) -> Result<Vec<NoiseRow>> {
    cfg.resolve()?;
    if w_max_list.is_empty() || w_max_list.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Config("noise levels must be finite and non-negative".into()));
    }
    let rows: Vec<NoiseRow> = w_max_list
        .par_iter()
        .flat_map_iter(|&w| [false, true].into_iter().flat_map(move |d| noise_cells(cfg, w, d)))
        .collect();
    fs::create_dir_all(out)?;
    let mut wr = csv::Writer::from_path(out.join("noise_table.csv"))?;
    wr.write_record(["w_max", "pipeline", "algorithm", "delta_k", "delta_xpx", "error"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6e}"));
    for r in &rows {
        wr.write_record([
            format!("{:e}", r.w_max),
            r.pipeline.clone(),
            r.algorithm.clone(),
            opt(r.delta_k),
            opt(r.delta_xpx),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    wr.flush()?;
    Ok(rows)
}
