use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use oflqr::expcli::config::{Algorithm, InputKind, K0Spec, NoiseConfig, PlantSpec};
use oflqr::expcli::{
    cmd_estimate_dim, cmd_noise_table, cmd_run, cmd_sweep, exit_code, resolve_out_dir, Benchmark, ExperimentConfig,
};
use oflqr::{Error, ParamMode, Result};

/// Learn output-feedback LQR gains from simulated input-output data.
#[derive(Parser, Debug)]
#[command(name = "oflqr", version)]
struct Cli {
    /// Artifact directory (default: config output.dir, then $OFLQR_OUT_DIR, then ./oflqr-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the full JSON report to stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rank-vs-window curve and state-dimension estimate.
    EstimateDim {
        #[command(flatten)]
        exp: ExpArgs,
        /// Largest window tried.
        #[arg(long)]
        n_max: Option<usize>,
    },
    /// Simulate, parameterize, learn and evaluate one experiment.
    Run {
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Independent runs over randomly generated plants.
    Sweep {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, default_value_t = 50)]
        count: usize,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Fixed-budget PI/VI at several noise levels, raw vs SVD-denoised data.
    NoiseTable {
        #[command(flatten)]
        exp: ExpArgs,
        /// Comma-separated noise bounds.
        #[arg(long, value_delimiter = ',', default_values_t = [1e-3, 1e-4, 1e-6])]
        w_max_list: Vec<f64>,
    },
    /// Named benchmark plants.
    Benchmarks {
        #[command(subcommand)]
        action: BenchmarksAction,
    },
}

#[derive(Subcommand, Debug)]
enum BenchmarksAction {
    List,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlgArg {
    Pi,
    Vi,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Filtered,
    Delayed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InputArg {
    Sinusoids,
    Uniform,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum K0Arg {
    Zero,
    Deadbeat,
}

/// Flags override the matching fields of `--config`.
#[derive(Args, Debug, Default)]
struct ExpArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named benchmark (see `benchmarks list`).
    #[arg(long, conflicts_with = "random")]
    benchmark: Option<String>,
    /// Random plant recipe n,m,p,seed.
    #[arg(long, value_delimiter = ',', value_name = "N,M,P,SEED")]
    random: Option<Vec<u32>>,
    #[arg(long, value_enum)]
    alg: Option<AlgArg>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    eps_vi: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    max_iter_vi: Option<usize>,
    /// VI initial value P0 = scale·I.
    #[arg(long)]
    p0_scale: Option<f64>,
    #[arg(long, value_enum)]
    k0: Option<K0Arg>,
    /// Data length T.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u32>,
    #[arg(long)]
    num_terms: Option<usize>,
    #[arg(long, value_enum)]
    input: Option<InputArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Observer spectrum, comma-separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    roots: Option<Vec<f64>>,
    /// Process and measurement noise bound.
    #[arg(long)]
    w_max: Option<f64>,
    #[arg(long)]
    denoise: bool,
    /// Skip the row projection and learn on the raw substitute state.
    #[arg(long)]
    no_project: bool,
    /// Store every iterate's matrices in the report.
    #[arg(long)]
    full: bool,
}

impl ExpArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.benchmark, &self.random) {
            (Some(path), _, _) => ExperimentConfig::load(path)?,
            (None, Some(b), _) => ExperimentConfig::benchmark(Benchmark::parse(b)?),
            (None, None, Some(r)) => ExperimentConfig::for_plant(random_plant(r)?),
            (None, None, None) => {
                return Err(Error::Config("give --config, --benchmark or --random".into()));
            }
        };
        if self.config.is_some() {
            if let Some(b) = &self.benchmark {
                cfg.plant = PlantSpec::Benchmark(Benchmark::parse(b)?);
            }
            if let Some(r) = &self.random {
                cfg.plant = random_plant(r)?;
            }
        }
        if let Some(a) = self.alg {
            cfg.algorithm = match a {
                AlgArg::Pi => Algorithm::Pi,
                AlgArg::Vi => Algorithm::Vi,
                AlgArg::Both => Algorithm::Both,
            };
        }
        if let Some(k) = self.k0 {
            cfg.k0 = match k {
                K0Arg::Zero => K0Spec::Zero,
                K0Arg::Deadbeat => K0Spec::Deadbeat,
            };
        }
        if let Some(k) = self.input {
            cfg.input.kind = Some(match k {
                InputArg::Sinusoids => InputKind::Sinusoids,
                InputArg::Uniform => InputKind::Uniform,
            });
        }
        if let Some(m) = self.mode {
            cfg.param.mode = Some(match m {
                ModeArg::Filtered => ParamMode::Filtered,
                ModeArg::Delayed => ParamMode::Delayed,
            });
        }
        if let Some(w) = self.w_max {
            cfg.noise = Some(NoiseConfig { w_max: w, e_max: None, seed: cfg.noise.and_then(|n| n.seed) });
        }
        cfg.eps = self.eps.or(cfg.eps);
        cfg.eps_vi = self.eps_vi.or(cfg.eps_vi);
        cfg.max_iter = self.max_iter.or(cfg.max_iter);
        cfg.max_iter_vi = self.max_iter_vi.or(cfg.max_iter_vi);
        cfg.p0_scale = self.p0_scale.or(cfg.p0_scale);
        cfg.input.samples = self.samples.or(cfg.input.samples);
        cfg.input.seed = self.seed.or(cfg.input.seed);
        cfg.input.num_terms = self.num_terms.or(cfg.input.num_terms);
        if self.roots.is_some() {
            cfg.param.roots = self.roots.clone();
            cfg.param.coeffs = None;
        }
        cfg.denoise |= self.denoise;
        if self.no_project {
            cfg.param.project = Some(false);
        }
        cfg.output.full_matrices |= self.full;
        Ok(cfg)
    }
}

fn random_plant(r: &[u32]) -> Result<PlantSpec> {
    match *r {
        [n, m, p, seed] => Ok(PlantSpec::Random { n: n as usize, m: m as usize, p: p as usize, seed }),
        _ => Err(Error::Config("--random takes n,m,p,seed".into())),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Benchmarks { action: BenchmarksAction::List } => {
            for b in Benchmark::ALL {
                let s = b.system();
                println!("{:<16} n={} m={} p={}  {}", b.name(), s.n(), s.m(), s.p(), b.description());
            }
            Ok(0)
        }
        Command::Run { exp } => {
            let cfg = exp.config()?;
            let out = resolve_out_dir(cli.out.as_deref(), Some(&cfg));
            let report = cmd_run(&cfg, &out)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            } else {
                let d = &report.diagnostics;
                println!("{}: n_zeta={} rank(Z0)={} n_v={} sigma_min(Psi0)={:.3e}", report.label, d.n_zeta, d.rank_z0, d.n_v, d.sigma_min_psi0);
                if let Some(o) = &report.oracle {
                    println!("oracle cost {:.6}", o.cost);
                }
                for r in &report.runs {
                    println!(
                        "{}: {} iterations, residual {:.3e}, learned cost {:.6}, relative gap {}",
                        r.algorithm,
                        r.iterations,
                        r.final_residual,
                        r.learned_cost,
                        fmt_opt(r.relative_gap)
                    );
                }
                println!("artifacts in {}", out.display());
            }
            Ok(0)
        }
        Command::EstimateDim { exp, n_max } => {
            let mut cfg = exp.config()?;
            cfg.n_max = n_max.or(cfg.n_max);
            let out = resolve_out_dir(cli.out.as_deref(), Some(&cfg));
            let report = cmd_estimate_dim(&cfg, &out)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            } else {
                println!("rank curve {:?}", report.curve);
                println!("n_hat = {}", report.n_hat.map_or("-".into(), |n| n.to_string()));
            }
            Ok(0)
        }
        Command::Sweep { exp, count, threads } => {
            let cfg = exp.config()?;
            let out = resolve_out_dir(cli.out.as_deref(), Some(&cfg));
            let report = cmd_sweep(&cfg, *count, *threads, &out)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
            } else {
                println!("{} runs, {} failed", report.count, report.failures);
                println!("mean PI iterations {}", fmt_opt(report.mean_pi_iterations));
                println!("mean VI iterations {}", fmt_opt(report.mean_vi_iterations));
                println!("mean PI wall time {} ms", fmt_opt(report.mean_pi_wall_ms));
                println!("mean VI wall time {} ms", fmt_opt(report.mean_vi_wall_ms));
                println!("min sigma(V0) {}  min sigma(Psi0) {}", fmt_opt(report.min_sigma_v0), fmt_opt(report.min_sigma_psi0));
                println!("max relative cost gap {}", fmt_opt(report.max_relative_gap));
                for r in report.rows.iter().filter(|r| r.error.is_some()) {
                    println!("run {} (seed {}): {}", r.index, r.plant_seed, r.error.as_deref().unwrap_or(""));
                }
            }
            Ok(if report.failures > 0 { 4 } else { 0 })
        }
        Command::NoiseTable { exp, w_max_list } => {
            let cfg = exp.config()?;
            let out = resolve_out_dir(cli.out.as_deref(), Some(&cfg));
            let rows = cmd_noise_table(&cfg, w_max_list, &out)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&rows).map_err(Error::from)?);
            } else {
                println!("{:>10} {:>9} {:>4} {:>12} {:>12}", "w_max", "pipeline", "alg", "delta_K", "delta_xPx");
                for r in &rows {
                    println!(
                        "{:>10.1e} {:>9} {:>4} {:>12} {:>12} {}",
                        r.w_max,
                        r.pipeline,
                        r.algorithm,
                        fmt_opt(r.delta_k),
                        fmt_opt(r.delta_xpx),
                        r.error.as_deref().unwrap_or("")
                    );
                }
            }
            Ok(0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp(args: &[&str]) -> ExpArgs {
        let mut full = vec!["oflqr", "run"];
        full.extend_from_slice(args);
        match Cli::try_parse_from(full).unwrap().command {
            Command::Run { exp } => exp,
            _ => unreachable!(),
        }
    }

    #[test]
    fn random_needs_four_fields() {
        assert!(random_plant(&[3, 1, 1, 7]).is_ok());
        assert!(random_plant(&[3, 1, 1]).is_err());
    }

    #[test]
    fn flags_override_config() {
        let cfg = exp(&["--benchmark", "mo4", "--alg", "pi", "--roots", "-0.5,0.2,0.1,0", "--no-project", "--w-max", "1e-4"])
            .config()
            .unwrap();
        assert_eq!(cfg.algorithm, Algorithm::Pi);
        assert_eq!(cfg.param.roots.as_deref(), Some(&[-0.5, 0.2, 0.1, 0.0][..]));
        assert_eq!(cfg.param.project, Some(false));
        assert_eq!(cfg.noise.unwrap().w_max, 1e-4);
    }

    #[test]
    fn plant_source_is_required() {
        assert!(exp(&[]).config().is_err());
        assert!(Cli::try_parse_from(["oflqr", "run", "--benchmark", "mo4", "--random", "2,1,1,1"]).is_err());
    }
}
