//! Configuration-driven experiments: named benchmarks, random-plant sweeps,
//! noise studies and dimension estimation, each writing CSV/JSON artifacts.

pub mod benchmarks;
pub mod config;
pub mod runner;

pub use benchmarks::{random_system, Benchmark};
pub use config::{Algorithm, ExperimentConfig, K0Spec, NoiseConfig, PlantSpec, Setup};
pub use runner::{
    cmd_estimate_dim, cmd_noise_table, cmd_run, cmd_sweep, execute, exit_code, prepare, resolve_out_dir, DimReport,
    Execution, ExperimentReport, NoiseRow, Prepared, SweepReport, OUT_DIR_ENV,
};
