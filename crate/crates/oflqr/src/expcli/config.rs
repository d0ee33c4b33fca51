//! JSON experiment configuration and its resolution into concrete settings.
//!
//! Every field except `plant` is optional; named benchmarks supply their own
//! defaults. [`ExperimentConfig::resolve`] fills in all gaps and returns the
//! filled document alongside the concrete objects, so a report's config echo
//! reproduces the run when fed back in.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::benchmarks::{default_roots, random_system, random_weights, Benchmark};
use crate::error::{Error, Result};
use crate::lti_sim::{CostWeights, LtiSystem, NoiseSpec};
use crate::solver_core::RankTol;
use crate::state_param::{poly_from_roots, ParamConfig, ParamMode};

/// Row-major matrix as nested JSON arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rows(pub Vec<Vec<f64>>);

impl Rows {
    pub fn to_matrix(&self, what: &str) -> Result<DMatrix<f64>> {
        let r = self.0.len();
        let c = self.0.first().map_or(0, Vec::len);
        if r == 0 || c == 0 || self.0.iter().any(|row| row.len() != c) {
            return Err(Error::Config(format!("{what}: expected a non-empty rectangular array")));
        }
        Ok(DMatrix::from_fn(r, c, |i, j| self.0[i][j]))
    }
}

impl From<&DMatrix<f64>> for Rows {
    fn from(m: &DMatrix<f64>) -> Self {
        Rows(m.row_iter().map(|r| r.iter().copied().collect()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantSpec {
    Benchmark(Benchmark),
    Explicit { a: Rows, b: Rows, c: Rows },
    Random { n: usize, m: usize, p: usize, seed: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsSpec {
    pub q: Rows,
    pub r: Rows,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    /// Sum of sinusoids with random frequencies, phases and amplitudes.
    #[default]
    Sinusoids,
    /// I.i.d. uniform samples on [−1, 1].
    Uniform,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<InputKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_terms: Option<usize>,
    /// Number of data columns T.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<ParamMode>,
    /// Assumed state dimension (defaults to the plant's).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Observer spectrum; alternative to `coeffs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roots: Option<Vec<f64>>,
    /// a_0..a_{n−1} of the monic characteristic polynomial.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coeffs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Initial error-filter state; drawn from the experiment stream when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta0_eps: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub project: Option<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Pi,
    Vi,
    #[default]
    Both,
}

impl Algorithm {
    pub fn runs_pi(self) -> bool {
        matches!(self, Algorithm::Pi | Algorithm::Both)
    }
    pub fn runs_vi(self) -> bool {
        matches!(self, Algorithm::Vi | Algorithm::Both)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum K0Spec {
    #[default]
    Zero,
    Deadbeat,
    Explicit(Rows),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub w_max: f64,
    /// Defaults to `w_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_max: Option<f64>,
    /// Separate noise stream; when absent, noise continues the experiment stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    /// Include Θ, P and K of every iteration in the report.
    #[serde(default)]
    pub full_matrices: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightsSpec>,
    #[serde(default)]
    pub input: InputSpec,
    #[serde(default)]
    pub param: ParamSpec,
    #[serde(default)]
    pub algorithm: Algorithm,
    /// PI stop threshold on ‖K^{i+1} − K^i‖.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// VI stop threshold on ‖P^{i+1} − P^i‖ (defaults to `eps`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_vi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter_vi: Option<usize>,
    /// VI starts from P0 = scale·I.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0_scale: Option<f64>,
    #[serde(default)]
    pub k0: K0Spec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub denoise: bool,
    /// Initial plant state; drawn from the experiment stream when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Largest window tried by `estimate-dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_loop_steps: Option<usize>,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ExperimentConfig {
    pub fn benchmark(b: Benchmark) -> Self {
        Self::for_plant(PlantSpec::Benchmark(b))
    }

    pub fn for_plant(plant: PlantSpec) -> Self {
        ExperimentConfig {
            plant,
            weights: None,
            input: InputSpec::default(),
            param: ParamSpec::default(),
            algorithm: Algorithm::Both,
            eps: None,
            eps_vi: None,
            max_iter: None,
            max_iter_vi: None,
            p0_scale: None,
            k0: K0Spec::Zero,
            noise: None,
            denoise: false,
            x0: None,
            n_max: None,
            closed_loop_steps: None,
            output: OutputSpec::default(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fills defaults and validates; the returned setup owns a fully specified config echo.
    pub fn resolve(&self) -> Result<Setup> {
        let bench = match &self.plant {
            PlantSpec::Benchmark(b) => Some(*b),
            _ => None,
        };
        let defaults = bench.map(Benchmark::defaults);
        let (label, system) = match &self.plant {
            PlantSpec::Benchmark(b) => (b.name().to_string(), b.system()),
            PlantSpec::Explicit { a, b, c } => (
                "explicit".to_string(),
                LtiSystem::new(a.to_matrix("plant.a")?, b.to_matrix("plant.b")?, c.to_matrix("plant.c")?)?,
            ),
            PlantSpec::Random { n, m, p, seed } => (format!("random-{seed}"), random_system(*n, *m, *p, *seed)?),
        };
        let (n, m, p) = (system.n(), system.m(), system.p());
        let weights = match (&self.weights, bench, &self.plant) {
            (Some(w), _, _) => CostWeights::new(w.q.to_matrix("weights.q")?, w.r.to_matrix("weights.r")?)?,
            (None, Some(b), _) => b.weights(),
            (None, None, PlantSpec::Random { .. }) => random_weights(m, p),
            (None, None, _) => CostWeights::identity(p, m),
        };
        weights.check_against(&system)?;

        let input_kind = self.input.kind.unwrap_or_default();
        let num_terms = self.input.num_terms.unwrap_or(100);
        let samples = self.input.samples.or(defaults.as_ref().map(|d| d.samples)).unwrap_or(100);
        let seed = self
            .input
            .seed
            .or(defaults.as_ref().map(|d| d.seed))
            .or(match &self.plant {
                PlantSpec::Random { seed, .. } => Some(*seed),
                _ => None,
            })
            .unwrap_or(1);
        if num_terms == 0 || samples == 0 {
            return Err(Error::Config("input.num_terms and input.samples must be positive".into()));
        }

        let mode = self.param.mode.unwrap_or(ParamMode::Filtered);
        let n_assumed = self.param.n.unwrap_or(n);
        let coeffs = match (&self.param.coeffs, &self.param.roots) {
            (Some(_), Some(_)) => return Err(Error::Config("give param.roots or param.coeffs, not both".into())),
            (Some(c), None) => c.clone(),
            (None, Some(r)) => poly_from_roots(r),
            (None, None) => match (&defaults, self.param.n) {
                (Some(d), None) => poly_from_roots(&d.roots),
                _ => poly_from_roots(&default_roots(n_assumed)?),
            },
        };
        if mode == ParamMode::Filtered && coeffs.len() != n_assumed {
            return Err(Error::Config(format!("observer polynomial has degree {}, expected n = {n_assumed}", coeffs.len())));
        }
        let eta0_eps = self.param.eta0_eps.clone().map(DVector::from_vec);
        if let Some(e) = &eta0_eps {
            if e.len() != n_assumed {
                return Err(Error::Config(format!("param.eta0_eps needs {n_assumed} entries")));
            }
        }
        let project = self.param.project.unwrap_or(true);
        let param = ParamConfig {
            mode,
            n: n_assumed,
            window: self.param.window,
            lambda_coeffs: if mode == ParamMode::Filtered { coeffs.clone() } else { vec![0.0; n_assumed] },
            eps_dynamics: None,
            // placeholder until the stream draw; validated in the runner
            eta0_eps: eta0_eps.clone().unwrap_or_else(|| DVector::from_element(n_assumed, 1.0)),
            rank_tol: RankTol::Auto,
        };
        param.validate()?;

        let eps_pi = self.eps.or(defaults.as_ref().map(|d| d.eps_pi)).unwrap_or(1e-9);
        let eps_vi = self.eps_vi.or(defaults.as_ref().map(|d| d.eps_vi)).or(self.eps).unwrap_or(1e-9);
        let max_iter_pi = self.max_iter.or(defaults.as_ref().map(|d| d.max_iter_pi)).unwrap_or(50);
        let max_iter_vi = self.max_iter_vi.or(defaults.as_ref().map(|d| d.max_iter_vi)).unwrap_or(5000);
        let p0_scale = self.p0_scale.or(defaults.as_ref().map(|d| d.p0_scale)).unwrap_or(0.0);
        if !(eps_pi >= 0.0 && eps_vi >= 0.0 && p0_scale >= 0.0) || max_iter_pi == 0 || max_iter_vi == 0 {
            return Err(Error::Config("eps, p0_scale must be non-negative and max_iter positive".into()));
        }
        let k0 = match &self.k0 {
            K0Spec::Explicit(rows) => {
                let k = rows.to_matrix("k0")?;
                if k.nrows() != m {
                    return Err(Error::Config(format!("k0 must have m = {m} rows")));
                }
                Some(k)
            }
            _ => None,
        };
        let noise = self
            .noise
            .map(|nc| {
                let spec = NoiseSpec { w_max: nc.w_max, e_max: nc.e_max.unwrap_or(nc.w_max), seed: nc.seed.unwrap_or(0) };
                spec.validate().map(|_| (spec, nc.seed.is_some()))
            })
            .transpose()?;
        let x0 = match &self.x0 {
            Some(v) if v.len() != n => return Err(Error::Config(format!("x0 needs n = {n} entries"))),
            Some(v) => Some(DVector::from_vec(v.clone())),
            None => None,
        };
        let n_max = self.n_max.unwrap_or(2 * n + 2);
        let closed_loop_steps = self.closed_loop_steps.unwrap_or(200);

        let echo = ExperimentConfig {
            plant: PlantSpec::Explicit { a: (&system.a).into(), b: (&system.b).into(), c: (&system.c).into() },
            weights: Some(WeightsSpec { q: (&weights.q).into(), r: (&weights.r).into() }),
            input: InputSpec { kind: Some(input_kind), num_terms: Some(num_terms), samples: Some(samples), seed: Some(seed) },
            param: ParamSpec {
                mode: Some(mode),
                n: Some(n_assumed),
                roots: None,
                coeffs: Some(coeffs),
                window: self.param.window,
                eta0_eps: self.param.eta0_eps.clone(),
                project: Some(project),
            },
            algorithm: self.algorithm,
            eps: Some(eps_pi),
            eps_vi: Some(eps_vi),
            max_iter: Some(max_iter_pi),
            max_iter_vi: Some(max_iter_vi),
            p0_scale: Some(p0_scale),
            k0: self.k0.clone(),
            noise: self.noise.map(|nc| NoiseConfig { e_max: Some(nc.e_max.unwrap_or(nc.w_max)), ..nc }),
            denoise: self.denoise,
            x0: self.x0.clone(),
            n_max: Some(n_max),
            closed_loop_steps: Some(closed_loop_steps),
            output: self.output.clone(),
        };

        Ok(Setup {
            label,
            echo,
            system,
            weights,
            input_kind,
            num_terms,
            samples,
            seed,
            param,
            eta0_override: eta0_eps,
            project,
            algorithm: self.algorithm,
            eps_pi,
            eps_vi,
            max_iter_pi,
            max_iter_vi,
            p0_scale,
            k0_spec: self.k0.clone(),
            k0,
            noise,
            denoise: self.denoise,
            x0_override: x0,
            n_max,
            closed_loop_steps,
            full_matrices: self.output.full_matrices,
        })
    }
}

/// Concrete experiment settings.
#[derive(Clone, Debug)]
pub struct Setup {
    pub label: String,
    /// Fully specified config; resolving it again yields the same setup.
    pub echo: ExperimentConfig,
    pub system: LtiSystem,
    pub weights: CostWeights,
    pub input_kind: InputKind,
    pub num_terms: usize,
    pub samples: usize,
    pub seed: u32,
    /// `eta0_eps` is a placeholder until [`Setup::param_with`] supplies the drawn value.
    pub param: ParamConfig,
    pub eta0_override: Option<DVector<f64>>,
    pub project: bool,
    pub algorithm: Algorithm,
    pub eps_pi: f64,
    pub eps_vi: f64,
    pub max_iter_pi: usize,
    pub max_iter_vi: usize,
    pub p0_scale: f64,
    pub k0_spec: K0Spec,
    pub k0: Option<DMatrix<f64>>,
    /// Noise bounds, and whether they use their own stream.
    pub noise: Option<(NoiseSpec, bool)>,
    pub denoise: bool,
    pub x0_override: Option<DVector<f64>>,
    pub n_max: usize,
    pub closed_loop_steps: usize,
    pub full_matrices: bool,
}

impl Setup {
    pub fn param_with(&self, eta0_eps: DVector<f64>) -> ParamConfig {
        ParamConfig { eta0_eps, ..self.param.clone() }
    }

    /// Trajectory samples that precede the first data column.
    pub fn burn_in(&self) -> usize {
        match self.param.mode {
            ParamMode::Delayed => self.param.window_len(),
            ParamMode::Filtered if !self.param.keep_error_block() => self.param.n,
            ParamMode::Filtered => 0,
        }
    }
}
