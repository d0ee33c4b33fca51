//! Named benchmark plants and the random-plant recipe.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti_sim::{CostWeights, LtiSystem};
use crate::rng::Stream;
use crate::solver_core::{singular_values, spectral_radius};

/// Observer roots used when a configuration does not give any.
pub const DEFAULT_ROOTS: [f64; 8] = [-0.7, 0.6, 0.8, 0.3, -0.4, 0.5, -0.2, 0.1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Aircraft,
    Mo4,
    Uncontrollable4,
}

impl Benchmark {
    pub const ALL: [Benchmark; 3] = [Benchmark::Aircraft, Benchmark::Mo4, Benchmark::Uncontrollable4];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Aircraft => "aircraft",
            Benchmark::Mo4 => "mo4",
            Benchmark::Uncontrollable4 => "uncontrollable4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown benchmark '{s}'")))
    }

    pub fn description(self) -> &'static str {
        match self {
            Benchmark::Aircraft => "third-order SISO aircraft model, Q = 100, R = 1",
            Benchmark::Mo4 => "controllable 4-state, 2-input, 2-output plant, Q = R = I",
            Benchmark::Uncontrollable4 => "4-state plant with an uncontrollable mode, Q = R = I",
        }
    }

    pub fn system(self) -> LtiSystem {
        let (a, b, c) = match self {
            Benchmark::Aircraft => (
                DMatrix::from_row_slice(3, 3, &[
                    0.906488, 0.0816012, -0.0005, //
                    0.0741349, 0.90121, -0.0007083, //
                    0.0, 0.0, 0.132655,
                ]),
                DMatrix::from_row_slice(3, 1, &[-0.00150808, -0.0096, 0.867345]),
                DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]),
            ),
            Benchmark::Mo4 => (
                DMatrix::from_row_slice(4, 4, &[
                    0.90031, -0.00015, 0.09048, -0.00452, //
                    -0.00015, 0.90031, 0.00452, -0.09048, //
                    -0.09048, -0.00452, 0.90483, -0.09033, //
                    0.00452, 0.09048, -0.09033, 0.90483,
                ]),
                DMatrix::from_row_slice(4, 2, &[
                    0.00468, -0.00015, //
                    0.00015, -0.00468, //
                    0.09516, -0.00467, //
                    -0.00467, 0.09516,
                ]),
                DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]),
            ),
            Benchmark::Uncontrollable4 => (
                DMatrix::from_row_slice(4, 4, &[
                    0.3706, 0.1537, 0.0, 0.0, //
                    0.5123, 0.3739, 0.0, 0.0, //
                    0.0, 0.0, 0.5443, 0.0, //
                    0.0, 0.0, 0.0, 0.7685,
                ]),
                DMatrix::from_row_slice(4, 2, &[
                    0.1174, 0.5487, //
                    0.8643, 0.8189, //
                    0.3159, 0.9594, //
                    0.0, 0.0,
                ]),
                DMatrix::from_row_slice(2, 4, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]),
            ),
        };
        LtiSystem::new(a, b, c).expect("benchmark matrices are consistent")
    }

    pub fn weights(self) -> CostWeights {
        match self {
            Benchmark::Aircraft => CostWeights {
                q: DMatrix::from_element(1, 1, 100.0),
                r: DMatrix::from_element(1, 1, 1.0),
            },
            _ => CostWeights::identity(2, 2),
        }
    }

    pub fn defaults(self) -> BenchmarkDefaults {
        match self {
            Benchmark::Aircraft => BenchmarkDefaults {
                roots: vec![-0.7, 0.6, 0.8],
                seed: 3,
                samples: 100,
                eps_pi: 1e-3,
                eps_vi: 1.0,
                p0_scale: 1e5,
                max_iter_pi: 50,
                max_iter_vi: 300,
            },
            Benchmark::Mo4 | Benchmark::Uncontrollable4 => BenchmarkDefaults {
                roots: vec![0.8994, -0.6, 0.7, 0.0],
                seed: 1,
                samples: 100,
                eps_pi: 1e-3,
                eps_vi: 1e-4,
                p0_scale: 1e3,
                max_iter_pi: 50,
                max_iter_vi: 1000,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkDefaults {
    pub roots: Vec<f64>,
    pub seed: u32,
    pub samples: usize,
    pub eps_pi: f64,
    pub eps_vi: f64,
    pub p0_scale: f64,
    pub max_iter_pi: usize,
    pub max_iter_vi: usize,
}

/// Random plant: A ~ U[−1,1] rescaled to spectral radius ~ U[0.5, 0.95]; B, C ~ U[−1,1].
/// Draws with a poorly conditioned controllability or observability matrix are rejected.
pub fn random_system(n: usize, m: usize, p: usize, seed: u32) -> Result<LtiSystem> {
    if n == 0 || m == 0 || p == 0 || p > n {
        return Err(Error::Config(format!("random plant needs n ≥ p ≥ 1 and m ≥ 1 (got n={n}, m={m}, p={p})")));
    }
    let mut rng = Stream::new(seed);
    for _ in 0..1000 {
        let a = DMatrix::from_vec(n, n, rng.fill(n * n, -1.0, 1.0));
        let radius = rng.uniform(0.5, 0.95);
        let b = DMatrix::from_vec(n, m, rng.fill(n * m, -1.0, 1.0));
        let c = DMatrix::from_vec(p, n, rng.fill(p * n, -1.0, 1.0));
        let rho = spectral_radius(&a);
        if rho < 1e-6 {
            continue;
        }
        let a = a * (radius / rho);
        let Ok(sys) = LtiSystem::new(a, b, c) else { continue };
        if well_conditioned(&sys.controllability(), n) && well_conditioned(&sys.observability(), n) {
            return Ok(sys);
        }
    }
    Err(Error::Config(format!("no acceptable random plant for seed {seed}")))
}

fn well_conditioned(m: &DMatrix<f64>, n: usize) -> bool {
    let s = singular_values(m);
    s.len() >= n && s[n - 1] / s[0] > 1e-3
}

pub fn random_weights(m: usize, p: usize) -> CostWeights {
    CostWeights { q: DMatrix::identity(p, p) * 2.0, r: DMatrix::identity(m, m) }
}

pub fn default_roots(n: usize) -> Result<Vec<f64>> {
    if n > DEFAULT_ROOTS.len() {
        return Err(Error::Config(format!("give observer roots explicitly for n = {n}")));
    }
    Ok(DEFAULT_ROOTS[..n].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver_core::{rank, RankTol};

    #[test]
    fn names_round_trip() {
        for b in Benchmark::ALL {
            assert_eq!(Benchmark::parse(b.name()).unwrap(), b);
        }
        assert!(Benchmark::parse("nope").is_err());
    }

    #[test]
    fn benchmark_structure() {
        let mo4 = Benchmark::Mo4.system();
        assert_eq!((mo4.n(), mo4.m(), mo4.p()), (4, 2, 2));
        assert_eq!(rank(&mo4.controllability(), RankTol::Auto), 4);
        let unc = Benchmark::Uncontrollable4.system();
        assert_eq!(rank(&unc.controllability(), RankTol::Auto), 3);
        assert_eq!(Benchmark::Aircraft.system().n(), 3);
    }

    #[test]
    fn random_plants_are_stable_and_minimal() {
        for seed in 0..20 {
            let sys = random_system(4, 2, 2, seed).unwrap();
            assert!(spectral_radius(&sys.a) < 0.951);
            assert_eq!(rank(&sys.controllability(), RankTol::Auto), 4);
            assert_eq!(rank(&sys.observability(), RankTol::Auto), 4);
        }
        assert_eq!(random_system(3, 1, 1, 5).unwrap(), random_system(3, 1, 1, 5).unwrap());
    }
}
