//! Learning optimal output-feedback LQR gains from input-output data.
//!
//! The pipeline is: simulate or load a trajectory ([`lti_sim`]), build a
//! substitute state and project it to full row rank ([`state_param`]), then run
//! policy or value iteration on the resulting data matrices ([`lqr_learn`]).
//! [`solver_core`] holds the dense kernels and the Riccati oracle; [`expcli`]
//! drives configured experiments.

pub mod error;
pub mod expcli;
pub mod lqr_learn;
pub mod lti_sim;
pub mod rng;
pub mod solver_core;
pub mod state_param;

pub use error::{Error, Result};
pub use lqr_learn::{Gain, IterationRecord, Learner, QMatrix, RunOutcome, ValueMatrix};
pub use lti_sim::{CostWeights, LtiSystem, NoiseSpec, Trajectory};
pub use state_param::{ParamConfig, ParamMode, RawData, SubstituteData};
