use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data window error: {0}")]
    DataWindow(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("insufficient excitation: {0}")]
    InsufficientExcitation(String),
    #[error("persistency of excitation violated: {0}")]
    PeViolation(String),
    #[error("unstable: spectral radius {rho:.6} >= 1")]
    Unstable { rho: f64 },
    #[error("ill-conditioned: {0}")]
    Conditioning(String),
    #[error("no convergence after {iterations} iterations (last residual {last:.3e})")]
    NonConvergence { iterations: usize, last: f64, residuals: Vec<f64> },
    #[error("evaluation failure: {0}")]
    Evaluation(String),
    #[error("initialization error: {0}")]
    Initialization(String),
    #[error("state dimension undetermined up to N = {}", .curve.len())]
    Undetermined { curve: Vec<i64> },
    #[error("at iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Unstable { .. }
            | Error::Conditioning(_)
            | Error::NonConvergence { .. }
            | Error::Evaluation(_)
            | Error::Initialization(_)
            | Error::Undetermined { .. }
            | Error::InsufficientExcitation(_)
            | Error::PeViolation(_) => true,
            Error::AtIteration { source, .. } | Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// Tags the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage { stage, source: Box::new(self) }
    }

    pub(crate) fn at(self, iteration: usize) -> Error {
        Error::AtIteration { iteration, source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
