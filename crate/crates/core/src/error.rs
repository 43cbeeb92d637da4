use thiserror::Error;

use crate::oracle::QreSolution;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid game: {0}")]
    InvalidGame(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("joint action space has {count} profiles, above the cap of {cap}")]
    JointActionCap { count: u128, cap: usize },

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:e})")]
    Divergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("QRE iteration at lambda {lambda} stopped after {iterations} iterations with residual {residual:e}")]
    QreNotConverged {
        lambda: f64,
        iterations: usize,
        residual: f64,
        partial: Box<QreSolution>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("step size too large: non-finite logits for agent {agent} at state {state}")]
    StepSize { agent: usize, state: usize },

    #[error("data corruption: {0}")]
    DataCorruption(String),

    #[error("quadrature too coarse: residual {coarse} at n/2 vs {fine} at n")]
    QuadratureTooCoarse { coarse: f64, fine: f64 },

    #[error("solver failed at lambda {lambda}: {source}")]
    AtLambda {
        lambda: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
