use thiserror::Error;

use crate::expr::{EvalError, ParseError};

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: {source}")]
    Parse {
        context: String,
        #[source]
        source: ParseError,
    },

    #[error("{context}: {source}")]
    Eval {
        context: String,
        #[source]
        source: EvalError,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite {what} at t={t}, x={x:?}, u={u:?}")]
    NonFiniteCoefficient {
        what: String,
        t: f64,
        x: Vec<f64>,
        u: Vec<f64>,
    },

    #[error("f negative ({value}) at t={t}, x={x:?}, u={u:?}")]
    NegativeReward {
        value: f64,
        t: f64,
        x: Vec<f64>,
        u: Vec<f64>,
    },

    #[error("state blew up at step {step} (path {path_index}): {state:?}")]
    NonFiniteState {
        step: usize,
        path_index: u64,
        state: Vec<f64>,
    },

    #[error(
        "CFL condition violated: rate {rate:.6e} at x={x:?}, u={u:?} needs dt <= {max_dt:.6e}, got {dt:.6e}"
    )]
    Cfl {
        x: Vec<f64>,
        u: Vec<f64>,
        rate: f64,
        dt: f64,
        max_dt: f64,
    },

    #[error("unsupported anisotropy: sigma sigma^T has off-diagonal mass {ratio:.3e} (relative) at x={x:?}, u={u:?}")]
    Anisotropic { x: Vec<f64>, u: Vec<f64>, ratio: f64 },

    #[error("path exits before a = {a} (mesh index {index})")]
    ExitsBeforeHorizon { a: f64, index: usize },

    #[error("point (t={t}, x={x:?}) is not covered by any cell")]
    Uncovered { t: f64, x: Vec<f64> },

    #[error("cover would not terminate: {0}")]
    CoverPitch(String),

    #[error("Monte Carlo budget {requested} exceeds cap {cap}")]
    Budget { requested: u64, cap: u64 },

    #[error("grid was solved for spec {grid} but this spec hashes to {spec}")]
    HashMismatch { grid: String, spec: String },

    #[error("unsupported domain: {0}")]
    UnsupportedDomain(String),

    #[error("malformed grid file: {0}")]
    GridFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
