use std::path::PathBuf;

use thiserror::Error;

use crate::engine::Trajectory;

/// Why a finite chain failed the ergodicity test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErgodicityFailure {
    /// Some state cannot reach (or be reached from) state 0.
    Reducible { unreachable_state: usize },
    /// The chain is irreducible but returns to state 0 only at multiples of `period`.
    Periodic { period: usize },
}

impl std::fmt::Display for ErgodicityFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Reducible { unreachable_state } => {
                write!(
                    f,
                    "reducible (state {unreachable_state} is not in the communicating class of state 0)"
                )
            }
            Self::Periodic { period } => write!(f, "periodic with period {period}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid transition matrix: {0}")]
    InvalidChain(String),

    #[error("chain is not ergodic: {0}")]
    NotErgodic(ErgodicityFailure),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("probability vector is not normalized (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("mixing time exceeds cap {cap} (max TV at cap = {tv:e})")]
    MixingCapExceeded { cap: usize, tv: f64 },

    #[error("degenerate regression design: {0}")]
    DegenerateDesign(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("{which} is not strongly monotone (smallest eigenvalue of symmetric part = {value})")]
    NotMonotone { which: &'static str, value: f64 },

    #[error("unsupported loss `{0}` (supported: squared)")]
    UnsupportedLoss(String),

    #[error("problem does not expose {0}")]
    MissingCapability(&'static str),

    #[error("noise state space is not enumerable; estimate the mean by Monte Carlo instead")]
    NotEnumerable,

    #[error("noise source has no current state; initialize it before stepping")]
    Uninitialized,

    #[error("window of length {tau} ending at k = {k} precedes iteration 0")]
    WindowBeforeStart { k: u64, tau: u64 },

    #[error("K* not found within cap {cap}; last violation at k = {last_violation} (window product {value:e} > threshold {threshold:e})")]
    KstarNotFound {
        cap: u64,
        last_violation: u64,
        value: f64,
        threshold: f64,
    },

    #[error("step-size schedule fails summability: {0}")]
    NotSummable(String),

    #[error("k = {k} is below K* = {kstar}")]
    BelowKstar { k: u64, kstar: u64 },

    #[error("non-finite iterate at k = {k}; trajectory truncated at last finite checkpoint")]
    SimulationAborted { k: u64, partial: Box<Trajectory> },

    #[error("need at least {need} trials, got {got}")]
    InsufficientTrials { got: usize, need: usize },

    #[error("series value at k = {k} is not positive ({value})")]
    NonPositive { k: u64, value: f64 },

    #[error("missing lagged state at checkpoint k = {0}")]
    MissingLaggedState(u64),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("toml parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
