use thiserror::Error;

/// Errors raised by model construction, validation and the exact solvers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid stepsizes: {0}")]
    InvalidStepsize(String),

    #[error("projection radius must be positive, got {0}")]
    InvalidRadius(f64),

    #[error("feature norm {norm} exceeds 1 at {location}")]
    FeatureNorm { location: String, norm: f64 },

    #[error("{which} feature matrix is rank deficient (smallest singular value {smallest:e}, largest {largest:e})")]
    RankDeficient {
        which: &'static str,
        smallest: f64,
        largest: f64,
    },

    #[error("policy-induced chain is reducible: state {unreachable} cannot be reached from state {from}")]
    Reducible { from: usize, unreachable: usize },

    #[error("linear solve failed: {0}")]
    Singular(&'static str),

    #[error("window [{start}, {end}] of the communication schedule is not connected")]
    Disconnected { start: usize, end: usize },

    #[error("weight matrix at t={t} violates assumptions: {reason}")]
    WeightMatrix { t: usize, reason: String },

    #[error("enumeration of {size} (state, joint-action, next-state) triples exceeds the cap {cap}")]
    EnumerationTooLarge { size: usize, cap: usize },

    #[error("exact stationary sampling requires a finite model")]
    ExactSamplingUnsupported,

    #[error("variant {variant} requires shared dimension 0, got {shared_dim}")]
    SharingNotAllowed {
        variant: String,
        shared_dim: usize,
    },
}

pub type Result<T> = std::result::Result<T, CacError>;
