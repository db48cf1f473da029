use thiserror::Error;

/// Errors surfaced by the inversion engine and its numeric primitives.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("degenerate shape")]
    DegenerateShape,

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("dimension mismatch: matrix is {matrix}x{matrix}, latent has {latent} elements")]
    DimensionMismatch { matrix: usize, latent: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("step coefficient phi must be nonzero")]
    ZeroPhi,

    #[error("missing injected noise for a step with rho > 0")]
    MissingNoise,

    #[error("noise correction requires rho > 0")]
    ZeroRho,

    #[error("relaxation rate eta must lie in (0, 1], got {0}")]
    InvalidEta(f64),

    #[error("non-finite latent at step {step}")]
    NonFinite { step: usize },

    #[error("JVP overflow")]
    JvpOverflow,

    #[error("uncovered timestep {t}")]
    UncoveredTimestep { t: usize },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
