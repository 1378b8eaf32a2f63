use num_complex::Complex64;

/// Crate-wide error type. Numerical routines distinguish bad inputs from
/// conditioning problems so callers can skip poles and keep scanning.
#[derive(Debug, thiserror::Error)]
pub enum HybridError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Bulk dynamic stiffness is numerically singular at `s`; the evaluation
    /// point sits on (or next to) a clamped-interface resonance.
    #[error("near-pole evaluation at s = {s} (bulk condition estimate {cond:.3e})")]
    NearPole { s: Complex64, cond: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HybridError>;
