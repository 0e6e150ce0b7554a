use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported spin quantum number {0} (expected 1/2 or 1)")]
    UnsupportedSpin(f64),

    #[error("{what} {index} out of range (expected 0..={max})")]
    IndexOutOfRange { what: &'static str, index: usize, max: usize },

    #[error("non-finite value for `{0}`")]
    NonFinite(&'static str),

    #[error("invalid `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("matrix is not Hermitian: |H - H^dagger| = {deviation:.3e} exceeds {tolerance:.3e}")]
    NotHermitian { deviation: f64, tolerance: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("eigenstate tracking failed for state {state}: best overlap {overlap:.3} < 0.5")]
    TrackingFailed { state: usize, overlap: f64 },

    #[error("no transition matches the selector")]
    NoSuchTransition,

    #[error("no transitions supplied for orientation {orientation}, n13c {n13c}")]
    MissingTransitions { orientation: usize, n13c: usize },

    #[error("Raman relation has no root in [0, 1] for corrected line {corrected:.4} cm^-1")]
    NoRamanRoot { corrected: f64 },

    #[error("contrast undefined: S + R = {0} must be positive")]
    ContrastDenominator(f64),

    #[error("only {found} resonance peak(s) detected, need at least 2")]
    TooFewPeaks { found: usize },

    #[error("fit setup: {0}")]
    FitSetup(String),

    #[error("line {line}: {reason}")]
    Csv { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { name: name.into(), reason: reason.into() }
}
