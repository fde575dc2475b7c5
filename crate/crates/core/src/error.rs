use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An input lies outside the domain of a formula (zero-norm vector, apex point, ...).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("curvature mismatch: {left} vs {right}")]
    CurvatureMismatch { left: f64, right: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The analytic gradient does not exist at this input.
    #[error("gradient singular at pair ({text}, {image}): {formula}")]
    GradientSingular {
        text: usize,
        image: usize,
        formula: &'static str,
    },

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}
