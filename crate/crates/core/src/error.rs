use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A simulation or solver configuration that cannot be honoured.
    #[error("configuration error: {0}")]
    Config(String),

    /// A state became non-finite or exceeded the divergence bound.
    #[error("solver diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    /// An explicit Euler step pushed a filter component far outside the simplex.
    #[error("step-size error: component {component} reached {value:.3e}")]
    StepSize { component: usize, value: f64 },

    /// The curvature matrix of the quadratic value lost positive definiteness.
    #[error("conditioning error at step {step}: smallest eigenvalue {eigenvalue:.3e}")]
    Conditioning { step: usize, eigenvalue: f64 },

    #[error("no plausible posterior: every grid value is infinite")]
    NoPlausiblePosterior,

    #[error("unsupported chart: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
