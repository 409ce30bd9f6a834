use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is singular to working precision (pivot {pivot})")]
    Singular { pivot: usize },

    #[error("eigensolver did not converge, best residual {residual:.3e}")]
    EigenNonConvergence { residual: f64 },

    #[error(
        "Newton iteration did not converge: residual {residual:.3e} after {iterations} iterations (damping history {damping:?})"
    )]
    NewtonNonConvergence {
        residual: f64,
        iterations: usize,
        damping: Vec<f64>,
    },

    #[error("phase condition is degenerate: {0}")]
    PhaseDegenerate(String),

    #[error("weight is not admissible: {0}")]
    InadmissibleWeight(String),

    #[error("product structure violated: max violation {violation:.3e}")]
    ProductStructure { violation: f64 },

    #[error("kernel is not one-dimensional: {0}")]
    KernelDimension(String),

    #[error("solution blew up at t = {time}: |y|_0 = {norm:.3e} exceeds bound {bound:.3e}")]
    BlowUp { time: f64, norm: f64, bound: f64 },

    #[error("Lyapunov-Perron map is not contracting (factors {factors:?}); shrink delta0 or delta")]
    NonContraction { factors: Vec<f64> },

    #[error("iterate left the ball: norm {norm:.3e} > delta {delta:.3e}")]
    BallEscape { norm: f64, delta: f64 },

    #[error("no sign change of the matching function on [{lo}, {hi}]; samples {samples:?}")]
    NoSignChange {
        lo: f64,
        hi: f64,
        samples: Vec<(f64, f64)>,
    },

    #[error("continuation failed at the first step: {0}")]
    ContinuationStart(Box<Error>),

    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }
}
