use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("driver returned a non-finite value {value} at t={t}, y={y}, z={z:?}")]
    NonFiniteDriver { t: f64, y: f64, z: Vec<f64>, value: f64 },

    #[error("unknown generator id `{0}`")]
    UnknownGenerator(String),

    #[error("unknown terminal id `{0}`")]
    UnknownTerminal(String),

    #[error("inf-convolution with constant {lipschitz} diverges to -inf near t={t}, y={y}")]
    InfConvolutionUnbounded { lipschitz: f64, t: f64, y: f64 },

    #[error("conjugate supremum unbounded in z at t={t}, y={y}, q={q:?}")]
    UnboundedConjugate { t: f64, y: f64, q: Vec<f64> },

    #[error("no subgradient found at t={t}, y={y}, z={z:?}: Fenchel residual {residual:e}")]
    SubgradientExtraction { t: f64, y: f64, z: Vec<f64>, residual: f64 },

    #[error("Picard iteration failed at step {step}: residual {residual:e}")]
    PicardDivergence { step: usize, residual: f64 },

    #[error("regression design is rank deficient at step {step}")]
    RankDeficient { step: usize },

    #[error("quadrature underflow: expectation is not a positive finite number")]
    QuadratureUnderflow,

    #[error("control inadmissible on path {path}, step {step}: {reason}")]
    InadmissibleControl { path: usize, step: usize, reason: String },

    #[error("path {path}, step {step}: {source}")]
    AtPoint { path: usize, step: usize, source: Box<Error> },

    #[error("comparison hypotheses not met: {0}")]
    MisconfiguredComparison(String),

    #[error("malformed ensemble file: {0}")]
    MalformedEnsemble(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
