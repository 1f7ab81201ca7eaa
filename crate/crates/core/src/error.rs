use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("covariance matrix is not positive definite")]
    CovarianceNotPd,
    #[error("linear system is singular (rank-deficient design with eta = 0)")]
    SingularSystem,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("inverse temperature {beta} must exceed zeta = {zeta}")]
    TemperatureOutOfRange { beta: f64, zeta: f64 },
    #[error("fixed point did not converge after {iterations} iterations (last iterate {last}, defect {defect})")]
    NoConvergence { iterations: usize, last: f64, defect: f64 },
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    #[error("objective is monotone on the search interval; no interior minimum")]
    OptimizerNoBracket,
    #[error("density underflows on the whole grid")]
    EmptySupport,
    #[error("spectrum has mass where the integrand is undefined: {0}")]
    SpectrumDomain(String),
    #[error("integrand is not finite at lambda = {0}")]
    Integrand(f64),
    #[error("degrees of freedom N + 1 - d = {0} must be positive")]
    DegreesOfFreedom(i64),
    #[error("MGF pole: alpha * sigma0^2 = {0} must be below 1")]
    MgfPole(f64),
    #[error("delta = {delta} outside the valid range ({lo}, {hi})")]
    DeltaOutOfRange { delta: f64, lo: f64, hi: f64 },
    #[error("alpha = {alpha} outside the valid range ({lo}, {hi})")]
    AlphaOutOfRange { alpha: f64, lo: f64, hi: f64 },
    #[error("ensemble of {0} spectra is too small (at least 30 required)")]
    EnsembleTooSmall(usize),
    #[error("data error: {0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("check '{name}' is not supported here: {reason}")]
    UnsupportedCheck { name: String, reason: String },
    #[error("trial {index} failed: {source}")]
    Trial { index: u64, source: Box<Error> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad user input (configuration, unsupported checks, I/O on
    /// user paths) as opposed to numerical failures.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::UnsupportedCheck { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Shape(_) => true,
            Error::Trial { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}
