use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("derivative order {requested} exceeds declared smoothness {declared}")]
    UnsupportedOrder { requested: usize, declared: usize },
    #[error("non-finite state on path {path} at node {node}")]
    NumericalBlowup { path: usize, node: usize },
    #[error("degenerate covariance on path {path} (det = {det:e})")]
    DegenerateCovariance { path: usize, det: f64 },
    #[error("log-bump undefined at x = {0} (outside support)")]
    LogUndefined(f64),
    #[error("empty support: localizer vanishes on every path")]
    EmptySupport,
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("gate failed: {0}")]
    GateFailed(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
