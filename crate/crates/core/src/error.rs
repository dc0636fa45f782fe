use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// The variants double as the CLI's failure classes; see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable class name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::MissingInput(_) => "missing-input",
            Error::NonFinite(_) => "numeric",
            Error::Sampling(_) => "sampling",
            Error::Contract(_) => "contract",
            Error::Usage(_) => "usage",
            Error::Io(_) => "io",
            Error::Json(_) => "config",
        }
    }

    /// Process exit code: 2 usage, 3 config, 4 data / missing input, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Config(_) | Error::Json(_) => 3,
            Error::Data(_) | Error::MissingInput(_) | Error::Io(_) => 4,
            Error::Shape(_)
            | Error::Domain(_)
            | Error::NonFinite(_)
            | Error::Sampling(_)
            | Error::Contract(_) => 5,
        }
    }
}
