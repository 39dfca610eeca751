use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("lex error at byte {pos}: {msg}")]
    Lex { pos: usize, msg: String },
    #[error("length error: sequence of {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },
    #[error("empty target: every label position is ignored")]
    EmptyTarget,
    #[error("sample rejected: {0}")]
    Rejected(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected}); re-export it with a matching build")]
    Version { found: u32, expected: u32 },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI's one-line error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::Range(_) => "range",
            Error::Data(_) => "data",
            Error::Lex { .. } => "lex",
            Error::Length { .. } => "length",
            Error::EmptyTarget => "empty_target",
            Error::Rejected(_) => "rejected",
            Error::NonFinite(_) => "non_finite",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Schema(_) => "schema",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
