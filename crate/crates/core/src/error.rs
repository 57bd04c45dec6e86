use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("bad magic: expected \"DFBP\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("unsupported dtype code {0}")]
    Dtype(u8),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("score {score} for {id} is outside [1, 5]")]
    ScoreRange { id: String, score: f64 },

    #[error("unknown ablation variant {0:?}")]
    UnknownVariant(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable category, used for CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Degenerate(_) => "degenerate",
            Error::BadMagic(_) => "magic",
            Error::Version(_) => "version",
            Error::Truncated(_) => "truncated",
            Error::Dtype(_) => "dtype",
            Error::Format(_) => "format",
            Error::Parse { .. } => "parse",
            Error::ScoreRange { .. } => "score-range",
            Error::UnknownVariant(_) => "variant",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
