use thiserror::Error;

/// Errors raised anywhere in the model, data and training stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds context window {max}")]
    Length { len: usize, max: usize },

    #[error("data error: {0}")]
    Data(String),

    /// Malformed serialized input. `line` is 1-based when the input is line oriented.
    #[error("format error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Format { line: Option<usize>, msg: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format {
            line: None,
            msg: msg.into(),
        }
    }

    pub fn format_at(line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            line: Some(line),
            msg: msg.into(),
        }
    }

    /// Io error naming the file it concerns.
    pub fn io_at(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io(format!("{}: {e}", path.display()))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
