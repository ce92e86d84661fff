use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or lengths that do not line up.
    #[error("size error: {0}")]
    Size(String),

    /// Convolution/pooling geometry that yields a non-integral or empty output.
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("index error: {0}")]
    Index(String),

    /// Backward called without a matching forward.
    #[error("state error: {0}")]
    State(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    /// Unsupported or truncated PPM/PGM payload.
    #[error("image format error in {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    /// Corrupt or truncated checkpoint. `tensor` names the offending tensor when known.
    #[error("checkpoint format error{}: {reason}", tensor.as_ref().map(|t| format!(" in tensor '{t}'")).unwrap_or_default())]
    Format {
        tensor: Option<String>,
        reason: String,
    },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn size(msg: impl Into<String>) -> Self {
        Error::Size(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(tensor: Option<&str>, reason: impl Into<String>) -> Self {
        Error::Format {
            tensor: tensor.map(str::to_owned),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line driver.
    ///
    /// 2 configuration, 3 data, 4 I/O, 5 checkpoint format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::Stratification(_)
            | Error::Label(_)
            | Error::Index(_)
            | Error::Image { .. }
            | Error::DegenerateBatch(_) => 3,
            Error::Io { .. } => 4,
            Error::Format { .. } | Error::Version { .. } => 5,
            // Shape/geometry/state problems reaching the CLI come from
            // inputs that disagree with the model configuration.
            Error::Size(_) | Error::Geometry(_) | Error::State(_) => 2,
        }
    }
}
