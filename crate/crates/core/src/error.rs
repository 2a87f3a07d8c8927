use std::path::PathBuf;

/// Every failure the pipeline can report, grouped by the category the CLI
/// maps onto an exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 runtime/numerical, 2 usage/config, 3 data/IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::Contract(_) | Error::UndefinedMetric(_) => 1,
            Error::Config(_) | Error::Protocol(_) => 2,
            Error::Input(_)
            | Error::CorruptCheckpoint(_)
            | Error::MissingArtifact(_)
            | Error::Io { .. } => 3,
        }
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn shape_mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}
