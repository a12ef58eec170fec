use std::path::PathBuf;

/// Errors raised anywhere in the CSI feedback toolchain.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate normalization statistics: {0}")]
    DegenerateStats(String),

    #[error("degenerate codeword: all-zero feedback symbols cannot be power normalized")]
    DegenerateCodeword,

    #[error("degenerate channel: uplink subcarrier {0} has zero gain")]
    DegenerateChannel(usize),

    #[error("corrupt manifest {path}: {reason}")]
    CorruptManifest { path: PathBuf, reason: String },

    #[error("unsupported format version `{found}` (expected `{expected}`)")]
    Version { found: String, expected: String },

    #[error("missing autoencoder table entry for m = {0}")]
    MissingTableEntry(usize),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("SNR grids differ: {0}")]
    GridMismatch(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
