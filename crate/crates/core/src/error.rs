use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed WAV file: {0}")]
    MalformedWav(String),

    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("unsupported sample rate {0} Hz (only 44100 Hz is accepted)")]
    UnsupportedSampleRate(u32),

    #[error("invalid audio clip: {0}")]
    InvalidClip(String),

    #[error("unknown label {label:?} (vocabulary: {known})")]
    UnknownLabel { label: String, known: String },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("clip library is empty")]
    EmptyLibrary,

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("segment {segment}: no unseen clip sequence after {attempts} attempts (library too small for the requested count)")]
    RetryExhausted { segment: usize, attempts: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for numerical failures, 1 for everything caused by inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::Divergence { .. } => 2,
            _ => 1,
        }
    }
}
