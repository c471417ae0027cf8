use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed WAV file: {0}")]
    MalformedWav(String),

    #[error("unsupported WAV encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("audio contains no samples")]
    EmptyAudio,

    /// The message already carries the cause, so it is not chained again.
    #[error("I/O failure on {path}: {cause}")]
    IoFailure {
        path: PathBuf,
        cause: std::io::Error,
    },

    #[error("sample rate mismatch: got {actual} Hz, required {required} Hz")]
    SampleRateMismatch { actual: u32, required: u32 },

    #[error("audio too short: {len} samples, need at least {needed}")]
    AudioTooShort { len: usize, needed: usize },

    #[error("invalid FFT length {n_fft} for frame length {frame_len}")]
    InvalidFftLength { n_fft: usize, frame_len: usize },

    #[error("dimension mismatch in {context}: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    /// A configuration value violates its invariant. `key` names the offending field.
    #[error("invalid configuration `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },

    #[error("environmental noise level {level_db:.1} dB exceeds the {limit_db} dB tolerance")]
    EnvNoiseTooLoud { level_db: f64, limit_db: f64 },

    #[error("reference transcript is empty")]
    EmptyReference,

    #[error("input is silent; SNR is undefined")]
    SilentInput,

    #[error("transcription provider unavailable after {elapsed_ms} ms: {reason}")]
    ProviderUnavailable { elapsed_ms: u64, reason: String },

    #[error("no stub transcript mapped for clip `{0}`")]
    UnmappedClip(String),

    #[error("report serialization failed: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            cause: source,
        }
    }

    pub(crate) fn config(key: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key,
            reason: reason.into(),
        }
    }

    /// Short stable identifier, used in report rows.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedWav(_) => "MalformedWav",
            Error::UnsupportedEncoding(_) => "UnsupportedEncoding",
            Error::EmptyAudio => "EmptyAudio",
            Error::IoFailure { .. } => "IoFailure",
            Error::SampleRateMismatch { .. } => "SampleRateMismatch",
            Error::AudioTooShort { .. } => "AudioTooShort",
            Error::InvalidFftLength { .. } => "InvalidFftLength",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::InvalidConfig { .. } => "InvalidConfig",
            Error::EnvNoiseTooLoud { .. } => "EnvNoiseTooLoud",
            Error::EmptyReference => "EmptyReference",
            Error::SilentInput => "SilentInput",
            Error::ProviderUnavailable { .. } => "ProviderUnavailable",
            Error::UnmappedClip(_) => "UnmappedClip",
            Error::Serialization(_) => "Serialization",
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
