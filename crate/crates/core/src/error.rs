use std::path::PathBuf;

use thiserror::Error;

/// Mismatch between an expected and a found stage width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageMismatch {
    pub stage: usize,
    pub expected: usize,
    pub found: usize,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownConfigKey(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("malformed checkpoint {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint format version {found} does not match expected {expected}")]
    Version { expected: u32, found: u32 },

    #[error("encoder stage widths do not match: {}", format_stages(.0))]
    StageWidths(Vec<StageMismatch>),

    #[error("parameter set mismatch; missing: [{}], unexpected: [{}], wrong shape: [{}]",
        .missing.join(", "), .unexpected.join(", "), .wrong_shape.join(", "))]
    Parameters {
        missing: Vec<String>,
        unexpected: Vec<String>,
        wrong_shape: Vec<String>,
    },

    #[error("encoder hash mismatch: checkpoint has {expected}, encoder has {found}")]
    EncoderHash { expected: String, found: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("duplicate sample stem `{stem}` in {dir}")]
    DuplicateStem { stem: String, dir: PathBuf },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
}

fn format_stages(stages: &[StageMismatch]) -> String {
    stages
        .iter()
        .map(|s| {
            format!(
                "stage {} expected {} found {}",
                s.stage, s.expected, s.found
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
