use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid numeric value: {0}")]
    InvalidNumeric(f64),

    #[error("bit position {0} out of range (expected 0..32)")]
    BitPosition(u32),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid layer index {index}: {reason}")]
    InvalidLayer { index: usize, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported model file version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("truncated header: {0}")]
    TruncatedHeader(String),

    #[error("truncated block: layer {layer} {block} block needs {needed} bytes, {available} available")]
    TruncatedBlock {
        layer: usize,
        block: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("malformed model file: {0}")]
    MalformedModel(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset error: {0}")]
    Data(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error(
        "post-training found no checkpoint within the accuracy budget {delta} \
         (baseline {baseline:.4}, best {best:.4}); try a smaller zeta"
    )]
    NoFeasibleCheckpoint { delta: f64, baseline: f64, best: f64 },

    #[error("wrong training stage: {0}")]
    Stage(String),

    #[error("fault event {event} is out of range: {reason}")]
    EventOutOfRange { event: String, reason: String },

    #[error("malformed fault log line {line}: {reason}")]
    FaultLog { line: usize, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
