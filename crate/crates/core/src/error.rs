use std::path::PathBuf;

use thiserror::Error;

use crate::optim::RunTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },

    #[error("matrix is rank deficient in {op} (sigma_min = {sigma_min:e})")]
    RankDeficient { op: &'static str, sigma_min: f64 },

    #[error("numerical failure in {op}: {detail}")]
    Numerical { op: &'static str, detail: String },

    #[error("cannot whiten {d_x} features from only {n} samples")]
    InfeasibleWhitening { d_x: usize, n: usize },

    #[error("retraction input left the manifold's retraction domain (sigma_min = {sigma_min:e})")]
    RetractionSingular { sigma_min: f64 },

    #[error("teacher generation failed: {0}")]
    Generation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid labels: {0}")]
    Labels(String),

    #[error("rcg probe failed: {0}")]
    Probe(String),

    #[error("iteration {iter} diverged: {detail}")]
    Divergence {
        iter: usize,
        detail: String,
        partial: Box<RunTrace>,
    },

    #[error("basin calibration failed: {0}")]
    Calibration(String),

    #[error("{path}: {kind}")]
    Idx { path: PathBuf, kind: IdxErrorKind },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("trace format error: {0}")]
    Trace(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdxErrorKind {
    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label value {0} is out of range 0..=9")]
    LabelRange(u8),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &crate::Matrix, right: &crate::Matrix) -> Self {
        Error::Shape {
            op,
            left: left.shape(),
            right: right.shape(),
        }
    }
}
