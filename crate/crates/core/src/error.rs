use thiserror::Error;

/// Errors produced by the segmentation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-positive size: {0}")]
    NonPositiveSize(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("kernel length must be odd, got {0}")]
    EvenKernel(usize),
    #[error("kernel standard deviation must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("kernel of length {kernel} larger than input of length {input}")]
    KernelLargerThanInput { kernel: usize, input: usize },
    #[error("image dims {0}x{1} not divisible by the grid stride")]
    BadDims(usize, usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {0} (loss is not finite)")]
    DivergenceDetected(usize),
    #[error("could not place instance after {0} attempts")]
    PlacementFailure(usize),
    #[error("bad magic bytes in tensor container")]
    BadMagic,
    #[error("tensor container truncated: {0}")]
    TruncatedFile(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("unknown tensor dtype code {0}")]
    UnknownDtype(u8),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
