use thiserror::Error;

/// Errors raised by the matching pipeline and its file formats.
#[derive(Debug, Error)]
pub enum ChmError {
    #[error("invalid shape {0:?}: every extent must be >= 1 and rank >= 1")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("rank mismatch: input rank {input}, kernel rank {kernel}")]
    RankMismatch { input: usize, kernel: usize },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("image {width}x{height} too small for a {grid_h}x{grid_w} feature grid")]
    ImageTooSmall { width: usize, height: usize, grid_h: usize, grid_w: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite loss at iteration {0}")]
    Diverged(usize),
    #[error("gradient requested through an unrecorded node {0}")]
    UnrecordedNode(usize),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ChmError> = std::result::Result<T, E>;
