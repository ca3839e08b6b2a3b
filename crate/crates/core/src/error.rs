use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("grid {width}x{height} is too small (minimum 8x8)")]
    InvalidGrid { width: usize, height: usize },

    #[error("point ({x}, {y}) lies outside the {width}x{height} grid")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("orientation ground truth must have both phi and theta or neither")]
    PartialGroundTruth,

    #[error("invalid angle: {0}")]
    InvalidAngle(String),

    #[error("direction vector has zero or non-finite length")]
    ZeroVector,

    #[error("invalid shape parameters: {0}")]
    InvalidParams(String),

    #[error("mask has no foreground pixels")]
    EmptyMask,

    #[error("grids do not match: {0}")]
    GridMismatch(String),

    #[error("heat map stack is empty")]
    EmptyStack,

    #[error("ray from the centroid does not cross the contour")]
    NoIntersection,

    #[error("top and tip key points coincide")]
    CoincidentKeypoints,

    #[error("berry does not fit in the frame with the required margin")]
    BerryOutOfFrame,

    #[error("invalid generator input: {0}")]
    InvalidGenerator(String),

    #[error("no orientation ground truth available")]
    NoGroundTruth,

    #[error("{missing} records have no prediction and {unexpected} predictions match no record")]
    IdMismatch { missing: usize, unexpected: usize },

    #[error("duplicate id {0}")]
    DuplicateId(String),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("non-binary pixel value {value} at byte offset {offset}")]
    NonBinaryPixelValue { offset: usize, value: u8 },

    #[error("heat map value {value} at index {index} is outside [0, 1]")]
    OutOfRangeValue { index: usize, value: f64 },

    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
