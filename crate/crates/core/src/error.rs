use thiserror::Error;

/// Errors produced by the segmentation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("point cloud has no semantic/instance labels")]
    MissingLabels,
    #[error("shape mismatch: expected {expected}, got {actual} ({what})")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no points inside cylinder centered at ({x}, {y}) with radius {radius}")]
    EmptyBlock { x: f64, y: f64, radius: f64 },
    #[error("no voxel reaches the tree-probability threshold {threshold}")]
    NoTreeVoxels { threshold: f64 },
    #[error("no instances present")]
    NoInstances,
    #[error("query {query} sits on voxel {voxel} which has no ground-truth instance")]
    UnassociatedQuery { query: usize, voxel: usize },
    #[error("invalid loss component {name} = {value}")]
    InvalidLoss { name: &'static str, value: f64 },
    #[error("mask references unknown block {0}")]
    UnknownBlock(u32),
    #[error("{count} point(s) received no semantic vote (first: {first})")]
    Unvoted { count: usize, first: usize },
    #[error("no ground-truth trees to evaluate against")]
    NoGroundTruth,
    #[error("could not place tree {tree} after {attempts} attempts (min spacing {min_spacing} m)")]
    PlacementFailed {
        tree: usize,
        attempts: usize,
        min_spacing: f64,
    },
    #[error("embedding codebook holds {capacity} codes but {requested} instances were requested")]
    CodebookExhausted { capacity: usize, requested: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Broad class of the failure, used by front ends to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse { .. } | Error::Io(_) | Error::MissingLabels | Error::EmptyInput(_) => {
                ErrorKind::Input
            }
            Error::InvalidGeometry(_) | Error::InvalidLabel(_) | Error::UnknownBlock(_) => {
                ErrorKind::Input
            }
            Error::InvalidConfig(_)
            | Error::PlacementFailed { .. }
            | Error::CodebookExhausted { .. }
            | Error::EmptyBlock { .. }
            | Error::NoTreeVoxels { .. } => ErrorKind::Config,
            _ => ErrorKind::Internal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Input,
    Config,
    Internal,
}
