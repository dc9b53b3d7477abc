use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the tracking, mapping and I/O stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestamps out of order: {0}")]
    Ordering(String),

    #[error("IMU gap of {gap:.4} s at t = {at:.6} exceeds {max:.3} s")]
    ImuGap { gap: f64, max: f64, at: f64 },

    #[error("IMU samples do not cover [{start:.6}, {end:.6}]")]
    Coverage { start: f64, end: f64 },

    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },

    #[error("target cloud is empty")]
    EmptyTarget,

    #[error("frame cloud is empty")]
    EmptyFrame,

    #[error("degenerate geometry: only {0} correspondences")]
    DegenerateGeometry(usize),

    #[error("point cloud carries no colors")]
    MissingColor,

    #[error("missing assets: {}", list_paths(.0))]
    MissingAsset(Vec<PathBuf>),

    #[error("invalid synthetic scene spec: {0}")]
    InvalidSpec(String),

    #[error("only {pairs} associated poses, need at least 3")]
    InsufficientOverlap { pairs: usize },

    #[error("{location}: {message}")]
    Parse { location: String, message: String },

    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Attach the index of the frame that was being processed.
    pub fn at_frame(self, index: usize) -> Self {
        Error::Frame {
            index,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping frame annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Frame { source, .. } => source.root(),
            other => other,
        }
    }
}

fn list_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T> = std::result::Result<T, Error>;
