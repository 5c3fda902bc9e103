use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Divergence,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("container manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },
    #[error("missing view file {path} for valid position ({u}, {v})")]
    MissingView { path: PathBuf, u: usize, v: usize },
    #[error("view ({u}, {v}) is {found_w}x{found_h}, container declares {want_w}x{want_h}")]
    ViewDimensions {
        u: usize,
        v: usize,
        found_w: u32,
        found_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("crop box {0} lies outside the view")]
    CropOutOfBounds(String),
    #[error("disparity {disparity} px/view too large for a {width}px view with max offset {max_offset}")]
    DisparityTooLarge {
        disparity: f64,
        max_offset: usize,
        width: usize,
    },

    #[error("topology {topology} needs an odd-dimensioned grid, got {views_u}x{views_v}")]
    EvenGrid {
        topology: String,
        views_u: usize,
        views_v: usize,
    },
    #[error("topology {0} selects no valid views after masking")]
    EmptySelection(String),
    #[error("unknown topology name {0:?}")]
    UnknownTopology(String),

    #[error("no embedding for ({image_id}, {u}, {v})")]
    MissingEmbedding { image_id: String, u: usize, v: usize },
    #[error("describing view ({u}, {v}): {source}")]
    AtPosition {
        u: usize,
        v: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("sequence step {index}: {source}")]
    AtStep {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("bad {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("class {0} has no training samples")]
    MissingClass(usize),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },
    #[error("non-finite gradient in parameter block {0}")]
    NonFiniteGradient(&'static str),

    #[error("dataset manifest: {0}")]
    Dataset(String),
    #[error("unknown variation tag {0:?}")]
    UnknownTag(String),
    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Divergence { .. } | Error::NonFiniteGradient(_) => ErrorClass::Divergence,
            Error::Config(_) | Error::UnknownTopology(_) | Error::InvalidArgument(_) => {
                ErrorClass::Config
            }
            Error::AtPosition { source, .. } | Error::AtStep { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
