use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
///
/// Variants are grouped by [`ErrorKind`] so that front ends can map them to
/// a stable exit status.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    Dimensions {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("degenerate histogram: all values fall in a single bin")]
    DegenerateHistogram,

    #[error("counts {counts} at or below the background floor {floor} for emissivity {emissivity}")]
    BelowFloor {
        counts: f64,
        floor: f64,
        emissivity: f64,
    },

    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),

    #[error("degenerate point configuration: {0}")]
    Degenerate(String),

    #[error("point ({x}, {y}) maps to the horizon line")]
    Horizon { x: f64, y: f64 },

    #[error("truncated STL: record {record} incomplete at byte offset {offset}")]
    StlTruncated { record: usize, offset: usize },

    #[error("STL parse error at line {line}: {message}")]
    StlParse { line: usize, message: String },

    #[error("{count} voxel(s) of layer {layer} fall outside the {width}x{height} frame, first at voxel ({i}, {j})")]
    OutOfFrame {
        layer: usize,
        count: usize,
        width: usize,
        height: usize,
        i: usize,
        j: usize,
    },

    #[error("laser already active in frame 0 of layer {layer}; no pre-scan frame available")]
    NoPrescan { layer: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data at byte offset {offset}: {message}")]
    Corrupt { offset: usize, message: String },

    #[error("layer {layer} feature {feature_id} not present in store")]
    NotFound { layer: u32, feature_id: u8 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing path: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification of an [`Error`], used for exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Internal => 4,
        }
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::MissingPath(_) => ErrorKind::Config,
            Error::Invariant(_) => ErrorKind::Internal,
            Error::Layer { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }

    pub fn in_layer(self, layer: usize) -> Error {
        match self {
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                layer,
                source: Box::new(e),
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_cover_every_kind() {
        assert_eq!(Error::Config("x".into()).kind().exit_code(), 2);
        assert_eq!(Error::MissingPath("a.stl".into()).kind().exit_code(), 2);
        assert_eq!(Error::DegenerateHistogram.kind().exit_code(), 3);
        assert_eq!(Error::Invariant("x".into()).kind().exit_code(), 4);
        let nested = Error::Invariant("y".into()).in_layer(3);
        assert_eq!(nested.kind(), ErrorKind::Internal);
        assert!(nested.to_string().starts_with("layer 3"));
    }
}
