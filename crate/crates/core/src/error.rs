use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inverse Cayley map evaluated at a 180 degree rotation.
    #[error("inverse Cayley map is singular (q_w = {qw:e})")]
    CayleySingularity { qw: f64 },

    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),

    #[error("non-finite {what} sample at t = {t}")]
    NonFinite { what: &'static str, t: f64 },

    /// Bias or kinematic-parameter deltas are too large for a first-order
    /// correction; the caller has to re-integrate from the buffered samples.
    #[error("first-order correction out of range ({what} = {norm:.4e} > {limit:.4e}); re-integrate")]
    ReintegrationRequired {
        what: &'static str,
        norm: f64,
        limit: f64,
    },

    #[error("foot target unreachable: {0}")]
    Unreachable(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("keyframe time {t} is not after the last keyframe time {last}")]
    TimeOrdering { t: f64, last: f64 },

    #[error("solver diverged: {0}")]
    Diverged(String),

    #[error("no vision stream: mode `{0}` needs camera records")]
    NoVisionStream(String),

    #[error("dataset schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("{stream} stream is not time-monotone at line {line} (t = {t} after {prev})")]
    NonMonotone {
        stream: &'static str,
        line: usize,
        t: f64,
        prev: f64,
    },

    #[error("dataset is missing the {0} stream")]
    MissingStream(&'static str),

    #[error("malformed dataset at line {line}: {msg}")]
    Malformed { line: usize, msg: String },

    #[error("dataset header rate mismatch for {stream}: header {header} Hz, observed {observed:.3} Hz")]
    RateMismatch {
        stream: &'static str,
        header: f64,
        observed: f64,
    },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
