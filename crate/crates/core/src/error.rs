use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis {axis}: {detail}")]
    Shape {
        op: &'static str,
        axis: String,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("resolution {height}x{width} is not a multiple of {divisor} on both axes")]
    Resolution {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("adapter/model incompatibility: bundle fingerprint {bundle:016x}, model fingerprint {model:016x}")]
    Fingerprint { bundle: u64, model: u64 },

    #[error("degenerate resolution distribution: every bucket equals the standard resolution {0}")]
    DegenerateDistribution(usize),

    #[error("{0}")]
    Format(#[from] FormatError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Container-file diagnostics. Each malformed-file case has its own variant.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("trailing bytes after payload: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: u64, found: u64 },
    #[error("overlapping extents at tensor {0}")]
    OverlappingExtents(String),
    #[error("unknown site-path {0}")]
    UnknownSite(String),
    #[error("missing site-path {0}")]
    MissingSite(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("inconsistent tensor {name}: {detail}")]
    Inconsistent { name: String, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, axis: impl ToString, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            axis: axis.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
