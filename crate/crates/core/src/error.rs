use thiserror::Error;

/// Errors produced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension must be even, got {0}")]
    OddDimension(usize),

    #[error("dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),

    #[error("base must be greater than 1, got {0}")]
    InvalidBase(f64),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("position must be finite, got {0}")]
    NonFinitePosition(f64),

    #[error("invalid channel groups: {0}")]
    InvalidChannelGroups(String),

    #[error("map not continuous at region {region}: gap {gap:e}")]
    MapNotContinuous { region: usize, gap: f64 },

    #[error("NTK exponent undefined for d=2")]
    NtkUndefined,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("zero-norm vector in sample {0}")]
    ZeroNormSample(usize),

    #[error("zero row {0} in weight matrix")]
    ZeroRow(usize),

    #[error("byte count mismatch: sidecar shape needs {expected} bytes, file has {actual}")]
    ByteCountMismatch { expected: usize, actual: usize },

    #[error("unknown pair_layout tag {0:?}")]
    UnknownPairLayout(String),

    #[error("unsupported tensor dump: {0}")]
    UnsupportedDump(String),

    #[error("HR region not alignable to LR grid: {0}")]
    NotAlignable(String),

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("extent {extent} on axis {axis} is not divisible by factor {factor}")]
    NotDivisible {
        axis: usize,
        extent: usize,
        factor: usize,
    },

    #[error("timestep mismatch: LR state at {lr}, HR state at {hr}")]
    TimestepMismatch { lr: usize, hr: usize },

    #[error("timestep {t} out of range for a schedule of {len} levels")]
    TimestepOutOfRange { t: usize, len: usize },

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid mask coverage: requested ratio {requested}, mask covers {actual}")]
    MaskCoverage { requested: f64, actual: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by bad input files or arguments rather than
    /// by the numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::ByteCountMismatch { .. }
                | Error::UnknownPairLayout(_)
                | Error::UnsupportedDump(_)
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Csv(_)
                | Error::InvalidConfig(_)
                | Error::MaskCoverage { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
