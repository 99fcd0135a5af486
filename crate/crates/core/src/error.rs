use std::path::PathBuf;

/// Failures surfaced by the pipeline. [`Error::exit_code`] maps them onto the CLI contract.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("inclusion does not fit inside the ROI: {margin} margin is {overshoot_mm:.3} mm short")]
    InclusionOutsideRoi { margin: &'static str, overshoot_mm: f64 },
    #[error("non-positive modulus {value} kPa at ({row}, {col})")]
    NonPositiveModulus { row: usize, col: usize, value: f64 },
    #[error("frame budget of {available} frames is shorter than the {requested} requested")]
    FrameBudget { available: usize, requested: usize },
    #[error("cannot min-max normalize a constant volume (value {0})")]
    ConstantVolume(f32),
    #[error("patch anchor ({a}, {l}) with size {ap}x{lp} falls outside the {rows}x{cols} region")]
    AnchorOutOfBounds { a: usize, l: usize, ap: usize, lp: usize, rows: usize, cols: usize },
    #[error("{count} pixels receive no window weight, first at {first:?}")]
    CoverageHole { count: usize, first: (usize, usize) },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error("mask is not binary")]
    NonBinaryMask,
    #[error("{0}")]
    Metric(String),
    #[error("bad magic in {what}: expected {expected:?}")]
    BadMagic { what: &'static str, expected: &'static str },
    #[error("unsupported {what} format version {found} (supported: {supported})")]
    Version { what: &'static str, found: u32, supported: u32 },
    #[error("truncated tensor: header needs {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("dataset split violation: inclusion stiffness {value} kPa appears in both {a} and {b}")]
    SplitOverlap { value: f64, a: String, b: String },
    #[error("checkpoint fingerprint mismatch: checkpoint {found:08x}, model {expected:08x}")]
    Fingerprint { expected: u32, found: u32 },
    #[error("checkpoint lacks parameter {0}")]
    MissingParam(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// 2 config error, 3 data error, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InclusionOutsideRoi { .. } | Error::FrameBudget { .. } | Error::Fingerprint { .. } => 2,
            Error::Divergence(_) => 4,
            _ => 3,
        }
    }
}
