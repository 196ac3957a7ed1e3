//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} contains a zero dimension")]
    ZeroDim { shape: Vec<usize> },
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported input rank for shape {shape:?}")]
    BadRank { op: &'static str, shape: Vec<usize> },
    #[error("tensor of shape {shape:?} is not a scalar")]
    NotScalar { shape: Vec<usize> },
    #[error("cannot stack an empty list of tensors")]
    EmptyStack,
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid spec: {reason}")]
    InvalidSpec { reason: String },
    #[error("flow tensor shape ({rows}, {cols}) does not match grid ({grid_rows}, {grid_cols})")]
    TensorGridMismatch {
        rows: usize,
        cols: usize,
        grid_rows: usize,
        grid_cols: usize,
    },
    #[error("segments overlap or are unsorted at interval {interval}")]
    SegmentOverlap { interval: i64 },
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, got {got:?}")]
    BadMagic { expected: [u8; 4], got: [u8; 4] },
    #[error("unsupported version: file has {file}, reader supports {supported}")]
    VersionMismatch { file: u32, supported: u32 },
    #[error("truncated input while reading {context}")]
    Truncated { context: &'static str },
    #[error("malformed {context}: {reason}")]
    Malformed { context: &'static str, reason: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("interval index {index} cannot be serialized (negative)")]
    NegativeInterval { index: i64 },
    #[error("flow value {value} at offset {offset} is not a nonnegative integer count")]
    NonIntegralCount { value: f64, offset: usize },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {reason}")]
    InvalidConfig { reason: String },
    #[error("parameter {name} missing from parameter set")]
    MissingParameter { name: String },
    #[error("parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("instance does not match config: {reason}")]
    InstanceMismatch { reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("normalization requires max > min, got min={min}, max={max}")]
    DegenerateStats { min: f64, max: f64 },
    #[error("external vector for interval {interval} is missing")]
    MissingExternal { interval: i64 },
    #[error("external vector for interval {interval} has length {got}, expected {expected}")]
    ExternalLength {
        interval: i64,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("insufficient history: earliest required interval {missing} is not available")]
    InsufficientHistory { missing: i64 },
    #[error("externals cover {got} steps, horizon needs {needed}")]
    MissingExternals { needed: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no history matches the (weekday, time-of-day) key of interval {interval}")]
    NoMatchingHistory { interval: i64 },
    #[error("interval {interval} is not available in the series")]
    MissingInterval { interval: i64 },
    #[error("prediction/truth counts differ: {preds} vs {truths}")]
    CountMismatch { preds: usize, truths: usize },
    #[error("invalid experiment spec: {reason}")]
    InvalidSpec { reason: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Format(#[from] FormatError),
}
