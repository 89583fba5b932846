use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed WAV data: {0}")]
    Format(String),

    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),

    #[error("sample {index} out of 16-bit range: {value}")]
    Range { index: usize, value: f64 },

    #[error("input too short: {len} samples, need at least {needed}")]
    InputTooShort { len: usize, needed: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("filter has no taps")]
    EmptyFilter,

    #[error("sample rate mismatch: {left} Hz vs {right} Hz")]
    RateMismatch { left: u32, right: u32 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("room distribution error: {0}")]
    Distribution(String),

    #[error("rt60 of {rt60} s is infeasible for this room (absorption {absorption:.3} > 0.98)")]
    InfeasibleRt60 { rt60: f64, absorption: f64 },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("training did not converge: {0}")]
    Training(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("word error rate is undefined for an empty reference")]
    UndefinedWer,

    #[error("empty batch")]
    EmptyBatch,

    #[error("config error: {0}")]
    Config(String),

    #[error("model file error: {0}")]
    ModelFormat(String),
}
