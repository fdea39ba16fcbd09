//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its declared bounds.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Array shapes do not match the operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An on-disk artifact does not match the expected format or version.
    #[error("format error: {0}")]
    Format(String),

    /// A caller violated an API contract (e.g. passed a Z-space code where W is required).
    #[error("contract error: {0}")]
    Contract(String),

    /// Empty or unusable input data.
    #[error("input error: {0}")]
    Input(String),

    /// A computation produced NaN or Inf.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The cardiothoracic-ratio oracle could not find a measurable structure.
    #[error("measurement failure: {0}")]
    Measurement(String),

    /// A direction cannot be derived because the defining difference is exactly zero.
    #[error("zero-difference error: {0}")]
    ZeroDifference(String),

    /// A statistic is undefined for the given inputs (e.g. zero projected spread).
    #[error("undefined-score error: {0}")]
    UndefinedScore(String),

    /// Class data too degenerate to fit (fewer than 2 codes, or identical point sets).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
