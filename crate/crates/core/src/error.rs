//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CtError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CtError {
    #[error("channel index {channel} out of range for depth {depth}")]
    InvalidChannel { channel: usize, depth: usize },

    #[error("tensor data length {got} does not match {h}x{w}x{d}")]
    DataLength { h: usize, w: usize, d: usize, got: usize },

    #[error("spatial extent {h}x{w} too small: {reason}")]
    DegenerateExtent { h: usize, w: usize, reason: &'static str },

    #[error("pooling window {window} exceeds input extent {extent}")]
    WindowTooLarge { window: usize, extent: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("sigmoid half-width must be positive, got {0}")]
    NonPositiveHalfWidth(f64),

    #[error("quantile fraction must lie in (0,1), got {0}")]
    BadQuantileFraction(f64),

    #[error("empty sample")]
    EmptySample,

    #[error("word activity is empty (fully pruned distribution)")]
    EmptyActivity,

    #[error("forward cache does not match layer: {0}")]
    CacheMismatch(String),

    #[error("layer {index} invalid: {reason}")]
    BuildError { index: usize, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("bit budget K={0} outside supported range {1}..={2}")]
    BitBudget(usize, usize, usize),

    #[error("invalid rectangle: {0}")]
    InvalidRectangle(String),

    #[error("architecture config line {line}: {reason}")]
    ConfigParse { line: usize, reason: String },
}
