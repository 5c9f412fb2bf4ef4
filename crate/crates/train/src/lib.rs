//! Training for CT networks.
//!
//! The soft forward pass makes word choice differentiable; this crate
//! supplies everything else: the reverse-mode pass through sparse votes,
//! word activities, and bilinear sampling ([`backward`]), losses
//! ([`loss`]), SGD with momentum ([`sgd`]), the ambiguity-fraction
//! annealing schedule ([`anneal`]), and the three-phase training driver
//! ([`driver`]) that takes a network from dense soft voting to hard
//! single-word lookups.

pub mod anneal;
pub mod backward;
pub mod driver;
pub mod gradcheck;
pub mod loss;
pub mod sgd;

use convtab_core::CtError;
use thiserror::Error;

pub use anneal::AnnealSchedule;
pub use backward::{backward_soft_ct, BitGrad, GradientBundle, LayerGrads};
pub use driver::{train_three_phase, EpochMetrics, PhasePlan, TrainConfig};
pub use loss::{cross_entropy, distill_loss, softmax, DistillConfig};
pub use sgd::SgdConfig;

/// Teacher outputs keyed by example id.
pub type TeacherLogits = std::collections::HashMap<u32, Vec<f64>>;

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] CtError),

    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),

    #[error("distillation temperature must stay >= 1, got {0}")]
    BadTemperature(f64),

    #[error("annealing schedule invalid: {0}")]
    BadSchedule(String),

    #[error("training needs at least two CT layers, found {0}")]
    TooShallow(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("teacher logits missing for example {0}")]
    MissingTeacher(u32),

    #[error("phase-1 head needs at least {classes} channels, lower half ends with {channels}")]
    HeadTooNarrow { classes: usize, channels: usize },
}
