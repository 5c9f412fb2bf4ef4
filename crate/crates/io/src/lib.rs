//! File formats around the engine: IDX (MNIST) and CIFAR-10 binary
//! dataset loaders, the versioned model container, and teacher-logit
//! records for distillation. All formats are explicitly
//! endian-specified, so loads are platform independent.

pub mod cifar;
pub mod idx;
pub mod model;
pub mod teacher;

use convtab_core::tensor::Tensor3;
use convtab_core::CtError;
use thiserror::Error;

pub use cifar::load_cifar10;
pub use idx::load_mnist;
pub use model::{load_model, read_quantization_scales, save_model, save_model_i8};
pub use teacher::{load_teacher_logits, write_teacher_logits};

pub type Result<T> = std::result::Result<T, IoError>;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error at byte offset {offset}: {reason}")]
    Parse { offset: u64, reason: String },

    #[error("record {index}: {reason}")]
    Record { index: usize, reason: String },

    #[error("duplicate example id {0}")]
    DuplicateId(u32),

    #[error(transparent)]
    Core(#[from] CtError),
}

/// In-memory dataset: images scaled to `[0, 1]`, one class index per
/// image.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor3>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keeps only the first `n` examples.
    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }
}

/// Reads a file, transparently gunzipping when it carries the gzip
/// magic — the standard IDX distribution ships compressed.
pub(crate) fn read_maybe_gzipped(path: &std::path::Path) -> Result<Vec<u8>> {
    use std::io::Read;
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut decoded = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut decoded)?;
        Ok(decoded)
    } else {
        Ok(raw)
    }
}
