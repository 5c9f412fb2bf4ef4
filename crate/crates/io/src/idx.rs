//! IDX parsing for the MNIST distribution: big-endian headers, one byte
//! per pixel or label.

use std::path::Path;

use convtab_core::tensor::Tensor3;

use crate::{read_maybe_gzipped, Dataset, IoError, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct BigEndianReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> BigEndianReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BigEndianReader { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(IoError::Parse {
                offset: self.bytes.len() as u64,
                reason: format!("truncated while reading {what} ({n} bytes at offset {})", self.offset),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads the image/label file pair of one MNIST split. Files may be raw
/// IDX or gzipped IDX.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = read_maybe_gzipped(images_path)?;
    let mut r = BigEndianReader::new(&image_bytes);
    let magic = r.u32("image magic")?;
    if magic != IMAGES_MAGIC {
        return Err(IoError::Parse {
            offset: 0,
            reason: format!("image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let count = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let pixels = r.take(count * rows * cols, "pixel data")?;
    let images: Vec<Tensor3> = pixels
        .chunks_exact(rows * cols)
        .map(|chunk| {
            let data = chunk.iter().map(|&b| b as f64 / 255.0).collect();
            Tensor3::from_data(rows, cols, 1, data).map_err(IoError::from)
        })
        .collect::<Result<_>>()?;

    let label_bytes = read_maybe_gzipped(labels_path)?;
    let mut r = BigEndianReader::new(&label_bytes);
    let magic = r.u32("label magic")?;
    if magic != LABELS_MAGIC {
        return Err(IoError::Parse {
            offset: 0,
            reason: format!("label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let label_count = r.u32("label count")? as usize;
    if label_count != count {
        return Err(IoError::Parse {
            offset: 4,
            reason: format!("{label_count} labels for {count} images"),
        });
    }
    let labels: Vec<usize> = r.take(count, "label data")?.iter().map(|&b| b as usize).collect();
    for (index, &label) in labels.iter().enumerate() {
        if label > 9 {
            return Err(IoError::Record { index, reason: format!("label byte {label} out of range 0..=9") });
        }
    }
    Ok(Dataset { images, labels, class_count: 10 })
}
