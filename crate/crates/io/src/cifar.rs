//! The CIFAR-10 binary batch format: 3073-byte records, one label byte
//! followed by 3072 channel-planar pixels (red plane, green, blue; each
//! 32x32 row-major).

use std::path::Path;

use convtab_core::tensor::Tensor3;

use crate::{read_maybe_gzipped, Dataset, IoError, Result};

const RECORD_BYTES: usize = 3073;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

/// Loads one or more CIFAR-10 batch files into a single dataset.
pub fn load_cifar10<P: AsRef<Path>>(batch_paths: &[P]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        let bytes = read_maybe_gzipped(path.as_ref())?;
        if bytes.len() % RECORD_BYTES != 0 {
            return Err(IoError::Record {
                index: images.len() + bytes.len() / RECORD_BYTES,
                reason: format!(
                    "file {} has {} trailing bytes after the last whole record",
                    path.as_ref().display(),
                    bytes.len() % RECORD_BYTES
                ),
            });
        }
        for (i, record) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
            let index = images.len();
            let label = record[0] as usize;
            if label > 9 {
                return Err(IoError::Record {
                    index,
                    reason: format!("label byte {label} out of range 0..=9 (record {i} of {})", path.as_ref().display()),
                });
            }
            let planes = &record[1..];
            let mut data = vec![0.0f64; SIDE * SIDE * 3];
            for c in 0..3 {
                let plane = &planes[c * PLANE..(c + 1) * PLANE];
                for (pixel_idx, &byte) in plane.iter().enumerate() {
                    data[pixel_idx * 3 + c] = byte as f64 / 255.0;
                }
            }
            images.push(Tensor3::from_data(SIDE, SIDE, 3, data)?);
            labels.push(label);
        }
    }
    Ok(Dataset { images, labels, class_count: 10 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn record(label: u8, fill: impl Fn(usize, usize) -> u8) -> Vec<u8> {
        let mut bytes = vec![label];
        for c in 0..3 {
            for i in 0..PLANE {
                bytes.push(fill(c, i));
            }
        }
        bytes
    }

    fn write_temp(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::File::create(&path).unwrap().write_all(bytes).unwrap();
        path
    }

    #[test]
    fn parses_records_with_planar_channels() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = record(6, |c, i| (c as u8 + 1) * 10 + (i % 3) as u8);
        bytes.extend(record(0, |_, _| 255));
        let path = write_temp(&dir, "batch.bin", &bytes);
        let ds = load_cifar10(&[path]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![6, 0]);
        assert_eq!(ds.images[0].shape(), (32, 32, 3));
        // pixel 0: red plane entry 0 = 10, green = 20, blue = 30
        assert!((ds.images[0].get(0, 0, 0) - 10.0 / 255.0).abs() < 1e-12);
        assert!((ds.images[0].get(0, 0, 1) - 20.0 / 255.0).abs() < 1e-12);
        assert!((ds.images[0].get(0, 0, 2) - 30.0 / 255.0).abs() < 1e-12);
        assert!(ds.images[1].data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn concatenates_multiple_batches() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_temp(&dir, "a.bin", &record(1, |_, _| 0));
        let b = write_temp(&dir, "b.bin", &record(2, |_, _| 0));
        let ds = load_cifar10(&[a, b]).unwrap();
        assert_eq!(ds.labels, vec![1, 2]);
    }

    #[test]
    fn truncated_record_names_its_index() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = record(1, |_, _| 0);
        bytes.extend(record(2, |_, _| 0));
        bytes.truncate(2 * RECORD_BYTES - 100);
        let path = write_temp(&dir, "bad.bin", &bytes);
        match load_cifar10(&[path]) {
            Err(IoError::Record { index: 1, .. }) => {}
            other => panic!("expected record error naming index 1, got {other:?}"),
        }
    }

    #[test]
    fn bad_label_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = record(3, |_, _| 0);
        bytes.extend(record(10, |_, _| 0));
        let path = write_temp(&dir, "bad.bin", &bytes);
        match load_cifar10(&[path]) {
            Err(IoError::Record { index: 1, .. }) => {}
            other => panic!("expected record error naming index 1, got {other:?}"),
        }
    }
}
