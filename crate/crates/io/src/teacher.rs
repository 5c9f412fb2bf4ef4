//! Teacher-logit records for distillation: one record per training
//! example, a little-endian `u32` example id followed by `class_count`
//! little-endian `f32` logits. Teachers are trained elsewhere; this
//! module only ingests their outputs.

use std::collections::HashMap;
use std::path::Path;

use crate::{IoError, Result};

/// Loads an id -> logits map, validating record alignment and id
/// uniqueness. `class_count` fixes the record length, so a file written
/// for a different class count fails here rather than mid-training.
pub fn load_teacher_logits(path: &Path, class_count: usize) -> Result<HashMap<u32, Vec<f64>>> {
    let bytes = std::fs::read(path)?;
    let record_len = 4 + 4 * class_count;
    if bytes.len() % record_len != 0 {
        return Err(IoError::Parse {
            offset: (bytes.len() / record_len * record_len) as u64,
            reason: format!(
                "{} bytes do not align to records of {record_len} bytes ({class_count} classes)",
                bytes.len()
            ),
        });
    }
    let mut map = HashMap::with_capacity(bytes.len() / record_len);
    for record in bytes.chunks_exact(record_len) {
        let id = u32::from_le_bytes([record[0], record[1], record[2], record[3]]);
        let logits: Vec<f64> = record[4..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if map.insert(id, logits).is_some() {
            return Err(IoError::DuplicateId(id));
        }
    }
    Ok(map)
}

/// Serializes records in the same layout; handy for tests and for
/// exporting a teacher's outputs from another toolchain.
pub fn write_teacher_logits(entries: &[(u32, Vec<f32>)]) -> Vec<u8> {
    let mut bytes = Vec::new();
    for (id, logits) in entries {
        bytes.extend_from_slice(&id.to_le_bytes());
        for v in logits {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(bytes: &[u8]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.bin");
        std::fs::File::create(&path).unwrap().write_all(bytes).unwrap();
        (dir, path)
    }

    #[test]
    fn round_trips_well_formed_records() {
        let entries = vec![(0u32, vec![0.5f32, -1.0, 2.0]), (7, vec![1.0, 0.0, -3.5])];
        let (_dir, path) = write_temp(&write_teacher_logits(&entries));
        let map = load_teacher_logits(&path, 3).unwrap();
        assert_eq!(map.len(), 2);
        assert_eq!(map[&7], vec![1.0, 0.0, -3.5]);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let entries = vec![(3u32, vec![0.0f32; 2]), (3, vec![1.0; 2])];
        let (_dir, path) = write_temp(&write_teacher_logits(&entries));
        assert!(matches!(load_teacher_logits(&path, 2), Err(IoError::DuplicateId(3))));
    }

    #[test]
    fn misaligned_records_are_rejected() {
        let entries = vec![(1u32, vec![0.0f32; 4])];
        let bytes = write_teacher_logits(&entries);
        let (_dir, path) = write_temp(&bytes);
        // wrong class count: record length no longer divides the file
        assert!(matches!(load_teacher_logits(&path, 3), Err(IoError::Parse { .. })));
        // truncated file
        let (_dir2, path2) = write_temp(&bytes[..bytes.len() - 2]);
        assert!(matches!(load_teacher_logits(&path2, 4), Err(IoError::Parse { .. })));
    }
}
