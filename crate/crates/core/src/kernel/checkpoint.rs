//! Flat little-endian f64 blob plus a JSON manifest of named tensors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{KernelError, Tensor};

pub const CHECKPOINT_FORMAT: &str = "f64-le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub total_bytes: usize,
    pub entries: Vec<CheckpointEntry>,
}

/// `<blob>.json` next to the blob.
pub fn manifest_path(blob: &Path) -> PathBuf {
    let mut name = blob.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn io(e: std::io::Error) -> KernelError {
    KernelError::Checkpoint(e.to_string())
}

pub fn save_checkpoint(blob: &Path, tensors: &[(String, Tensor)]) -> Result<CheckpointManifest, KernelError> {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(CheckpointEntry { name: name.clone(), shape: t.dims(), offset: bytes.len() });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest { format: CHECKPOINT_FORMAT.into(), total_bytes: bytes.len(), entries };
    fs::write(blob, &bytes).map_err(io)?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| KernelError::Checkpoint(e.to_string()))?;
    fs::write(manifest_path(blob), text + "\n").map_err(io)?;
    Ok(manifest)
}

pub fn load_checkpoint(blob: &Path) -> Result<Vec<(String, Tensor)>, KernelError> {
    let text = fs::read_to_string(manifest_path(blob)).map_err(io)?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| KernelError::Checkpoint(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(KernelError::Checkpoint(format!("unsupported format `{}`", manifest.format)));
    }
    let bytes = fs::read(blob).map_err(io)?;
    if bytes.len() != manifest.total_bytes {
        return Err(KernelError::Checkpoint(format!("blob has {} bytes, manifest says {}", bytes.len(), manifest.total_bytes)));
    }
    manifest
        .entries
        .into_iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 8 * n;
            let raw = bytes
                .get(e.offset..end)
                .ok_or_else(|| KernelError::Checkpoint(format!("`{}` runs past the end of the blob", e.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Ok((e.name, Tensor::from_vec(e.shape, data)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let blob = dir.path().join("model.bin");
        let tensors = vec![
            ("a".to_string(), Tensor::from_vec([1, 2, 1, 1], vec![1.5, -2.0]).unwrap()),
            ("b".to_string(), Tensor::full([2, 1, 2, 1], 0.25)),
        ];
        let m = save_checkpoint(&blob, &tensors).unwrap();
        assert_eq!(m.entries[1].offset, 16);
        assert_eq!(load_checkpoint(&blob).unwrap(), tensors);
    }
}
