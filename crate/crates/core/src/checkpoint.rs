//! Single-file checkpoint container.
//!
//! ```text
//! NIRGAN-CHECKPOINT\n
//! <u64 LE: manifest length in bytes>
//! <manifest: UTF-8 JSON>
//! <payload: every tensor as contiguous little-endian f32>
//! ```
//!
//! Entry offsets are relative to the start of the payload. Writes go to a
//! sibling temporary file that is renamed over the target once complete.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nirgan_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"NIRGAN-CHECKPOINT\n";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    /// Full translation-training state.
    Training,
    /// Pretrained face-feature extractor only.
    Ffe,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

/// Exact position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedState {
    pub seed: u64,
    pub stream: u64,
    /// Word position as a decimal string (it is a 128-bit counter).
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub step: u64,
    pub entries: Vec<TensorEntry>,
    pub config: Config,
    pub seed_state: Option<SeedState>,
    /// Update counts of each optimizer, keyed by optimizer name.
    pub optimizer_steps: BTreeMap<String, u64>,
    /// Subjects seen during training, for overlap checks at evaluation.
    pub train_subjects: Vec<String>,
}

impl CheckpointManifest {
    pub fn new(kind: CheckpointKind, step: u64, config: Config) -> Self {
        CheckpointManifest {
            format_version: FORMAT_VERSION,
            kind,
            step,
            entries: Vec::new(),
            config,
            seed_state: None,
            optimizer_steps: BTreeMap::new(),
            train_subjects: Vec::new(),
        }
    }
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), detail.into()))
}

/// Writes `tensors` under `manifest` (whose `entries` are filled in here).
/// Returns the manifest as written.
pub fn save(path: &Path, mut manifest: CheckpointManifest, tensors: &[(String, &Tensor<f32>)]) -> Result<CheckpointManifest> {
    let mut seen = BTreeSet::new();
    let mut offset = 0u64;
    manifest.entries.clear();
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(corrupt(path, format!("duplicate entry {name}")));
        }
        manifest.entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: DTYPE.into(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let header = serde_json::to_vec(&manifest).map_err(|e| corrupt(path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset as usize);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)?;
    Ok(manifest)
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = temp_path(path);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, validating the layout and every entry's extent.
pub fn load(path: &Path) -> Result<(CheckpointManifest, BTreeMap<String, Tensor<f32>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| corrupt(path, "not a checkpoint (bad magic)"))?;
    if rest.len() < 8 {
        return Err(corrupt(path, "truncated header length"));
    }
    let (len, rest) = rest.split_at(8);
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
    if rest.len() < len {
        return Err(corrupt(path, "truncated manifest"));
    }
    let (header, payload) = rest.split_at(len);
    let manifest: CheckpointManifest =
        serde_json::from_slice(header).map_err(|e| corrupt(path, format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(
            path,
            format!("format version {} (supported: {FORMAT_VERSION})", manifest.format_version),
        ));
    }
    let mut tensors = BTreeMap::new();
    for e in &manifest.entries {
        if e.dtype != DTYPE {
            return Err(corrupt(path, format!("{} has dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        let raw = payload
            .get(start..end)
            .ok_or_else(|| corrupt(path, format!("{} extends past the payload", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?).is_some() {
            return Err(corrupt(path, format!("duplicate entry {}", e.name)));
        }
    }
    Ok((manifest, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let a = Tensor::new(vec![2, 2], vec![1.0f32, -0.0, f32::MIN_POSITIVE, 3.5e-20]).unwrap();
        let b = Tensor::new(vec![3], vec![7.0f32, 8.0, 9.0]).unwrap();
        let m = CheckpointManifest::new(CheckpointKind::Ffe, 5, Config::default());
        save(&path, m, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let (m, t) = load(&path).unwrap();
        assert_eq!(m.step, 5);
        assert_eq!(m.entries[1].offset, 16);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&t["a"]), bits(&a));
        assert_eq!(bits(&t["b"]), bits(&b));
        assert!(!temp_path(&path).exists());
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, b"hello").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
        let a = Tensor::<f32>::ones(vec![4]);
        let m = CheckpointManifest::new(CheckpointKind::Ffe, 0, Config::default());
        save(&path, m, &[("a".into(), &a)]).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
