//! Checkpoint format: a JSON manifest at `path` listing `(name, shape,
//! offset)` per tensor, plus a flat little-endian `f64` blob stored next to it
//! (`<path>.bin`). Offsets count bytes into the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const FORMAT: &str = "mpcrrl-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    blob: String,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn blob_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NnError + '_ {
    move |source| NnError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::with_capacity(params.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        blob: blob
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| NnError::Format(e.to_string()))?;
    fs::write(&blob, bytes).map_err(io_err(&blob))?;
    fs::write(path, json).map_err(io_err(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| NnError::Format(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(NnError::Format(format!(
            "unsupported checkpoint {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(io_err(&blob))?;
    let mut out = ParamSet::new();
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * 8;
        if end > bytes.len() {
            return Err(NnError::Format(format!(
                "tensor `{}` runs past the end of the blob",
                e.name
            )));
        }
        let data = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.insert(e.name.clone(), Tensor::new(e.shape, data)?)
            .map_err(|_| NnError::Format(format!("duplicate tensor `{}`", e.name)))?;
    }
    Ok(out)
}

/// Load and check that names and shapes match `template` exactly.
pub fn load_checkpoint_like(path: &Path, template: &ParamSet) -> Result<ParamSet> {
    let loaded = load_checkpoint(path)?;
    for (name, t) in template.iter() {
        let got = loaded
            .get(name)
            .map_err(|_| NnError::Format(format!("checkpoint is missing tensor `{name}`")))?;
        if got.shape() != t.shape() {
            return Err(NnError::Format(format!(
                "tensor `{name}` has shape {:?} in checkpoint, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if let Some(extra) = loaded.names().find(|n| !template.contains(n)) {
        return Err(NnError::Format(format!(
            "checkpoint has unexpected tensor `{extra}`"
        )));
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("a.w", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap())
            .unwrap();
        p.insert("a.b", Tensor::vector(vec![1e300, -7.25])).unwrap();
        p
    }

    #[test]
    fn missing_tensor_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut small = sample();
        small = small.filter_prefix("a.w");
        save_checkpoint(&small, &path).unwrap();
        let err = load_checkpoint_like(&path, &sample()).unwrap_err();
        assert!(matches!(&err, NnError::Format(m) if m.contains("a.b")), "{err}");
    }

    #[test]
    fn wrong_shape_reports_both() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut other = sample();
        other.values_mut("a.b").unwrap();
        let mut reshaped = ParamSet::new();
        reshaped.insert("a.w", Tensor::vector(vec![0.0; 4])).unwrap();
        reshaped.insert("a.b", Tensor::vector(vec![0.0; 2])).unwrap();
        save_checkpoint(&reshaped, &path).unwrap();
        let err = load_checkpoint_like(&path, &other).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[4]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_checkpoint(Path::new("/nonexistent/dir/p.ckpt")).unwrap_err();
        assert!(matches!(err, NnError::Io { .. }));
    }
}
