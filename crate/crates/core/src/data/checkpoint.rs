//! Checkpoint directories: a JSON manifest plus one raw little-endian f64
//! blob per tensor. Load-save round trips are bitwise stable, so two runs can
//! be compared by hashing their checkpoints.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

/// Position of a deterministic RNG stream, enough to reconstruct it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStateRecord {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

/// Everything a resumed run needs: graph echo, resolved-config digest, how
/// far training got, the RNG position, and every named tensor (parameters
/// and prior parameters; optimizer moments when a checkpoint is taken
/// mid-stage).
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointState {
    pub graph_vertices: Vec<String>,
    pub graph_edges: Vec<(usize, usize)>,
    pub config_digest: String,
    pub completed_stage: usize,
    pub rng: RngStateRecord,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    graph_vertices: Vec<String>,
    graph_edges: Vec<(usize, usize)>,
    config_digest: String,
    completed_stage: usize,
    rng: RngStateRecord,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

fn tensor_file(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join("tensors").join(format!("{}.bin", name))
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!("tensor name '{}' is not filesystem-safe", name)))
    }
}

/// Writes `state` into `dir`, creating it if needed.
pub fn save_checkpoint(dir: &Path, state: &CheckpointState) -> Result<()> {
    fs::create_dir_all(dir.join("tensors"))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        graph_vertices: state.graph_vertices.clone(),
        graph_edges: state.graph_edges.clone(),
        config_digest: state.config_digest.clone(),
        completed_stage: state.completed_stage,
        rng: state.rng.clone(),
        tensors: state
            .tensors
            .iter()
            .map(|(name, t)| TensorRecord {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
            })
            .collect(),
    };
    for name in state.tensors.keys() {
        check_name(name)?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    for (name, t) in &state.tensors {
        let mut bytes = Vec::with_capacity(t.numel() * 8);
        for v in t.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(tensor_file(dir, name), bytes)?;
    }
    Ok(())
}

/// Reads a checkpoint back, verifying version, blob sizes, and finiteness.
pub fn load_checkpoint(dir: &Path) -> Result<CheckpointState> {
    let manifest_path = dir.join("manifest.json");
    let bytes = fs::read(&manifest_path)
        .map_err(|e| Error::Corruption(format!("{}: {}", manifest_path.display(), e)))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Corruption(format!("manifest.json: {}", e)))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let mut tensors = BTreeMap::new();
    for record in &manifest.tensors {
        check_name(&record.name)?;
        let numel: usize = record.shape.iter().product();
        if record.dtype != "f64" {
            return Err(Error::Corruption(format!(
                "tensor {} has unsupported dtype {}",
                record.name, record.dtype
            )));
        }
        let path = tensor_file(dir, &record.name);
        let blob = fs::read(&path)
            .map_err(|e| Error::Corruption(format!("{}: {}", path.display(), e)))?;
        if blob.len() != numel * 8 {
            return Err(Error::Corruption(format!(
                "tensor {} expects {} bytes, file has {}",
                record.name,
                numel * 8,
                blob.len()
            )));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Corruption(format!(
                "tensor {} contains non-finite values",
                record.name
            )));
        }
        tensors.insert(record.name.clone(), Tensor::new(record.shape.clone(), values)?);
    }
    Ok(CheckpointState {
        graph_vertices: manifest.graph_vertices,
        graph_edges: manifest.graph_edges,
        config_digest: manifest.config_digest,
        completed_stage: manifest.completed_stage,
        rng: manifest.rng,
        tensors,
    })
}

/// SHA-256 over the manifest and every blob in manifest order. Two runs that
/// agree bitwise agree here.
pub fn checkpoint_digest(dir: &Path) -> Result<String> {
    let manifest_bytes = fs::read(dir.join("manifest.json"))
        .map_err(|e| Error::Corruption(format!("manifest.json: {}", e)))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Corruption(format!("manifest.json: {}", e)))?;
    let mut hasher = Sha256::new();
    hasher.update(&manifest_bytes);
    for record in &manifest.tensors {
        check_name(&record.name)?;
        let blob = fs::read(tensor_file(dir, &record.name))
            .map_err(|e| Error::Corruption(format!("tensor {}: {}", record.name, e)))?;
        hasher.update(&blob);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_state() -> CheckpointState {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "rna.enc.w0".to_string(),
            Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1.5e-300, -7.25, 42.0]).unwrap(),
        );
        tensors.insert("rna.prior.logits".to_string(), Tensor::row(vec![0.0, 0.5]));
        CheckpointState {
            graph_vertices: vec!["atac".into(), "rna".into()],
            graph_edges: vec![(0, 1)],
            config_digest: "abc123".into(),
            completed_stage: 2,
            rng: RngStateRecord {
                seed: 99,
                stream: 3,
                word_pos: 123456789012345678901u128,
            },
            tensors,
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let state = sample_state();
        save_checkpoint(dir.path(), &state).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(state, loaded);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let state = sample_state();
        save_checkpoint(a.path(), &state).unwrap();
        let loaded = load_checkpoint(a.path()).unwrap();
        save_checkpoint(b.path(), &loaded).unwrap();
        assert_eq!(
            fs::read(a.path().join("manifest.json")).unwrap(),
            fs::read(b.path().join("manifest.json")).unwrap()
        );
        for name in state.tensors.keys() {
            assert_eq!(
                fs::read(tensor_file(a.path(), name)).unwrap(),
                fs::read(tensor_file(b.path(), name)).unwrap()
            );
        }
        assert_eq!(
            checkpoint_digest(a.path()).unwrap(),
            checkpoint_digest(b.path()).unwrap()
        );
    }

    #[test]
    fn truncated_blob_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample_state()).unwrap();
        let path = tensor_file(dir.path(), "rna.enc.w0");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Corruption(_))));
    }

    #[test]
    fn version_bump_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &sample_state()).unwrap();
        let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let bumped = manifest.replace("\"format_version\": 1", "\"format_version\": 2");
        assert_ne!(manifest, bumped);
        fs::write(dir.path().join("manifest.json"), bumped).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Version { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn digest_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = sample_state();
        save_checkpoint(dir.path(), &state).unwrap();
        let d1 = checkpoint_digest(dir.path()).unwrap();
        state
            .tensors
            .get_mut("rna.prior.logits")
            .unwrap()
            .values_mut()[0] = 1e-9;
        save_checkpoint(dir.path(), &state).unwrap();
        let d2 = checkpoint_digest(dir.path()).unwrap();
        assert_ne!(d1, d2);
    }
}
