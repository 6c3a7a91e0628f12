//! Checkpoint format: a JSON manifest (`model.json`) describing configs and
//! tensor layout, plus a raw little-endian f32 blob (`model.bin`) holding
//! every parameter in store order. The manifest's `model_id` is the SHA-256
//! of the blob, so identical weights always produce the same id and a
//! corrupted blob is detected on load. Writes go to a temp file in the same
//! directory and are renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::{EmbeddingModel, PoolingSpec};
use crate::trainer::loss::LossConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.json";
pub const BLOB_FILE: &str = "model.bin";

/// Where one tensor lives inside the blob. Offsets and lengths in bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_id: String,
    pub backbone: BackboneConfig,
    pub pooling: PoolingSpec,
    pub loss: LossConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct SavedCheckpoint {
    pub model_id: String,
    pub manifest_path: PathBuf,
    pub blob_path: PathBuf,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: EmbeddingModel<f32>,
    pub loss: LossConfig,
    pub model_id: String,
}

/// SHA-256 of the weight blob, lowercase hex.
pub fn compute_model_id(blob: &[u8]) -> String {
    let digest = Sha256::digest(blob);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn build_blob(model: &EmbeddingModel<f32>) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut blob: Vec<u8> = Vec::with_capacity(model.store.total_elements() * 4);
    let mut tensors = Vec::with_capacity(model.store.len());
    for (_, param) in model.store.iter() {
        let offset = blob.len() as u64;
        for &x in &param.data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: param.name.clone(),
            shape: param.shape.clone(),
            offset,
            byte_len: blob.len() as u64 - offset,
        });
    }
    (blob, tensors)
}

/// Identity of the model's current weights (what `save` would record).
pub fn model_id_of(model: &EmbeddingModel<f32>) -> String {
    compute_model_id(&build_blob(model).0)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let file_name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("checkpoint");
    let tmp = dir.join(format!(".{file_name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serializes the model into `dir/model.json` + `dir/model.bin`.
pub fn save(dir: &Path, model: &EmbeddingModel<f32>, loss: &LossConfig) -> Result<SavedCheckpoint> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (blob, tensors) = build_blob(model);
    let model_id = compute_model_id(&blob);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model_id: model_id.clone(),
        backbone: model.config().clone(),
        pooling: model.pooling_spec(),
        loss: loss.clone(),
        tensors,
    };
    let manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let blob_path = dir.join(BLOB_FILE);
    let manifest_path = dir.join(MANIFEST_FILE);
    write_atomic(&blob_path, &blob)?;
    write_atomic(&manifest_path, manifest_json.as_bytes())?;
    Ok(SavedCheckpoint {
        model_id,
        manifest_path,
        blob_path,
    })
}

/// Reads and verifies a checkpoint: blob hash must match `model_id`, every
/// model parameter must appear exactly once with the right shape, and the
/// loss config must be valid for the stored width.
pub fn load(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_json =
        fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&manifest_json)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let actual_id = compute_model_id(&blob);
    if actual_id != manifest.model_id {
        return Err(Error::Checkpoint(format!(
            "weight blob does not match manifest: manifest model_id {}, blob hashes to {actual_id}",
            manifest.model_id
        )));
    }

    let mut model = EmbeddingModel::<f32>::new(manifest.backbone.clone(), manifest.pooling)?;
    manifest.loss.validate(model.d_model())?;

    if manifest.tensors.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model defines {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for entry in &manifest.tensors {
        if !seen.insert(entry.name.as_str()) {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' appears twice in manifest",
                entry.name
            )));
        }
        let id = model.store.find(&entry.name).ok_or_else(|| {
            Error::Checkpoint(format!(
                "manifest tensor '{}' does not exist in this model configuration",
                entry.name
            ))
        })?;
        let param = model.store.get_mut(id);
        if param.shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has shape {:?} in manifest but {:?} in model",
                entry.name, entry.shape, param.shape
            )));
        }
        let expected_len = param.data.len() as u64 * 4;
        if entry.byte_len != expected_len {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' spans {} bytes in manifest, expected {expected_len}",
                entry.name, entry.byte_len
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' extends past the end of the blob ({} > {})",
                entry.name,
                end,
                blob.len()
            )));
        }
        for (i, chunk) in blob[start..end].chunks_exact(4).enumerate() {
            param.data[i] = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    Ok(LoadedCheckpoint {
        model,
        loss: manifest.loss,
        model_id: manifest.model_id,
    })
}
