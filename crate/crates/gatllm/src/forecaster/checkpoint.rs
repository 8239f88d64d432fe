//! Checkpoint file format.
//!
//! Layout: 8-byte magic, u64 LE manifest length, manifest JSON (format
//! version, config, normalization stats, parameter directory of
//! name/shape/offset/byte-length), raw little-endian f64 payloads in manifest
//! order, and a trailing SHA-256 over everything before it. Round-trips are
//! bit-exact.

use super::{Forecaster, ForecasterConfig};
use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::telemetry::NormalizationStats;
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LQFCAST\0";
const FORMAT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    format_version: u32,
    config: ForecasterConfig,
    norm_stats: Option<NormalizationStats>,
    params: Vec<ParamEntry>,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

pub fn save_checkpoint(model: &Forecaster, path: &Path) -> Result<()> {
    let named = model.param_tensors();
    let mut params = Vec::with_capacity(named.len());
    let mut offset = 0u64;
    for (name, t) in &named {
        let byte_len = (t.len() * 8) as u64;
        params.push(ParamEntry { name: name.clone(), shape: t.shape().to_vec(), offset, byte_len });
        offset += byte_len;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        norm_stats: model.norm_stats.clone(),
        params,
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| corrupt(format!("manifest encode: {e}")))?;

    let mut file = Vec::with_capacity(16 + manifest_bytes.len() + offset as usize + 32);
    file.extend_from_slice(MAGIC);
    file.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    file.extend_from_slice(&manifest_bytes);
    for (_, t) in &named {
        for v in t.data() {
            file.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&file);
    file.extend_from_slice(&digest);
    std::fs::write(path, file)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Forecaster> {
    let file = std::fs::read(path)?;
    if file.len() < MAGIC.len() + 8 + 32 {
        return Err(corrupt(format!("file too short ({} bytes)", file.len())));
    }
    let (body, tail) = file.split_at(file.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != tail {
        return Err(corrupt("checksum mismatch: file is corrupt or truncated"));
    }
    if &body[..8] != MAGIC {
        return Err(corrupt("bad magic: not a checkpoint file"));
    }
    let manifest_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    if 16 + manifest_len > body.len() {
        return Err(corrupt("manifest length exceeds file size"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[16..16 + manifest_len])
        .map_err(|e| corrupt(format!("manifest decode: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let payload = &body[16 + manifest_len..];

    // Build a model of the right architecture, then overwrite every tensor.
    let mut model = Forecaster::init(manifest.config.clone(), 0)?;
    model.norm_stats = manifest.norm_stats.clone();
    let mut entries = manifest.params.iter();
    let mut err: Option<Error> = None;
    model.visit_params_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let Some(entry) = entries.next() else {
            err = Some(corrupt(format!("parameter `{name}` missing from manifest")));
            return;
        };
        if entry.name != name || entry.shape != t.shape() {
            err = Some(corrupt(format!(
                "parameter mismatch: manifest has `{}` {:?}, model expects `{}` {:?}",
                entry.name,
                entry.shape,
                name,
                t.shape()
            )));
            return;
        }
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        if end > payload.len() || entry.byte_len as usize != t.len() * 8 {
            err = Some(corrupt(format!("parameter `{name}` payload out of bounds")));
            return;
        }
        for (i, chunk) in payload[start..end].chunks_exact(8).enumerate() {
            t.data_mut()[i] = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if entries.next().is_some() {
        return Err(corrupt("manifest lists parameters the model does not have"));
    }
    Ok(model)
}

/// Load and verify the stored config equals `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &ForecasterConfig) -> Result<Forecaster> {
    let model = load_checkpoint(path)?;
    if &model.config != expected {
        return Err(Error::Checkpoint(format!(
            "config mismatch: checkpoint was built with {:?}, expected {:?}",
            model.config, expected
        )));
    }
    Ok(model)
}
