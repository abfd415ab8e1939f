//! Checkpoint files: magic "SHCK", u32 version, a JSON blob holding the
//! model config and training metadata, then each named parameter tensor.
//! All integers little-endian. Writes go to a temp file renamed on
//! completion, so a crashed run never leaves a half-written checkpoint.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const SHCK_MAGIC: &[u8; 4] = b"SHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: String,
    pub epoch: usize,
    pub seed: u64,
    /// Vocabulary symbols in id order (blank excluded).
    pub vocab_symbols: String,
    /// Free-form notes, e.g. which parameters were freshly initialized.
    #[serde(default)]
    pub notes: Vec<String>,
}

impl CheckpointMeta {
    pub fn new(phase: &str, epoch: usize, seed: u64, vocab_symbols: String) -> Self {
        CheckpointMeta {
            phase: phase.to_string(),
            epoch,
            seed,
            vocab_symbols,
            notes: Vec::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Blob {
    config: ModelConfig,
    meta: CheckpointMeta,
}

pub fn save_checkpoint(model: &Model<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let blob = serde_json::to_vec(&Blob {
        config: model.config.clone(),
        meta: meta.clone(),
    })
    .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(SHCK_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    buf.extend_from_slice(&blob);
    buf.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in model.params.iter() {
        buf.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        write_tensor(&p.value, &mut buf)?;
    }

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = &bytes[..];

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != SHCK_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad checkpoint magic",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})",
            path.display()
        )));
    }
    let blob_len = read_u64(&mut r, path)? as usize;
    if r.len() < blob_len {
        return Err(Error::Format(format!("{}: truncated config blob", path.display())));
    }
    let blob: Blob = serde_json::from_slice(&r[..blob_len])
        .map_err(|e| Error::Format(format!("{}: bad config blob: {e}", path.display())))?;
    r = &r[blob_len..];

    let n_params = read_u64(&mut r, path)? as usize;
    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..n_params {
        let name_len = read_u64(&mut r, path)? as usize;
        if r.len() < name_len {
            return Err(Error::Format(format!("{}: truncated parameter name", path.display())));
        }
        let name = String::from_utf8(r[..name_len].to_vec())
            .map_err(|e| Error::Format(format!("{}: bad parameter name: {e}", path.display())))?;
        r = &r[name_len..];
        let tensor = read_tensor::<f32, _>(&mut r)?;
        tensors.insert(name, tensor);
    }

    // Build the skeleton from the embedded config, then fill every parameter,
    // insisting on exact name and shape agreement.
    let mut model: Model<f32> =
        Model::build(blob.config, &mut ChaCha12Rng::seed_from_u64(0))?;
    for p in model.params.iter_mut() {
        let tensor = tensors.remove(&p.name).ok_or_else(|| {
            Error::Format(format!(
                "{}: parameter `{}` missing from checkpoint",
                path.display(),
                p.name
            ))
        })?;
        if tensor.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "{}: parameter `{}` has shape {:?}, model expects {:?}",
                path.display(),
                p.name,
                tensor.shape(),
                p.value.shape()
            )));
        }
        p.value = tensor;
    }
    if let Some((name, _)) = tensors.into_iter().next() {
        return Err(Error::Format(format!(
            "{}: checkpoint holds unknown parameter `{name}`",
            path.display()
        )));
    }
    Ok((model, blob.meta))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("{}: truncated checkpoint", path.display())))
}

fn read_u32(r: &mut &[u8], path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8], path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}
