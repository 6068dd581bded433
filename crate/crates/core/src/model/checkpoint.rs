//! Checkpoint files.
//!
//! Layout: 16-byte header (`FCN1`, `u32` format version, `u64` metadata length,
//! all little-endian), JSON metadata of that length, then every parameter as a
//! little-endian `f64` in layout order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_layout, FcnConfig, FcnParameters, TensorSpec};
use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::vocab::TechniqueVocabulary;

pub const MAGIC: &[u8; 4] = b"FCN1";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: FcnConfig,
    vocabulary: Option<TechniqueVocabulary>,
    norm: NormStats,
    tensors: Vec<TensorSpec>,
}

pub fn write_checkpoint<W: Write>(params: &FcnParameters, mut w: W) -> Result<()> {
    let meta = serde_json::to_vec(&Metadata {
        config: params.config().clone(),
        vocabulary: params.vocabulary.clone(),
        norm: params.norm.clone(),
        tensors: params.layout().to_vec(),
    })?;
    let io = |e: std::io::Error| Error::Format(format!("writing checkpoint: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&meta).map_err(io)?;
    let mut blob = Vec::with_capacity(params.num_params() * 8);
    for v in params.values() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&blob).map_err(io)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<FcnParameters> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let mut meta = Vec::new();
    r.by_ref()
        .take(meta_len)
        .read_to_end(&mut meta)
        .map_err(|e| Error::Format(format!("reading checkpoint metadata: {e}")))?;
    if meta.len() as u64 != meta_len {
        return Err(Error::Format("truncated checkpoint metadata".into()));
    }
    let meta: Metadata = serde_json::from_slice(&meta)
        .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;

    let layout = param_layout(&meta.config);
    let declared: Vec<_> = meta.tensors.iter().map(|t| (&t.name, &t.shape)).collect();
    let expected: Vec<_> = layout.iter().map(|t| (&t.name, &t.shape)).collect();
    if declared != expected {
        return Err(Error::Format("tensor list does not match the config".into()));
    }
    if meta.norm.n_mels() != meta.config.n_mels || meta.norm.std.len() != meta.config.n_mels {
        return Err(Error::Format("normalization stats do not match n_mels".into()));
    }

    let total: usize = layout.iter().map(TensorSpec::len).sum();
    let mut blob = vec![0u8; total * 8];
    r.read_exact(&mut blob)
        .map_err(|_| Error::Format("truncated checkpoint weights".into()))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint weights".into()));
    }
    let values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut params = FcnParameters::from_values(&meta.config, values)?;
    params.norm = meta.norm;
    params.vocabulary = meta.vocabulary;
    Ok(params)
}

pub fn save_checkpoint(params: &FcnParameters, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    write_checkpoint(params, &mut bytes)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FcnParameters> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes[..])
}
