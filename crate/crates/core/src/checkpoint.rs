//! Checkpoint container.
//!
//! ```text
//! "STYLECOND-CKPT\n"            magic
//! u64 little-endian              header length in bytes
//! header                         JSON: format version, model kind, config echo,
//!                                model card, and per-parameter name/shape/offset
//! f64 little-endian values       all parameters, concatenated in header order
//! ```
//!
//! Loading checks the magic, the model kind, the config echo and every
//! parameter name and shape before touching the model.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelKind, TrainableModel};

const MAGIC: &[u8] = b"STYLECOND-CKPT\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the value section, in values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub model_card: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(path: &Path, model: &dyn TrainableModel) -> Result<()> {
    let mut params = Vec::new();
    let mut offset = 0;
    for (name, t) in model.params().iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: model.kind(),
        config: model.config_json(),
        model_card: model.model_card(),
        params,
    };
    let header = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in model.params().iter() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads the header and the raw values.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if !bytes.starts_with(MAGIC) || bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
    let header_len = u64::from_le_bytes(len) as usize;
    let start = MAGIC.len() + 8;
    let body = start
        .checked_add(header_len)
        .filter(|&b| b <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[start..body])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
    }
    if (bytes.len() - body) % 8 != 0 {
        return Err(Error::Checkpoint("value section is not a whole number of f64".into()));
    }
    let values = bytes[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, values))
}

/// Loads parameters into `model` after verifying that the checkpoint was
/// written by a model with the same kind and configuration.
pub fn load_checkpoint(path: &Path, model: &mut dyn TrainableModel) -> Result<CheckpointHeader> {
    let (header, values) = read_checkpoint(path)?;
    if header.kind != model.kind() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds a {} model, expected {}",
            header.kind.label(),
            model.kind().label()
        )));
    }
    if header.config != model.config_json() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint config {} differs from model config {}",
            header.config,
            model.config_json()
        )));
    }
    let store = model.params_mut();
    if header.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{} parameters in checkpoint, {} in model",
            header.params.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&header.params) {
        if store.name(id) != entry.name || store.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!("parameter {} does not match the model", entry.name)));
        }
        let len = store.get(id).len();
        let src = values
            .get(entry.offset..entry.offset + len)
            .ok_or_else(|| Error::Checkpoint(format!("values of {} are truncated", entry.name)))?;
        store.get_mut(id).data_mut().copy_from_slice(src);
    }
    Ok(header)
}
