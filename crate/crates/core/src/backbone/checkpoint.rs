//! Single-file parameter archive.
//!
//! Layout: the 8-byte magic `PCARCH01`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every tensor's `f64` values in little-endian
//! order, in the sequence the header lists them. Raw bytes keep save/load
//! bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Backbone, BackboneParams, EncoderConfig, FreezePolicy, Tensor, Tokenizer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PCARCH01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_archive(path: &Path, meta: Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let header = Header {
        meta,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
    let total: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut buf = Vec::with_capacity(16 + header_bytes.len() + 8 * total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<(Value, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a parameter archive",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..body_start])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut offset = body_start;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let len: usize = entry.shape.iter().product();
        let end = offset + 8 * len;
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} runs past end of file",
                entry.name
            )));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset = end;
        tensors.push((entry.name, Tensor::from_vec(&entry.shape, data)));
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((header.meta, tensors))
}

#[derive(Serialize, Deserialize)]
struct BackboneMeta {
    kind: String,
    config: EncoderConfig,
    vocabulary: Tokenizer,
    freeze_policy: FreezePolicy,
}

/// Moves tensors out of `loaded` into `target` by name, checking shapes.
pub(crate) fn restore_into(
    loaded: &mut Vec<(String, Tensor)>,
    name: &str,
    target: &mut Tensor,
) -> Result<()> {
    let pos = loaded
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    let (_, t) = loaded.swap_remove(pos);
    if t.shape() != target.shape() {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has shape {:?}, expected {:?}",
            t.shape(),
            target.shape()
        )));
    }
    *target = t;
    Ok(())
}

impl Backbone {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(BackboneMeta {
            kind: "backbone".into(),
            config: self.config().clone(),
            vocabulary: self.tokenizer_ref().clone(),
            freeze_policy: self.freeze_policy,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_archive(path, meta, &self.params.named_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, mut tensors) = read_archive(path)?;
        let meta: BackboneMeta = serde_json::from_value(meta)
            .map_err(|e| Error::Checkpoint(format!("bad backbone metadata: {e}")))?;
        if meta.kind != "backbone" {
            return Err(Error::Checkpoint(format!(
                "expected a backbone archive, found {:?}",
                meta.kind
            )));
        }
        meta.config.validate()?;
        let mut params = BackboneParams::init(&meta.config);
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, target) in names.iter().zip(params.tensors_mut()) {
            restore_into(&mut tensors, name, target)?;
        }
        Backbone::from_parts(meta.config, meta.vocabulary, params, meta.freeze_policy)
    }

    fn tokenizer_ref(&self) -> &Tokenizer {
        super::MaskedLanguageModel::tokenizer(self)
    }
}
