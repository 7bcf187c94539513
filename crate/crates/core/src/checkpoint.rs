//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            8 bytes  "UNIARKCK"
//! format_version   u32
//! header_len       u64
//! header           header_len bytes of JSON (CheckpointHeader)
//! n_params         u32
//! n_params times:
//!   name_len       u32
//!   name           name_len bytes, UTF-8
//!   trainable      u8 (0 or 1)
//!   ndims          u32
//!   dims           ndims x u64
//!   data           prod(dims) x f64
//! checksum         32 bytes, SHA-256 of everything above
//! ```
//!
//! Parameters appear in the model's canonical order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{init_model, ModelConfig, ModelState, TrainableSet};
use crate::numeric::Tensor;
use crate::world::write_atomic;

pub const MAGIC: &[u8; 8] = b"UNIARKCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    /// Tuning mode that produced the weights (`pretrain`, `adapter`, ...).
    pub mode: String,
    pub trainable: TrainableSet,
    /// Free-form provenance (config hashes, relation id).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn encode_checkpoint(
    state: &ModelState,
    mode: &str,
    trainable: TrainableSet,
    metadata: serde_json::Value,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config: state.config.clone(),
        seed: state.seed,
        mode: mode.to_string(),
        trainable,
        metadata,
    };
    let mask = match state.trainable_mask(trainable) {
        Ok(m) => m,
        Err(_) => state.trainable_mask(TrainableSet::None)?,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    let named = state.named_parameters();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for ((name, _, t), trainable) in named.iter().zip(mask) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(trainable as u8);
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ModelState)> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let header_len = r.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)?;
    let mut state = init_model(&header.config, header.seed)?;
    let expected: Vec<(String, Vec<usize>)> = state
        .named_parameters()
        .into_iter()
        .map(|(n, _, t)| (n, t.shape().to_vec()))
        .collect();
    let n_params = r.u32()? as usize;
    if n_params != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {n_params}",
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(n_params);
    for (want_name, want_shape) in &expected {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != want_name {
            return Err(Error::Checkpoint(format!(
                "expected parameter {want_name}, found {name}"
            )));
        }
        r.take(1)?;
        let ndims = r.u32()? as usize;
        let dims = (0..ndims)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &dims != want_shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {dims:?}, expected {want_shape:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push(Tensor::new(dims, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    state.params = state.params.rebuild(values);
    Ok((header, state))
}

pub fn save_checkpoint(
    path: &Path,
    state: &ModelState,
    mode: &str,
    trainable: TrainableSet,
    metadata: serde_json::Value,
) -> Result<()> {
    write_atomic(path, &encode_checkpoint(state, mode, trainable, metadata)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelState)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    decode_checkpoint(&std::fs::read(path)?)
}
