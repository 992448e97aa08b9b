//! Binary checkpoint format for trained models.
//!
//! Layout: the magic bytes `RULC`, a little-endian u32 format version, a
//! little-endian u64 JSON header length, the JSON header (model config,
//! preprocessing model, training metadata), then one record per parameter
//! in name order: u32 name length, the UTF-8 name, u32 rank, u32 dims,
//! and the values as little-endian f32. Writes go through a temporary
//! file and an atomic rename, so a crash never leaves a torn checkpoint.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ParamStore};
use crate::prep::PreprocessModel;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RULC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT: &str = "checkpoint-v1";

/// Summary of the training run that produced a checkpoint.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainMeta {
    pub dataset: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
}

/// Everything a checkpoint stores besides the raw tensors.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub preprocess: PreprocessModel,
    pub meta: TrainMeta,
}

/// A deserialized checkpoint: header plus parameter store.
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize a checkpoint to bytes.
pub fn to_bytes(
    config: &ModelConfig,
    preprocess: &PreprocessModel,
    meta: &TrainMeta,
    params: &ParamStore<f32>,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        config: config.clone(),
        preprocess: preprocess.clone(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("checkpoint header serialization: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (name, param) in params.iter() {
        let bytes = name.as_bytes();
        put_u32(&mut buf, bytes.len() as u32);
        buf.extend_from_slice(bytes);
        put_u32(&mut buf, param.value.shape().len() as u32);
        for &d in param.value.shape() {
            put_u32(&mut buf, d as u32);
        }
        for &v in param.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

/// Deserialize a checkpoint, validating every tensor against the config's
/// parameter skeleton. Every parameter must be present exactly once.
pub fn from_bytes(data: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { data, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let json_len = cur.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(cur.take(json_len)?)
        .map_err(|e| Error::Format(format!("checkpoint header parse: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "unsupported checkpoint format '{}'",
            header.format
        )));
    }
    header.config.validate()?;

    let mut params: ParamStore<f32> = init_params(&header.config, 0)?;
    let mut filled: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    while !cur.done() {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("checkpoint parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let expected = params.get(&name).map_err(|_| {
            Error::Format(format!("checkpoint carries unknown parameter '{name}'"))
        })?;
        if expected.value.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "checkpoint parameter '{name}' has shape {:?}, expected {:?}",
                shape,
                expected.value.shape()
            )));
        }
        if !filled.insert(name.clone()) {
            return Err(Error::Format(format!(
                "checkpoint parameter '{name}' appears twice"
            )));
        }
        params.set_value(&name, Tensor::new(shape, values)?)?;
    }
    let missing: Vec<&String> = params
        .iter()
        .map(|(n, _)| n)
        .filter(|n| !filled.contains(*n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint is missing {} parameter(s), first: '{}'",
            missing.len(),
            missing[0]
        )));
    }
    Ok(Checkpoint { header, params })
}

/// Write a checkpoint atomically (temp file + rename).
pub fn save(
    path: &Path,
    config: &ModelConfig,
    preprocess: &PreprocessModel,
    meta: &TrainMeta,
    params: &ParamStore<f32>,
) -> Result<()> {
    let bytes = to_bytes(config, preprocess, meta, params)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = path.with_extension("tmp");
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read and validate a checkpoint file.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
    from_bytes(&data)
}

/// Hex SHA-256 digest of an in-memory byte slice (for digest-suffixed
/// artifact filenames).
pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    use std::fmt::Write as _;
    let mut hex = String::with_capacity(64);
    for b in hasher.finalize() {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

/// Hex SHA-256 digest of a checkpoint file's bytes.
pub fn digest(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    use std::fmt::Write as _;
    let mut hex = String::with_capacity(64);
    for b in hasher.finalize() {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}
