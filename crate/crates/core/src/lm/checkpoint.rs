//! Versioned binary checkpoints.
//!
//! ```text
//! magic            8 bytes   "GPLMCKPT"
//! version          u32 LE
//! step             u64 LE
//! config length    u64 LE, then that many bytes of JSON (LmConfig)
//! tensor count     u64 LE
//! per tensor       u64 LE element count, then f32 LE values
//! ```
//! Tensors appear in [`Layout`](super::Layout) order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{LmConfig, LmError, LmModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GPLMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &LmModel, mut w: W) -> Result<(), LmError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&model.step.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.config).map_err(|e| LmError::Checkpoint(e.to_string()))?;
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(model.layout.tensors.len() as u64).to_le_bytes())?;
    for t in &model.layout.tensors {
        let data = &model.params[t.range.clone()];
        w.write_all(&(data.len() as u64).to_le_bytes())?;
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, LmError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<LmModel, LmError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(LmError::Checkpoint("bad magic".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != CHECKPOINT_VERSION {
        return Err(LmError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let step = read_u64(&mut r)?;
    let cfg_len = read_u64(&mut r)? as usize;
    if cfg_len > 1 << 20 {
        return Err(LmError::Checkpoint("implausible config length".into()));
    }
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg)?;
    let config: LmConfig =
        serde_json::from_slice(&cfg).map_err(|e| LmError::Checkpoint(e.to_string()))?;
    config.validate()?;
    let layout = super::Layout::new(&config);
    let count = read_u64(&mut r)? as usize;
    if count != layout.tensors.len() {
        return Err(LmError::Checkpoint(format!(
            "expected {} tensors, found {count}",
            layout.tensors.len()
        )));
    }
    let mut params = vec![0.0f32; layout.total];
    for t in &layout.tensors {
        let len = read_u64(&mut r)? as usize;
        if len != t.range.len() {
            return Err(LmError::Checkpoint(format!(
                "tensor {} has {len} values, expected {}",
                t.name,
                t.range.len()
            )));
        }
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)?;
        for (dst, chunk) in params[t.range.clone()]
            .iter_mut()
            .zip(bytes.chunks_exact(4))
        {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    LmModel::from_parts(config, params, step)
}

pub fn save_checkpoint(model: &LmModel, path: &Path) -> Result<(), LmError> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LmModel, LmError> {
    read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))
}

/// SHA-256 of the serialized checkpoint, hex encoded.
pub fn checkpoint_hash(model: &LmModel) -> String {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).expect("writing to memory cannot fail");
    hex::encode(Sha256::digest(&buf))
}
