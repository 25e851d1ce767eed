//! Binary checkpoints.
//!
//! Layout: `b"FEWB1"`, `u32` parameter count, then per parameter a `u32`
//! name length, UTF-8 name, `u32` rank, `u64` dims and raw `f64` values.
//! Integers and floats are little-endian.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::AgentNetworks;
use crate::autodiff::Tensor;

pub const MAGIC: &[u8; 5] = b"FEWB1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected 1)")]
    VersionMismatch { found: char },
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
    #[error("checkpoint does not match the network: {0}")]
    Mismatch(String),
}

pub fn write_checkpoint(nets: &AgentNetworks, mut w: impl Write) -> Result<(), CheckpointError> {
    let params: Vec<_> = nets.params().collect();
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        let name = p.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value().shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value().data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads every tensor in a checkpoint, keyed by parameter name.
pub fn read_tensors(mut r: impl Read) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        if &magic[..4] == b"FEWB" {
            return Err(CheckpointError::VersionMismatch {
                found: magic[4] as char,
            });
        }
        return Err(CheckpointError::BadMagic);
    }
    let truncated = |_| CheckpointError::Malformed("unexpected end of file".into());
    let mut u32_buf = [0u8; 4];
    let mut u64_buf = [0u8; 8];
    r.read_exact(&mut u32_buf).map_err(truncated)?;
    let count = u32::from_le_bytes(u32_buf) as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        r.read_exact(&mut u32_buf).map_err(truncated)?;
        let mut name = vec![0u8; u32::from_le_bytes(u32_buf) as usize];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        r.read_exact(&mut u32_buf).map_err(truncated)?;
        let rank = u32::from_le_bytes(u32_buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u64_buf).map_err(truncated)?;
            shape.push(u64::from_le_bytes(u64_buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Loads weights into an already-built set of networks. Every parameter
/// must be present with a matching shape.
pub fn read_checkpoint(nets: &mut AgentNetworks, r: impl Read) -> Result<(), CheckpointError> {
    let mut tensors: HashMap<String, Tensor> = read_tensors(r)?.into_iter().collect();
    for net in nets.networks_mut() {
        for p in net.params_mut() {
            let t = tensors
                .remove(p.name())
                .ok_or_else(|| CheckpointError::Mismatch(format!("missing parameter {}", p.name())))?;
            p.assign(&t).map_err(|e| CheckpointError::Mismatch(format!("{}: {e}", p.name())))?;
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::Mismatch(format!("unexpected parameter {extra}")));
    }
    Ok(())
}

pub fn save(nets: &AgentNetworks, path: &Path) -> Result<(), CheckpointError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(nets, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(nets: &mut AgentNetworks, path: &Path) -> Result<(), CheckpointError> {
    read_checkpoint(nets, std::io::BufReader::new(std::fs::File::open(path)?))
}
