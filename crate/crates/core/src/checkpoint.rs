//! Single-file checkpoint container.
//!
//! ```text
//! magic     4 bytes  "PSCK"
//! version   u32 LE   (1)
//! manifest  u64 LE length, then UTF-8 JSON (CheckpointManifest)
//! entries   u32 LE count, then per entry:
//!             u32 LE name length, UTF-8 name, u64 LE offset, u64 LE length
//! payload   tensor records (see `tensor::io`) at the listed absolute offsets
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{Architecture, Network, NetworkConfig};
use crate::pooling::PoolSpec;
use crate::tensor::{io as tensor_io, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"PSCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch: Architecture,
    pub pool: PoolSpec,
    pub input_channels: usize,
    pub output_relu: bool,
    pub seed: u64,
    pub epoch: usize,
    pub val_mae: Option<f64>,
    pub dtype: String,
}

impl CheckpointManifest {
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            arch: self.arch,
            pool: self.pool.clone(),
            input_channels: self.input_channels,
            output_relu: self.output_relu,
        }
    }
}

/// Training provenance stored alongside the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    pub epoch: usize,
    pub val_mae: Option<f64>,
}

pub fn encode<T: Element>(net: &Network<T>, provenance: Provenance) -> Result<Vec<u8>> {
    let cfg = net.config();
    let manifest = CheckpointManifest {
        arch: cfg.arch,
        pool: cfg.pool.clone(),
        input_channels: cfg.input_channels,
        output_relu: cfg.output_relu,
        seed: provenance.seed,
        epoch: provenance.epoch,
        val_mae: provenance.val_mae,
        dtype: T::DTYPE.name().to_string(),
    };
    let manifest = serde_json::to_vec(&manifest)?;
    let blobs: Vec<(&str, Vec<u8>)> = net
        .parameters()
        .iter()
        .map(|p| (p.name.as_str(), tensor_io::encode(&p.tensor)))
        .collect();

    let toc_len: usize = blobs.iter().map(|(name, _)| 4 + name.len() + 16).sum();
    let mut offset = (4 + 4 + 8 + manifest.len() + 4 + toc_len) as u64;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, blob) in &blobs {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        offset += blob.len() as u64;
    }
    for (_, blob) in blobs {
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint; stored tensors are converted to `T`.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<(Network<T>, CheckpointManifest)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let manifest_len = cur.u64()? as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(cur.take(manifest_len)?)?;
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::format("checkpoint", "entry name is not UTF-8"))?
            .to_string();
        let offset = cur.u64()? as usize;
        let len = cur.u64()? as usize;
        let blob = offset
            .checked_add(len)
            .and_then(|end| bytes.get(offset..end))
            .ok_or_else(|| Error::format("checkpoint", format!("entry `{name}` out of bounds")))?;
        let tensor: Tensor<T> = tensor_io::decode(blob)?;
        tensors.push((name, tensor));
    }
    let net = Network::from_parameters(manifest.network_config(), tensors)?;
    Ok((net, manifest))
}

pub fn save<T: Element>(net: &Network<T>, provenance: Provenance, path: &Path) -> Result<()> {
    fs::write(path, encode(net, provenance)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Element>(path: &Path) -> Result<(Network<T>, CheckpointManifest)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
