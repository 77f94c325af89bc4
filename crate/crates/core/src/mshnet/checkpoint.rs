//! Versioned binary checkpoint container.
//!
//! ```text
//! "MSHN1"                      5-byte magic
//! u32 format version
//! u32 n, n bytes               UNetConfig as JSON (carries the seed)
//! u32 parameter count
//! per parameter, sorted by name:
//!   u32 n, n bytes             UTF-8 name
//!   u32 rank, rank x u64       shape
//!   numel x f64                values
//! 32 bytes                     SHA-256 of everything above
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelError, ModelParams, MshNet, Result, UNetConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MSHN1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn encode(net: &MshNet) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(net.config()).expect("config serializes");
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for (name, t) in net.params() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::Corrupt("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<MshNet> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + DIGEST_LEN {
        return Err(ModelError::Checksum);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(ModelError::Checksum);
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let n = r.u32()? as usize;
    let config: UNetConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| ModelError::Corrupt(format!("config block: {e}")))?;
    let count = r.u32()?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| ModelError::Corrupt("parameter name".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| ModelError::Corrupt("shape overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(ModelError::Corrupt("trailing bytes".into()));
    }
    MshNet::from_params(config, params)
}

pub fn save_checkpoint(net: &MshNet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(net))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MshNet> {
    decode(&fs::read(path)?)
}

/// Loads a checkpoint and insists it was written for `expected`
/// (architecture fields; the seed is allowed to differ).
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &UNetConfig) -> Result<MshNet> {
    let net = load_checkpoint(path)?;
    let c = net.config();
    let same = c.input_size == expected.input_size
        && c.base_channels == expected.base_channels
        && c.channel_multipliers == expected.channel_multipliers
        && c.instance_norm == expected.instance_norm;
    if !same {
        return Err(ModelError::ConfigMismatch(format!("checkpoint has {c:?}, expected {expected:?}")));
    }
    Ok(net)
}
