//! Binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "SRPNCKPT"
//! version    u32      1
//! meta_len   u32      byte length of the JSON model config that follows
//! meta       [u8]     ModelConfig as JSON
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name [u8] (UTF-8)
//!   ndim     u32, dims [u64; ndim]
//!   data     [f64; product(dims)]
//! ```

use std::path::Path;

use super::network::{ModelConfig, RpnModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SRPNCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(model: &RpnModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&model.config)?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    let params = model.named_params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint and checks every tensor against the shapes its config implies.
pub fn from_bytes(buf: &[u8]) -> Result<RpnModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    let mut model = RpnModel::zeros(config)?;
    let count = r.u32()? as usize;
    let mut slots = model.named_params_mut();
    if count != slots.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            slots.len()
        )));
    }
    for (expected_name, tensor) in slots.iter_mut() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if name != *expected_name {
            return Err(Error::Checkpoint(format!(
                "expected tensor {expected_name}, found {name}"
            )));
        }
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {dims:?}, config implies {:?}",
                tensor.shape()
            )));
        }
        let raw = r.take(tensor.numel() * 8)?;
        for (dst, chunk) in tensor.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    drop(slots);
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn save(model: &RpnModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<RpnModel> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = RpnModel::init(ModelConfig::default(), 42).unwrap();
        let back = from_bytes(&to_bytes(&model).unwrap()).unwrap();
        for ((n1, a), (n2, b)) in model.named_params().iter().zip(back.named_params()) {
            assert_eq!(*n1, n2);
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(model.config, back.config);
    }

    #[test]
    fn rejects_tampered_shape_naming_the_tensor() {
        let model = RpnModel::init(ModelConfig::default(), 1).unwrap();
        let mut bytes = to_bytes(&model).unwrap();
        // claim a smaller embedding width in the config; tensors no longer fit
        let meta = serde_json::to_vec(&model.config).unwrap();
        let small = serde_json::to_vec(&ModelConfig {
            embed_dim: 16,
            ..model.config.clone()
        })
        .unwrap();
        assert_eq!(meta.len(), small.len());
        bytes[16..16 + meta.len()].copy_from_slice(&small);
        let err = from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("rpn.embed.weight"), "{err}");
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let model = RpnModel::init(ModelConfig::default(), 1).unwrap();
        let bytes = to_bytes(&model).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
    }
}
