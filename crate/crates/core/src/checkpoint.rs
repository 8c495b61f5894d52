//! Binary checkpoint container.
//!
//! Layout (little-endian):
//! `"SSGA1"`, `u32` config length, config as `key = value` text, `u32`
//! parameter count, then per parameter: `u32` name length, name, `u32` rank,
//! `u64` per dimension, `f64` values.

use std::fs;
use std::path::Path;

use crate::config::{ConfigFile, SsgaConfig};
use crate::error::{io_err, Result, SsgaError};
use crate::model::SsgaModel;

pub const MAGIC: &[u8; 5] = b"SSGA1";

pub fn encode(model: &SsgaModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + model.params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    let cfg = model.config.to_kv();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| SsgaError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| SsgaError::Checkpoint("non-UTF-8 string".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<SsgaModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(SsgaError::Checkpoint("missing SSGA1 header".into()));
    }
    let text = r.string()?;
    let mut config = SsgaConfig::default();
    for (key, value) in ConfigFile::pairs(&text)? {
        if !config.set(&key, &value)? {
            return Err(SsgaError::Checkpoint(format!("unknown config key '{key}'")));
        }
    }
    let mut model = SsgaModel::new(config, 0)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(SsgaError::Checkpoint(format!(
            "{count} parameters stored, model declares {}",
            model.params.len()
        )));
    }
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = r.string()?;
        if name != model.params.name(id) {
            return Err(SsgaError::Checkpoint(format!(
                "parameter '{name}' found where '{}' was expected",
                model.params.name(id)
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let target = model.params.get_mut(id);
        if shape != target.shape() {
            return Err(SsgaError::Checkpoint(format!(
                "parameter '{name}' has shape {shape:?}, expected {:?}",
                target.shape()
            )));
        }
        let raw = r.take(target.numel() * 8)?;
        for (dst, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(SsgaError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &SsgaModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<SsgaModel> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SsgaModel {
        let cfg = SsgaConfig {
            num_queries: 4,
            embed_dim: 8,
            feature_dim: 8,
            num_heads: 2,
            decoder_layers: 1,
            pool_size: 2,
            num_stages: 2,
            beta_schedule: vec![1.5, 2.0],
            ..SsgaConfig::default()
        };
        SsgaModel::new(cfg, 5).unwrap()
    }

    #[test]
    fn roundtrip_preserves_config_and_weights() {
        let m = small();
        let back = decode(&encode(&m)).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params, m.params);
        assert_eq!(back.checksum(), m.checksum());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode(&small());
        assert!(decode(b"SSGA0").is_err());
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
