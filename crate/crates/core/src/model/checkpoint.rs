//! `NSC1` checkpoints.
//!
//! Little-endian: magic `NSC1` | u32 parameter count | per parameter:
//! u16 name length, UTF-8 name, u32 rank, u32 dims…, f32 values. The model
//! configuration lives in a `<checkpoint>.cfg` text sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::atomic_write;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SamplerModel};
use crate::numerics::Array;

pub const NSC_MAGIC: &[u8; 4] = b"NSC1";

pub fn config_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".cfg");
    path.with_file_name(name)
}

pub fn encode_checkpoint(model: &SamplerModel) -> Vec<u8> {
    let store = model.params();
    let mut buf = Vec::new();
    buf.extend_from_slice(NSC_MAGIC);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!(
                    "truncated checkpoint: need {} bytes at offset {}, file has {}",
                    n,
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses parameters as `(name, array)` pairs.
pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Array)>> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(4)? != NSC_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((name, Array::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last parameter"));
    }
    Ok(out)
}

impl SamplerModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &encode_checkpoint(self))?;
        atomic_write(&config_path(path), self.config().to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg_path = config_path(path);
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg = ModelConfig::from_text(&text)?;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let params = decode_checkpoint(path, &bytes)?;
        let mut model = SamplerModel::new(cfg, 0)?;
        if params.len() != model.params().len() {
            return Err(Error::format(
                path,
                format!(
                    "checkpoint has {} parameters, config implies {}",
                    params.len(),
                    model.params().len()
                ),
            ));
        }
        for (name, value) in params {
            let id = model
                .params()
                .find(&name)
                .ok_or_else(|| Error::format(path, format!("unknown parameter {name}")))?;
            let slot = &mut model.params_mut().get_mut(id).value;
            if slot.shape() != value.shape() {
                return Err(Error::format(
                    path,
                    format!(
                        "parameter {name}: shape {:?}, expected {:?}",
                        value.shape(),
                        slot.shape()
                    ),
                ));
            }
            *slot = value;
        }
        Ok(model)
    }
}
