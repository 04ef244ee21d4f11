//! Binary checkpoint format.
//!
//! ```text
//! "PAGN" | version u32 | tensor count u32
//! per tensor: name len u16 | name (UTF-8) | rank u8 | dims u32 x rank | f32 x numel
//! trailing: ModelConfig as sorted key=value lines (UTF-8)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, ModelError, ParameterStore};
use crate::autodiff::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"PAGN";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<T: Real>(params: &ParameterStore<T>, config_text: &str) -> Result<Vec<u8>, ModelError> {
    let mut buf = Vec::with_capacity(16 + params.num_values() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| ModelError::Checkpoint(format!("tensor name too long: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    buf.extend_from_slice(config_text.as_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes tensors and the trailing text block.
pub fn decode<T: Real>(buf: &[u8]) -> Result<(ParameterStore<T>, String), ModelError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| ModelError::Checkpoint(format!("tensor name: {e}")))?
            .to_owned();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if rank == 0 || shape.contains(&0) {
            return Err(ModelError::Checkpoint(format!("tensor {name} has invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        store.register(name, Tensor::new(shape, data))?;
    }
    let text = std::str::from_utf8(&buf[r.pos..])
        .map_err(|e| ModelError::Checkpoint(format!("config block: {e}")))?
        .to_owned();
    Ok((store, text))
}

pub fn save<T: Real>(model: &Model<T>, path: &Path) -> Result<(), ModelError> {
    fs::write(path, encode(&model.params, &model.config.to_text())?)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<Model<T>, ModelError> {
    from_bytes(&fs::read(path)?)
}

pub fn from_bytes<T: Real>(buf: &[u8]) -> Result<Model<T>, ModelError> {
    let (params, text) = decode(buf)?;
    let config = ModelConfig::from_text(&text)?;
    config.validate()?;
    params.check_layout(&config)?;
    Ok(Model { config, params })
}
