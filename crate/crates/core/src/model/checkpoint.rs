//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "ACXCKPT\0"
//! version    u32
//! config     u32 length + UTF-8 JSON of ModelConfig
//! params     u32 count, then per parameter:
//!              u32 name length, name bytes, u32 ndim, ndim x u32 dims,
//!              prod(dims) x f64 values
//! frozen     u32 count, then per name: u32 length, name bytes
//! snapshot   u8 flag; when 1, every parameter's values again in declaration order
//! crc32      u32 over every preceding byte
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{AsrModel, ModelConfig, ModelError, ParameterRegistry};
use crate::autodiff::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ACXCKPT\0";

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

fn put_values(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &AsrModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let config = serde_json::to_string(&model.config).expect("config serializes");
    put_str(&mut buf, &config);
    let reg = &model.params;
    put_u32(&mut buf, reg.len() as u32);
    for (name, t) in reg.iter() {
        put_str(&mut buf, name);
        put_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut buf, d as u32);
        }
        put_values(&mut buf, t.data());
    }
    let frozen = reg.freeze_mask();
    put_u32(&mut buf, frozen.len() as u32);
    for name in &frozen {
        put_str(&mut buf, name);
    }
    match reg.snapshot() {
        Some(snap) => {
            buf.push(1);
            for t in snap {
                put_values(&mut buf, t.data());
            }
        }
        None => buf.push(0),
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ModelError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| ModelError::Checkpoint("name is not UTF-8".into()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<AsrModel, ModelError> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
        return Err(ModelError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ModelError::Integrity { stored, computed });
    }
    let mut cur = Cursor { bytes: body, pos: 8 };
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let config: ModelConfig = serde_json::from_str(&cur.string()?)
        .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
    config.validate()?;
    let mut reg = ParameterRegistry::new();
    for _ in 0..cur.u32()? {
        let name = cur.string()?;
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().product();
        let data = cur.values(n)?;
        reg.insert(name, Tensor::new(shape, data)?)?;
    }
    let frozen = (0..cur.u32()?).map(|_| cur.string()).collect::<Result<Vec<_>, _>>()?;
    reg.set_freeze_mask(frozen.iter().map(String::as_str))?;
    let flag = cur.take(1)?[0];
    if flag == 1 {
        let shapes: Vec<Vec<usize>> = reg.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let mut snap = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let n = shape.iter().product();
            snap.push(Tensor::new(shape, cur.values(n)?)?);
        }
        reg.set_snapshot(Some(snap));
    } else if flag != 0 {
        return Err(ModelError::Checkpoint(format!("bad snapshot flag {flag}")));
    }
    if cur.pos != body.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes",
            body.len() - cur.pos
        )));
    }
    Ok(AsrModel { config, params: reg })
}

pub fn write_checkpoint(model: &AsrModel, path: &Path) -> Result<(), ModelError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(model))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<AsrModel, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
