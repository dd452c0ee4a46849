//! Self-describing checkpoint archive.
//!
//! Layout: magic, JSON-encoded `ModelConfig` (length-prefixed), tensor
//! count, then per tensor: name, rows, cols, row-major f32 little-endian
//! data. Loading and re-saving reproduces the file byte-for-byte.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Params};

const MAGIC: &[u8; 8] = b"AGMCKPT1";

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let config_json = serde_json::to_vec(&model.config)?;
    buf.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config_json);
    buf.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for (name, tensor) in model.params().iter() {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let (rows, cols) = tensor.dim();
        buf.extend_from_slice(&(rows as u64).to_le_bytes());
        buf.extend_from_slice(&(cols as u64).to_le_bytes());
        for &v in tensor.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    // Atomic write: a reader never sees a partially written checkpoint.
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut data = Vec::new();
    fs::File::open(path)
        .map_err(|e| {
            Error::missing(format!("checkpoint {}: {e}", path.display()))
        })?
        .read_to_end(&mut data)?;
    let mut cur = Cursor { data: &data, at: 0 };

    let magic = cur.bytes(8)?;
    if magic != MAGIC {
        return Err(Error::schema(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let config_len = cur.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(cur.bytes(config_len)?)?;
    config
        .validate()
        .map_err(|e| Error::schema(format!("checkpoint config invalid: {e}")))?;

    let count = cur.u64()? as usize;
    let mut params = Params::default();
    for _ in 0..count {
        let name_len = cur.u64()? as usize;
        let name = std::str::from_utf8(cur.bytes(name_len)?)
            .map_err(|_| Error::schema("non-utf8 tensor name"))?
            .to_string();
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::schema("tensor shape overflow"))?;
        let raw = cur.bytes(n * 4)?;
        let mut values = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            values.push(f64::from(v));
        }
        let tensor = Mat::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::schema(format!("tensor {name}: {e}")))?;
        params.insert(name, tensor);
    }
    if cur.at != data.len() {
        return Err(Error::schema("trailing bytes after checkpoint payload"));
    }
    Model::from_parts(config, params)
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.data.len() {
            return Err(Error::schema("truncated checkpoint"));
        }
        let out = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
