//! Model checkpoints.
//!
//! ```text
//! "VCK1"
//! u32 config_len, config_len bytes of UTF-8 `key=value` lines
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 rows, u32 cols, rows*cols f64
//! ```
//!
//! All integers and reals are little endian, payloads row-major. Config lines
//! whose key starts with `meta.` are free-form metadata.

use std::fs;
use std::path::Path;

use crate::config::parse_pairs;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, metadata: Vec<(String, String)>) -> Self {
        Self {
            config: model.config().clone(),
            metadata,
            tensors: model.named_tensors(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_named_tensors(self.config, self.tensors)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut text = String::new();
        for (k, v) in self.config.to_pairs() {
            text.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::InvalidArgument(format!(
                    "unencodable metadata key {k:?}"
                )));
            }
            text.push_str(&format!("meta.{k}={v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for (name, m) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, m.rows())?;
            put_u32(&mut out, m.cols())?;
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "bad magic, expected \"VCK1\""));
        }
        let len = r.u32()?;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(origin, "config block is not UTF-8"))?;
        let mut config = ModelConfig::default();
        let mut metadata = Vec::new();
        for (line, k, v) in parse_pairs(text, origin)? {
            if let Some(meta) = k.strip_prefix("meta.") {
                metadata.push((meta.to_string(), v));
            } else if !config
                .set_key(&k, &v)
                .map_err(|e| Error::format(origin, format!("config line {line}: {e}")))?
            {
                return Err(Error::format(origin, format!("unknown config key {k:?}")));
            }
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let n = r.u32()?;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::format(origin, "tensor name is not UTF-8"))?
                .to_string();
            let rows = r.u32()?;
            let cols = r.u32()?;
            let payload = r.take(
                rows.checked_mul(cols)
                    .and_then(|x| x.checked_mul(8))
                    .ok_or_else(|| Error::format(origin, format!("tensor {name} is too large")))?,
            )?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                origin,
                format!(
                    "{} trailing bytes after the last tensor",
                    bytes.len() - r.pos
                ),
            ));
        }
        Ok(Self {
            config,
            metadata,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::InvalidArgument(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                self.origin,
                format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}
