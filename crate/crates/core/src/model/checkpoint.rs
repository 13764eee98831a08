//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "MSHC" | version | header_len | header (canonical JSON) | record_count
//! record := name_len | name (UTF-8) | rank | dims[rank] | f32 data
//! ```
//!
//! The JSON header has sorted keys and no whitespace, so equal states always
//! serialize to equal bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::{ModelConfig, ModelState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSHC";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub bands: usize,
    pub classes: usize,
    pub seed: u64,
    /// Free-form metadata, such as training progress.
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &ModelState) -> Self {
        let records = model.params.iter().map(|(name, p)| (format!("{PARAM_PREFIX}{name}"), p.value.clone())).collect();
        Checkpoint {
            header: CheckpointHeader {
                model: model.config.clone(),
                bands: model.bands,
                classes: model.classes,
                seed: model.seed,
                meta: serde_json::Value::Null,
            },
            records,
        }
    }

    /// Rebuilds the model, requiring the stored parameters to match the
    /// configuration's parameter set exactly in names and shapes.
    pub fn to_model(&self) -> Result<ModelState> {
        let h = &self.header;
        let mut model = ModelState::new(h.model.clone(), h.bands, h.classes, h.seed)
            .map_err(|e| Error::Mismatch(format!("checkpoint header is not a valid model: {e}")))?;
        let stored: Vec<(&str, &Tensor)> =
            self.records.iter().filter_map(|(n, t)| n.strip_prefix(PARAM_PREFIX).map(|n| (n, t))).collect();
        if stored.len() != model.params.len() {
            return Err(Error::Mismatch(format!(
                "checkpoint holds {} parameter tensors, the configuration defines {}",
                stored.len(),
                model.params.len()
            )));
        }
        for (name, t) in stored {
            let slot = model.params.get_mut(name)?;
            if slot.shape() != t.shape() {
                return Err(Error::Mismatch(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint, {:?} in the model",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(model)
    }

    pub fn record(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.records.push((name.into(), value));
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_string(&serde_json::to_value(&self.header).map_err(json_err)?).map_err(json_err)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION);
        put_u32(&mut buf, len_u32(header.len())?);
        buf.extend_from_slice(header.as_bytes());
        put_u32(&mut buf, len_u32(self.records.len())?);
        for (name, t) in &self.records {
            put_u32(&mut buf, len_u32(name.len())?);
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, len_u32(t.rank())?);
            for &d in t.shape() {
                put_u32(&mut buf, len_u32(d)?);
            }
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| Error::Format(format!("writing checkpoint: {e}")))
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::Format(format!("reading checkpoint: {e}")))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Mismatch(format!("checkpoint format version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let hlen = cur.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(cur.take(hlen)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = cur.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(nlen)?)
                .map_err(|_| Error::Format(format!("record name at byte {} is not UTF-8", cur.pos)))?
                .to_string();
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel.checked_mul(4).ok_or_else(|| Error::Format("record too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as Real).collect();
            records.push((name, Tensor::new(shape, data)?));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last record at offset {}",
                bytes.len() - cur.pos,
                cur.pos
            )));
        }
        Ok(Checkpoint { header, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read_from(BufReader::new(file))
    }
}

impl ModelState {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::from_model(self).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::load(path)?.to_model()
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(format!("checkpoint header: {e}"))
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit the checkpoint format")))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "checkpoint truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
