//! Binary model checkpoints.
//!
//! ```text
//! magic    8 bytes  "TSEGCNCK"
//! version  u32 LE   1
//! meta     u32 LE length, then JSON {"config": ..., "graph": "<graph file text>"}
//! count    u32 LE
//! records  name (u32 length + UTF-8), ndim (u32), dims (u64 each), f64 LE data
//! ```
//!
//! Records hold parameters and normalization buffers together, sorted by name.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tsegcn_core::{ModelConfig, Tensor, TsegcnModel};

use crate::error::{Error, Result};
use crate::skeleton::{format_graph, parse_graph};

pub const MAGIC: &[u8; 8] = b"TSEGCNCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    graph: String,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} too large ({n})")))
}

pub fn encode(model: &TsegcnModel) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Meta {
        config: model.cfg().clone(),
        graph: format_graph(&model.arch.graph),
    })?;
    let mut records: Vec<(&str, &Tensor)> = model
        .params
        .iter()
        .map(|(n, v, _)| (n, v))
        .chain(model.buffers.iter())
        .collect();
    records.sort_by(|a, b| a.0.cmp(b.0));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, len_u32(meta.len(), "metadata")?);
    out.extend_from_slice(&meta);
    put_u32(&mut out, len_u32(records.len(), "record count")?);
    for (name, t) in records {
        put_u32(&mut out, len_u32(name.len(), "name")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, len_u32(t.ndim(), "rank")?);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
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
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TsegcnModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
    let graph = parse_graph(&meta.graph)?;
    let mut model = TsegcnModel::build(meta.config, graph, 0)?;

    let count = r.u32()? as usize;
    let expected = model.params.len() + model.buffers.len();
    if count != expected {
        return Err(Error::Checkpoint(format!("{count} records, model has {expected} tensors")));
    }
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        if prev.as_ref().is_some_and(|p| *p >= name) {
            return Err(Error::Checkpoint(format!("record `{name}` out of order")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let target = match model.params.id(&name) {
            Ok(id) => model.params.value_mut(id),
            Err(_) => model
                .buffers
                .get_mut(&name)
                .map_err(|_| Error::Checkpoint(format!("unknown record `{name}`")))?,
        };
        if target.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {shape:?}, model expects {:?}",
                target.shape()
            )));
        }
        let raw = r.take(target.len() * 8)?;
        for (dst, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        prev = Some(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(path: impl AsRef<Path>, model: &TsegcnModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<TsegcnModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::toy9;

    #[test]
    fn round_trip_restores_every_tensor() {
        let mut m = TsegcnModel::build(ModelConfig::toy(), toy9(), 11).unwrap();
        m.buffers
            .get_mut("blocks.0.gc_norm.running_mean")
            .unwrap()
            .fill(0.25);
        let back = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.buffers.iter().collect::<Vec<_>>(), m.buffers.iter().collect::<Vec<_>>());
        assert_eq!(back.cfg(), m.cfg());
    }

    #[test]
    fn corruption_detected() {
        let m = TsegcnModel::build(ModelConfig::toy(), toy9(), 1).unwrap();
        let bytes = encode(&m).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
    }
}
