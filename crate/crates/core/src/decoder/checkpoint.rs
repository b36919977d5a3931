//! Binary parameter checkpoints: magic `SERD`, version, then one block per
//! parameter (name, shape, `f32` payload), all little-endian.

use std::path::Path;

use crate::diffcore::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SERD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("byte offset {offset}: {message}")]
    Format { offset: usize, message: String },
}

fn format_err(offset: usize, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Format {
        offset,
        message: message.into(),
    }
}

/// Serializes in name order. Values are stored as `f32`.
pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let mut store = ParamStore::new();
    while r.pos < bytes.len() {
        let at = r.pos;
        let n = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| format_err(at + 4, "name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("shape")? as usize);
        }
        let len: usize = shape.iter().product();
        let data = r
            .take(4 * len, &format!("payload of `{name}`"))?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format_err(at, format!("`{name}`: {e}")))?;
        if store.contains(&name) {
            return Err(format_err(at, format!("duplicate parameter `{name}`")));
        }
        store.insert(name, t);
    }
    Ok(store)
}

pub fn write_checkpoint(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    Ok(std::fs::write(path, encode_checkpoint(store))?)
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore, CheckpointError> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Rounds every value through `f32`, matching what a checkpoint stores.
pub fn round_to_f32(store: &mut ParamStore) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        if let Some(t) = store.get_mut(&n) {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}
