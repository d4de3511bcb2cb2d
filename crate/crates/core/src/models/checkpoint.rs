//! Parameter checkpoints.
//!
//! ```text
//! "CFPM" | version u32 | meta_len u32 | meta utf-8 | count u32
//! tensor name_len u32 | name utf-8 | rank u32 | dims u32 × rank | data f64 × Π dims
//! ```
//!
//! Little-endian throughout. `meta` is a free-form architecture description.

use std::fs;
use std::path::Path;

use super::ModelError;
use crate::autodiff::Tensor;

const MAGIC: &[u8; 4] = b"CFPM";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<(), ModelError> {
    let v = u32::try_from(v).map_err(|_| ModelError::Checkpoint {
        offset: buf.len() as u64,
        message: format!("{v} does not fit in u32"),
    })?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint(
    path: &Path,
    meta: &str,
    tensors: &[(String, Tensor)],
) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, meta.len())?;
    buf.extend_from_slice(meta.as_bytes());
    put_u32(&mut buf, tensors.len())?;
    for (name, t) in tensors {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T, ModelError> {
        Err(ModelError::Checkpoint {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => self.fail(format!("truncated: need {n} bytes for {what}")),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn text(&mut self, what: &str) -> Result<String, ModelError> {
        let n = self.u32(what)?;
        let start = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).or_else(|_| {
            self.pos = start;
            self.fail(format!("{what} is not utf-8"))
        })
    }
}

/// Returns the meta string and named tensors in file order.
pub fn read_checkpoint(path: &Path) -> Result<(String, Vec<(String, Tensor)>), ModelError> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("bad magic, expected \"CFPM\"");
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        r.pos -= 4;
        return r.fail(format!("unsupported checkpoint version {version}"));
    }
    let meta = r.text("meta")?;
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.text("tensor name")?;
        let rank = r.u32("rank")?;
        let shape = (0..rank)
            .map(|_| r.u32("dimension"))
            .collect::<Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(len) = len.filter(|&l| l > 0 && shape.iter().all(|&d| d > 0)) else {
            return r.fail(format!("invalid shape {shape:?} for {name}"));
        };
        let raw = r.take(len.saturating_mul(8), &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data).expect("validated shape")));
    }
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((meta, out))
}
