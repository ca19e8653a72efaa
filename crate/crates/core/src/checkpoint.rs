//! Binary tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "GAPNAVCK"
//! version    u32
//! kind       u32      0 = policy, 1 = auxiliary heads, 2 = optimizer state
//! descriptor u32 length + UTF-8 text (architecture, TOML)
//! count      u32
//! manifest   count × (u32 name length, name, u32 rank, rank × u64 dims)
//! data       f64 values of every tensor in manifest order
//! digest     32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use diffcore::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GAPNAVCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Policy = 0,
    Auxiliary = 1,
    Optimizer = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub descriptor: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        put_str(&mut out, &self.descriptor);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checksum mismatch (truncated or corrupt file)".into()));
        }
        let kind = match r.u32()? {
            0 => Kind::Policy,
            1 => Kind::Auxiliary,
            2 => Kind::Optimizer,
            k => return Err(Error::Format(format!("unknown checkpoint kind {k}"))),
        };
        let descriptor = r.string()?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            manifest.push((name, dims));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, dims) in manifest {
            let n: usize = dims.iter().product();
            let vals = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(&dims, vals).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after tensor data".into()));
        }
        Ok(Checkpoint {
            kind,
            descriptor,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}

/// SHA-256 over names, shapes and values of a tensor list.
pub fn tensors_hash(tensors: &[(String, Tensor)]) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.values() {
            h.update(v.to_le_bytes());
        }
    }
    crate::config::hex(&h.finalize())
}
