//! Versioned checkpoint container: architecture, parameters and the resolved
//! configuration text of the run that produced them.
//!
//! ```text
//! magic "MSCK" | version u32 | scalar-name len u32 + bytes
//! depth u32 | base_channels u32 | num_classes u32
//! config len u32 + UTF-8 bytes
//! tensors u32 | repeated: len u64 + f64 LE values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::style_bank::write_atomic;

use super::{Arch, Params, SegModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: SegModel<T>,
    /// `key=value` lines of the configuration snapshot.
    pub config_text: String,
    /// Scalar type the parameters were trained in.
    pub scalar: String,
}

pub fn write_checkpoint<T: Scalar>(path: &Path, model: &SegModel<T>, config_text: &str) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_bytes(&mut out, T::NAME.as_bytes());
    let a = model.arch();
    for v in [a.depth, a.base_channels, a.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    put_bytes(&mut out, config_text.as_bytes());
    let tensors = model.params().tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::parse("checkpoint: bad magic bytes"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(format!("checkpoint: unsupported version {version}")));
    }
    let scalar = r.string()?;
    let depth = r.u32()? as usize;
    let base_channels = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let config_text = r.string()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::parse("checkpoint: bad tensor length"))?)?;
        let t: Vec<T> = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse("checkpoint: non-finite parameter"));
        }
        tensors.push(t);
    }
    if r.pos != bytes.len() {
        return Err(Error::parse("checkpoint: trailing bytes"));
    }
    let arch = Arch {
        depth,
        base_channels,
        num_classes,
    };
    let model = SegModel::from_params(arch, Params::new(tensors))
        .map_err(|e| Error::parse(format!("checkpoint: {e}")))?;
    Ok(Checkpoint {
        model,
        config_text,
        scalar,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse("checkpoint: truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::parse("checkpoint: text is not UTF-8"))
    }
}
