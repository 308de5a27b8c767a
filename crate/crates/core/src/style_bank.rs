//! Persistent per-domain store of accumulated style statistics.
//!
//! On-disk layout (all integers and floats little-endian):
//!
//! ```text
//! magic   b"MSBK"
//! version u32 (= 1)
//! domains u32
//! repeated per domain, ascending id:
//!   domain_id u32 | channels u32 | count u64 | mean f64 x channels | std f64 x channels
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::style_stats::StyleStats;

pub const BANK_MAGIC: &[u8; 4] = b"MSBK";
pub const BANK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StyleBank<T> {
    entries: BTreeMap<u32, StyleStats<T>>,
}

impl<T: Scalar> StyleBank<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn domains(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }

    /// Channel count shared by every entry, if any entry exists.
    pub fn channels(&self) -> Option<usize> {
        self.entries.values().next().map(|s| s.channels())
    }

    /// Stores `stats` under `domain_id`, merging into an existing entry by a
    /// count-weighted running average of means and standard deviations.
    pub fn save(&mut self, domain_id: u32, stats: &StyleStats<T>) -> Result<()> {
        if stats.count() == 0 {
            return Err(Error::data("cannot save empty style stats"));
        }
        if stats.mean().iter().chain(stats.std()).any(|v| !v.is_finite()) {
            return Err(Error::data("refusing to store non-finite style stats"));
        }
        if let Some(c) = self.channels() {
            if c != stats.channels() {
                return Err(Error::dim(format!(
                    "bank holds {c}-channel stats, got {}",
                    stats.channels()
                )));
            }
        }
        let merged = match self.entries.get(&domain_id) {
            None => stats.clone(),
            Some(old) => {
                let n = old.count();
                let m = stats.count();
                let total = n.checked_add(m).ok_or_else(|| Error::data("bank count overflow"))?;
                let (wn, wm, wt) = (
                    T::from_u64(n).expect("count fits scalar"),
                    T::from_u64(m).expect("count fits scalar"),
                    T::from_u64(total).expect("count fits scalar"),
                );
                let avg = |a: &[T], b: &[T]| -> Vec<T> {
                    a.iter().zip(b).map(|(&x, &y)| (wn * x + wm * y) / wt).collect()
                };
                let merged = StyleStats::new(
                    avg(old.mean(), stats.mean()),
                    avg(old.std(), stats.std()),
                    total,
                )?;
                if merged.mean().iter().chain(merged.std()).any(|v| !v.is_finite()) {
                    return Err(Error::data("merge produced non-finite stats"));
                }
                merged
            }
        };
        self.entries.insert(domain_id, merged);
        Ok(())
    }

    /// Accumulated stats for `domain_id`; `None` is an explicit miss.
    pub fn load(&self, domain_id: u32) -> Option<&StyleStats<T>> {
        self.entries.get(&domain_id)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (&id, s) in &self.entries {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&(s.channels() as u32).to_le_bytes());
            out.extend_from_slice(&s.count().to_le_bytes());
            for v in s.mean().iter().chain(s.std()) {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != BANK_MAGIC {
            return Err(Error::parse("style bank: bad magic bytes"));
        }
        let version = r.u32()?;
        if version != BANK_VERSION {
            return Err(Error::parse(format!(
                "style bank: unsupported version {version} (expected {BANK_VERSION})"
            )));
        }
        let n = r.u32()?;
        let mut entries = BTreeMap::new();
        let mut channels = None;
        for _ in 0..n {
            let id = r.u32()?;
            let c = r.u32()? as usize;
            let count = r.u64()?;
            if c == 0 || count == 0 {
                return Err(Error::parse(format!("style bank: empty entry for domain {id}")));
            }
            if *channels.get_or_insert(c) != c {
                return Err(Error::parse("style bank: entries disagree on channel count"));
            }
            if r.remaining() < c.saturating_mul(16) {
                return Err(Error::parse("style bank: truncated stream"));
            }
            let mut read_vec = || -> Result<Vec<T>> {
                (0..c)
                    .map(|_| {
                        let v = r.f64()?;
                        if !v.is_finite() {
                            return Err(Error::parse(format!(
                                "style bank: non-finite value for domain {id}"
                            )));
                        }
                        Ok(T::lit(v))
                    })
                    .collect()
            };
            let mean = read_vec()?;
            let std = read_vec()?;
            let stats = StyleStats::new(mean, std, count)
                .map_err(|e| Error::parse(format!("style bank: domain {id}: {e}")))?;
            if entries.insert(id, stats).is_some() {
                return Err(Error::parse(format!("style bank: duplicate domain {id}")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::parse("style bank: trailing bytes after last entry"));
        }
        Ok(Self { entries })
    }

    /// Writes atomically: temp file in the same directory, then rename.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::parse("style bank: truncated stream"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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
}
