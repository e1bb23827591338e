//! Feature-map dump files.
//!
//! ```text
//! magic   "GHAFMDP\0"
//! u32     version (1)
//! u32     entry count
//! entry:  u32 site, u32 head, u8 kind (0 value, 1 attention, 2 output),
//!         u32 rank, u64 × rank extents, f64 × Π extents values
//! ```
//!
//! All integers and floats are little-endian. Each entry is one head's slice
//! `[batch, seq, D]` of one feature map.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::checkpoint::write_atomic;
use crate::model::{FmKind, HeadFeatureMaps};
use crate::numerics::Real;

pub const DUMP_MAGIC: &[u8; 8] = b"GHAFMDP\0";

#[derive(Debug, Clone, PartialEq)]
pub struct FmDumpEntry {
    pub site: usize,
    pub head: usize,
    pub kind: FmKind,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

/// Splits every captured feature map into per-head entries.
pub fn dump_entries<T: Real>(fms: &HeadFeatureMaps<T>) -> Vec<FmDumpEntry> {
    let mut out = Vec::new();
    for (site, layer) in fms.layers.iter().enumerate() {
        for kind in FmKind::ALL {
            let t = layer.get(kind);
            let s = t.shape();
            let (b, h, inner) = (s[0], s[1], s[2] * s[3]);
            for head in 0..h {
                let mut values = Vec::with_capacity(b * inner);
                for bi in 0..b {
                    let base = (bi * h + head) * inner;
                    values.extend(t.data()[base..base + inner].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
                }
                out.push(FmDumpEntry { site, head, kind, dims: vec![b, s[2], s[3]], values });
            }
        }
    }
    out
}

pub fn encode_dump(entries: &[FmDumpEntry]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DUMP_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.site as u32).to_le_bytes());
        buf.extend_from_slice(&(e.head as u32).to_le_bytes());
        buf.push(e.kind.code());
        buf.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &e.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::malformed(self.origin, "truncated feature-map dump"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_dump(bytes: &[u8], origin: &Path) -> Result<Vec<FmDumpEntry>> {
    let mut r = Reader { bytes, pos: 0, origin };
    if r.take(8)? != DUMP_MAGIC {
        return Err(Error::malformed(origin, "not a feature-map dump"));
    }
    let version = r.u32()?;
    if version != 1 {
        return Err(Error::malformed(origin, format!("unsupported dump version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let site = r.u32()? as usize;
        let head = r.u32()? as usize;
        let kind = FmKind::from_code(r.take(1)?[0]).ok_or_else(|| Error::malformed(origin, "bad kind code"))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::malformed(origin, "extent overflow"))?)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push(FmDumpEntry { site, head, kind, dims, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::malformed(origin, "trailing bytes after feature-map dump"));
    }
    Ok(out)
}

pub fn write_dump(path: &Path, entries: &[FmDumpEntry]) -> Result<()> {
    write_atomic(path, &encode_dump(entries))
}

pub fn read_dump(path: &Path) -> Result<Vec<FmDumpEntry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dump(&bytes, path)
}
