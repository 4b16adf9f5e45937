//! On-disk tensor container for pyramids, labels, and diagnostics.
//!
//! A file holds one multi-level tensor stack. Layout, all integers
//! little-endian:
//!
//! ```text
//! magic  8 bytes  "PTNS0001"
//! u8     dim          grid axes, 1..=3
//! u8     n_levels     levels in the stack, finest first
//! u8     dtype        0 = f32, 1 = u8 class indices
//! u8     flags        bit0: levels carry retained-node index lists
//! per level:
//!   u32 * dim   per-axis resolution
//!   u32         channels (class count for dtype 1)
//!   u64         payload byte length
//!   [u64 count, count * u64 node indices]   only when flags bit0 is set
//!   payload     node-major values for the stored nodes
//! ```
//!
//! When bit0 is set every level carries an index list; a dense level simply
//! lists all of its nodes. Indices are strictly ascending. For dtype 0 the
//! payload is `stored * channels` f32 values; for dtype 1 it is one u8 class
//! index per stored node, where 255 marks an invalid (label-free) node.
//!
//! Validity is in-band: scalar f32 payloads use NaN for invalid nodes and
//! dtype-1 payloads use 255. Parse failures report the byte offset at which
//! the offending field starts.

use std::path::Path;

use crate::{Error, Result};

/// File magic, also the format version.
pub const MAGIC: &[u8; 8] = b"PTNS0001";

/// Class index marking an unlabeled node in dtype-1 payloads.
pub const INVALID_CLASS: u8 = 255;

const FLAG_SPARSE: u8 = 1;

/// Per-node values of one stored level.
#[derive(Debug, Clone, PartialEq)]
pub enum PtnsPayload {
    /// Node-major f32 channels.
    F32(Vec<f32>),
    /// One class index per node; [`INVALID_CLASS`] marks unlabeled nodes.
    ClassU8(Vec<u8>),
}

impl PtnsPayload {
    fn dtype(&self) -> u8 {
        match self {
            PtnsPayload::F32(_) => 0,
            PtnsPayload::ClassU8(_) => 1,
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            PtnsPayload::F32(v) => v.len() * 4,
            PtnsPayload::ClassU8(v) => v.len(),
        }
    }
}

/// One level of a stored tensor stack.
#[derive(Debug, Clone, PartialEq)]
pub struct PtnsLevel {
    /// Per-axis resolution, `dim` entries.
    pub res: Vec<u32>,
    /// Channels per node; the class count for class-index payloads.
    pub channels: u32,
    /// Stored node indices, ascending, when only a subset of the level is
    /// kept. `None` stores the full level.
    pub retained: Option<Vec<u64>>,
    /// Values for the stored nodes.
    pub payload: PtnsPayload,
}

impl PtnsLevel {
    /// Grid nodes on this level.
    pub fn node_count(&self) -> usize {
        self.res.iter().map(|&r| r as usize).product()
    }

    /// Nodes actually stored (all of them for dense levels).
    pub fn stored_count(&self) -> usize {
        match &self.retained {
            Some(idx) => idx.len(),
            None => self.node_count(),
        }
    }
}

/// A parsed tensor file: levels finest first, all sharing one dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct PtnsFile {
    /// Grid axes, 1..=3.
    pub dim: u8,
    /// Stored levels, finest first.
    pub levels: Vec<PtnsLevel>,
}

impl PtnsFile {
    /// Serializes to the wire format.
    ///
    /// If any level has a retained list, every level is written with one;
    /// dense levels get the identity list.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.dim == 0 || self.dim > 3 {
            return Err(Error::domain(format!("dim must be 1..=3, got {}", self.dim)));
        }
        if self.levels.is_empty() {
            return Err(Error::domain("tensor file needs at least one level"));
        }
        if self.levels.len() > u8::MAX as usize {
            return Err(Error::domain("too many levels for the u8 level count"));
        }
        let dtype = self.levels[0].payload.dtype();
        let sparse = self.levels.iter().any(|l| l.retained.is_some());
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(self.dim);
        out.push(self.levels.len() as u8);
        out.push(dtype);
        out.push(if sparse { FLAG_SPARSE } else { 0 });
        for (i, level) in self.levels.iter().enumerate() {
            self.check_level(i, level, dtype)?;
            for &r in &level.res {
                out.extend_from_slice(&r.to_le_bytes());
            }
            out.extend_from_slice(&level.channels.to_le_bytes());
            out.extend_from_slice(&(level.payload.byte_len() as u64).to_le_bytes());
            if sparse {
                match &level.retained {
                    Some(idx) => {
                        out.extend_from_slice(&(idx.len() as u64).to_le_bytes());
                        for &v in idx {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                    None => {
                        let n = level.node_count() as u64;
                        out.extend_from_slice(&n.to_le_bytes());
                        for v in 0..n {
                            out.extend_from_slice(&v.to_le_bytes());
                        }
                    }
                }
            }
            match &level.payload {
                PtnsPayload::F32(values) => {
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                PtnsPayload::ClassU8(values) => out.extend_from_slice(values),
            }
        }
        Ok(out)
    }

    fn check_level(&self, i: usize, level: &PtnsLevel, dtype: u8) -> Result<()> {
        let at = |msg: String| Error::domain(format!("level {}: {msg}", i + 1));
        if level.res.len() != self.dim as usize {
            return Err(at(format!(
                "has {} axes, expected {}",
                level.res.len(),
                self.dim
            )));
        }
        if level.res.iter().any(|&r| r == 0) || level.channels == 0 {
            return Err(at("axes and channels must be nonzero".into()));
        }
        if level.payload.dtype() != dtype {
            return Err(at("mixed payload dtypes in one file".into()));
        }
        let nodes = level.node_count() as u64;
        if let Some(idx) = &level.retained {
            if idx.len() as u64 > nodes {
                return Err(at("retained list longer than the level".into()));
            }
            if !idx.windows(2).all(|w| w[0] < w[1]) {
                return Err(at("retained indices must be strictly ascending".into()));
            }
            if idx.last().is_some_and(|&v| v >= nodes) {
                return Err(at("retained index out of range".into()));
            }
        }
        let stored = level.stored_count();
        let expected = match &level.payload {
            PtnsPayload::F32(v) => {
                if v.len() != stored * level.channels as usize {
                    return Err(at(format!(
                        "payload has {} values, expected {}",
                        v.len(),
                        stored * level.channels as usize
                    )));
                }
                v.len() * 4
            }
            PtnsPayload::ClassU8(v) => {
                if v.len() != stored {
                    return Err(at(format!(
                        "payload has {} values, expected {stored}",
                        v.len()
                    )));
                }
                if level.channels > u32::from(INVALID_CLASS) {
                    return Err(at("class count exceeds the u8 index range".into()));
                }
                if let Some(bad) = v
                    .iter()
                    .find(|&&c| c != INVALID_CLASS && u32::from(c) >= level.channels)
                {
                    return Err(at(format!(
                        "class index {bad} out of range for {} classes",
                        level.channels
                    )));
                }
                v.len()
            }
        };
        debug_assert_eq!(expected, level.payload.byte_len());
        Ok(())
    }

    /// Parses the wire format, validating shapes, lists, and lengths.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(fmt_err(0, "bad magic, not a PTNS0001 file"));
        }
        let dim = r.u8("dim")?;
        if dim == 0 || dim > 3 {
            return Err(fmt_err(r.pos as u64 - 1, format!("dim must be 1..=3, got {dim}")));
        }
        let n_levels = r.u8("level count")?;
        if n_levels == 0 {
            return Err(fmt_err(r.pos as u64 - 1, "level count must be nonzero"));
        }
        let dtype = r.u8("dtype")?;
        if dtype > 1 {
            return Err(fmt_err(r.pos as u64 - 1, format!("unknown dtype {dtype}")));
        }
        let flags = r.u8("flags")?;
        if flags & !FLAG_SPARSE != 0 {
            return Err(fmt_err(r.pos as u64 - 1, format!("unknown flag bits {flags:#04x}")));
        }
        let sparse = flags & FLAG_SPARSE != 0;

        let mut levels = Vec::with_capacity(n_levels as usize);
        for _ in 0..n_levels {
            let mut res = Vec::with_capacity(dim as usize);
            for _ in 0..dim {
                let at = r.pos as u64;
                let v = r.u32("resolution")?;
                if v == 0 {
                    return Err(fmt_err(at, "zero resolution axis"));
                }
                res.push(v);
            }
            let channels_at = r.pos as u64;
            let channels = r.u32("channels")?;
            if channels == 0 {
                return Err(fmt_err(channels_at, "zero channels"));
            }
            let payload_len_at = r.pos as u64;
            let payload_len = r.u64("payload length")?;

            let nodes = res
                .iter()
                .try_fold(1u64, |acc, &v| acc.checked_mul(u64::from(v)))
                .ok_or_else(|| fmt_err(payload_len_at, "node count overflows"))?;

            let retained = if sparse {
                let count_at = r.pos as u64;
                let count = r.u64("retained count")?;
                if count > nodes {
                    return Err(fmt_err(count_at, format!(
                        "retained count {count} exceeds {nodes} nodes"
                    )));
                }
                let mut idx = Vec::with_capacity(count as usize);
                let mut prev: Option<u64> = None;
                for _ in 0..count {
                    let at = r.pos as u64;
                    let v = r.u64("retained index")?;
                    if v >= nodes {
                        return Err(fmt_err(at, format!("retained index {v} out of range")));
                    }
                    if prev.is_some_and(|p| p >= v) {
                        return Err(fmt_err(at, "retained indices must be strictly ascending"));
                    }
                    prev = Some(v);
                    idx.push(v);
                }
                Some(idx)
            } else {
                None
            };

            let stored = retained.as_ref().map_or(nodes, |i| i.len() as u64);
            let expected = match dtype {
                0 => stored
                    .checked_mul(u64::from(channels))
                    .and_then(|v| v.checked_mul(4)),
                _ => Some(stored),
            }
            .ok_or_else(|| fmt_err(payload_len_at, "payload size overflows"))?;
            if payload_len != expected {
                return Err(fmt_err(payload_len_at, format!(
                    "payload length {payload_len}, expected {expected}"
                )));
            }
            if expected > usize::MAX as u64 {
                return Err(fmt_err(payload_len_at, "payload too large for this platform"));
            }

            let payload_at = r.pos as u64;
            let bytes = r.take(expected as usize, "payload")?;
            let payload = match dtype {
                0 => PtnsPayload::F32(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                ),
                _ => {
                    if channels > u32::from(INVALID_CLASS) {
                        return Err(fmt_err(channels_at, "class count exceeds the u8 index range"));
                    }
                    if let Some(i) = bytes
                        .iter()
                        .position(|&c| c != INVALID_CLASS && u32::from(c) >= channels)
                    {
                        return Err(fmt_err(payload_at + i as u64, format!(
                            "class index {} out of range for {channels} classes",
                            bytes[i]
                        )));
                    }
                    PtnsPayload::ClassU8(bytes.to_vec())
                }
            };

            levels.push(PtnsLevel {
                res,
                channels,
                retained,
                payload,
            });
        }
        if r.pos != buf.len() {
            return Err(fmt_err(r.pos as u64, format!(
                "{} trailing bytes after the last level",
                buf.len() - r.pos
            )));
        }
        Ok(PtnsFile { dim, levels })
    }

    /// Writes the serialized file to `path`.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads and parses the file at `path`.
    pub fn read_from(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn fmt_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(fmt_err(self.pos as u64, format!(
                "file truncated reading {what}: need {len} bytes, have {}",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}
