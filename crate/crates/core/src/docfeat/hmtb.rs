//! HMTB v1: little-endian, no padding.
//!
//! ```text
//! "HMTB" | version u32 = 1 | doc_count u64
//! per doc: id_len u32 | id bytes | label u32 | l u32 | r u32 | d u32 | n u32 | m u32
//!          | P f32[l·d] | X f32[l·r·d] | s_mask u32[l·r] | H f32[m·d]
//! ```
//!
//! Features are held as f64 in memory and narrowed to f32 on disk; values that
//! are already f32-representable round-trip exactly.

use std::io::{Read, Write};

use super::{ensure_valid, DatasetSplit, DocFeatureBundle, SplitTag};
use crate::error::{HmtError, Result};
use crate::tensor::Tensor;

pub const HMTB_MAGIC: &[u8; 4] = b"HMTB";
pub const HMTB_VERSION: u32 = 1;

pub fn write_hmtb<W: Write>(split: &DatasetSplit, mut sink: W) -> Result<u64> {
    for doc in &split.docs {
        ensure_valid(doc)?;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(HMTB_MAGIC);
    buf.extend_from_slice(&HMTB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(split.docs.len() as u64).to_le_bytes());
    for doc in &split.docs {
        let id = doc.doc_id.as_bytes();
        put_u32(&mut buf, id.len())?;
        buf.extend_from_slice(id);
        buf.extend_from_slice(&doc.label.to_le_bytes());
        for v in [doc.l, doc.r, doc.d, doc.n, doc.m] {
            put_u32(&mut buf, v)?;
        }
        put_f32s(&mut buf, doc.sections.data());
        put_f32s(&mut buf, doc.words.data());
        for v in &doc.s_mask {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        put_f32s(&mut buf, doc.images.data());
    }
    sink.write_all(&buf)?;
    Ok(buf.len() as u64)
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| HmtError::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(buf: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Parses a whole HMTB stream. Every bundle is validated and trailing bytes
/// are rejected. The class count is taken as `max(label) + 1` (at least 2).
pub fn read_hmtb<R: Read>(mut source: R, tag: SplitTag) -> Result<DatasetSplit> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != HMTB_MAGIC {
        return Err(HmtError::Format(format!("bad magic {magic:?}")));
    }
    let version = cur.u32()?;
    if version != HMTB_VERSION {
        return Err(HmtError::Format(format!("unsupported HMTB version {version}")));
    }
    let count = cur.u64()?;
    let mut docs = Vec::new();
    for _ in 0..count {
        let doc = read_doc(&mut cur)?;
        ensure_valid(&doc)?;
        docs.push(doc);
    }
    if cur.pos != bytes.len() {
        return Err(HmtError::Format(format!(
            "{} trailing bytes after document {count}",
            bytes.len() - cur.pos
        )));
    }
    let classes = docs.iter().map(|d| d.label as usize + 1).max().unwrap_or(0).max(2);
    Ok(DatasetSplit { tag, classes, docs })
}

fn read_doc(cur: &mut Cursor<'_>) -> Result<DocFeatureBundle> {
    let id_len = cur.u32()? as usize;
    let id = cur.take(id_len)?;
    let doc_id = String::from_utf8(id.to_vec())
        .map_err(|_| HmtError::Format(format!("doc id at offset {} is not UTF-8", cur.pos - id_len)))?;
    let label = cur.u32()?;
    let l = cur.u32()? as usize;
    let r = cur.u32()? as usize;
    let d = cur.u32()? as usize;
    let n = cur.u32()? as usize;
    let m = cur.u32()? as usize;
    let sections = cur.matrix(l, d)?;
    let words = cur.matrix(l * r, d)?;
    let s_mask = cur.u32s(l * r)?;
    let images = cur.matrix(m, d)?;
    let shape_err = |what: &str| HmtError::Validation {
        doc_id: doc_id.clone(),
        violations: vec![format!("shape: {what} has a zero extent")],
    };
    Ok(DocFeatureBundle {
        sections: sections.ok_or_else(|| shape_err("sections"))?,
        words: words.ok_or_else(|| shape_err("words"))?,
        images: images.ok_or_else(|| shape_err("images"))?,
        doc_id,
        label,
        l,
        r,
        d,
        n,
        m,
        s_mask,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(HmtError::Truncated {
                offset: self.bytes.len() as u64,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn byte_len(&self, count: usize) -> Result<usize> {
        count.checked_mul(4).ok_or(HmtError::Truncated {
            offset: self.bytes.len() as u64,
        })
    }

    fn u32s(&mut self, count: usize) -> Result<Vec<u32>> {
        let raw = self.take(self.byte_len(count)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    /// `None` when either extent is zero; the data is still consumed.
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Option<Tensor>> {
        let count = rows.checked_mul(cols).ok_or(HmtError::Truncated {
            offset: self.bytes.len() as u64,
        })?;
        let raw = self.take(self.byte_len(count)?)?;
        if count == 0 {
            return Ok(None);
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok(Some(Tensor::new(vec![rows, cols], data)?))
    }
}
