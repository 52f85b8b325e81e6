//! Embedding store file.
//!
//! ```text
//! magic    "DLENG\0V1"
//! version  u32 (= 1)
//! dim      u32
//! count    u64
//! record*  u64 object_id | f32 x dim | u8 modality | u32 provenance offset
//! strings  (u32 length | UTF-8 bytes)*, offsets relative to the table start
//! ```
//!
//! Provenance strings are `;`-separated `key=value` pairs: `frame`, and
//! optionally `component` and `label` (ground truth, evaluation only).

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::grid::ClassId;
use crate::io::bytes::{ByteReader, ByteWriter};
use crate::io::container::write_atomic;
use crate::retrieval::{EmbeddingRecord, Modality, Provenance};

pub const STORE_MAGIC: &[u8; 8] = b"DLENG\0V1";
pub const STORE_VERSION: u32 = 1;
pub const STORE_HEADER_LEN: usize = 24;

pub fn provenance_string(p: &Provenance, label: Option<ClassId>) -> String {
    let mut s = format!("frame={}", p.frame_id);
    if let Some(c) = p.component {
        s.push_str(&format!(";component={c}"));
    }
    if let Some(l) = label {
        s.push_str(&format!(";label={l}"));
    }
    s
}

pub fn parse_provenance(s: &str) -> Result<(Provenance, Option<ClassId>), FormatError> {
    let mut frame = None;
    let mut component = None;
    let mut label = None;
    for part in s.split(';') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| FormatError::Malformed(format!("provenance entry {part:?}")))?;
        let bad = || FormatError::Malformed(format!("provenance value {v:?}"));
        match k {
            "frame" => frame = Some(v.to_string()),
            "component" => component = Some(v.parse().map_err(|_| bad())?),
            "label" => label = Some(v.parse().map_err(|_| bad())?),
            other => return Err(FormatError::Malformed(format!("provenance key {other:?}"))),
        }
    }
    let frame_id = frame.ok_or_else(|| FormatError::Malformed("provenance without frame".into()))?;
    Ok((Provenance { frame_id, component }, label))
}

pub fn encode_store(dim: usize, records: &[EmbeddingRecord]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(STORE_MAGIC)
        .u32(STORE_VERSION)
        .u32(dim as u32)
        .u64(records.len() as u64);
    let mut table = ByteWriter::new();
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: r.vector.len() });
        }
        if r.provenance.frame_id.contains([';', '=']) {
            return Err(Error::InvalidInput(format!(
                "frame id {:?} contains a reserved character",
                r.provenance.frame_id
            )));
        }
        w.u64(r.object_id);
        for v in &r.vector {
            w.f32(*v);
        }
        w.u8(r.modality.code()).u32(table.len() as u32);
        table.str(&provenance_string(&r.provenance, r.label));
    }
    w.bytes(&table.into_inner());
    Ok(w.into_inner())
}

/// Decodes a store; `expected_dim` (from a manifest) is checked when given.
pub fn decode_store(bytes: &[u8], expected_dim: Option<usize>) -> Result<(usize, Vec<EmbeddingRecord>)> {
    if bytes.len() < STORE_MAGIC.len() || &bytes[..8] != STORE_MAGIC {
        return Err(FormatError::BadMagic {
            expected: STORE_MAGIC.to_vec(),
            found: bytes[..bytes.len().min(8)].to_vec(),
        }
        .into());
    }
    let mut r = ByteReader::new(bytes, "embedding store");
    r.take(8)?;
    let version = r.u32()?;
    if version != STORE_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    if let Some(expected) = expected_dim {
        if expected != dim {
            return Err(FormatError::DimMismatch { expected, found: dim }.into());
        }
    }
    let record_len = 8 + 4 * dim as u64 + 1 + 4;
    if count.saturating_mul(record_len) > r.remaining() as u64 {
        return Err(FormatError::Truncated(format!("{count} records of {record_len} bytes")).into());
    }
    let table_start = STORE_HEADER_LEN + (count * record_len) as usize;
    let table = &bytes[table_start..];
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let object_id = r.u64()?;
        let vector = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
        let modality = Modality::from_code(r.u8()?)?;
        let offset = r.u32()? as usize;
        if offset >= table.len() {
            return Err(FormatError::Truncated(format!("string offset {offset}")).into());
        }
        let mut tr = ByteReader::new(&table[offset..], "string table");
        let (provenance, label) = parse_provenance(&tr.str()?)?;
        records.push(EmbeddingRecord {
            object_id,
            vector,
            modality,
            provenance,
            label,
        });
    }
    Ok((dim, records))
}

pub fn write_store(path: &Path, dim: usize, records: &[EmbeddingRecord]) -> Result<()> {
    write_atomic(path, &encode_store(dim, records)?)
}

pub fn read_store(path: &Path, expected_dim: Option<usize>) -> Result<(usize, Vec<EmbeddingRecord>)> {
    decode_store(&std::fs::read(path)?, expected_dim)
}
