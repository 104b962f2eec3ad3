//! On-disk encoding.
//!
//! `log.bin`: one version byte, then frames of
//! `[u32 payload_len][u32 crc32(payload)][payload]`.
//! `snapshot.bin`: one version byte, the magic `FSNP`, a `u64` record count,
//! then frames in the same layout. All integers little-endian.

use chrono::{DateTime, TimeZone, Utc};

use super::{EmbeddingRecord, RecordKind, RecordMeta};
use crate::embed::EmbeddingVector;
use crate::ingest::{SourceKind, SourceRef};

pub const FORMAT_VERSION: u8 = 1;
pub const SNAPSHOT_MAGIC: &[u8; 4] = b"FSNP";
pub const FRAME_HEADER: usize = 8;
/// Upper bound on one frame; anything larger is treated as corruption.
pub const MAX_FRAME: usize = 64 * 1024 * 1024;

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn opt_str(&mut self, s: Option<&str>) {
        match s {
            Some(s) => {
                self.u8(1);
                self.str(s);
            }
            None => self.u8(0),
        }
    }
    fn time(&mut self, t: &DateTime<Utc>) {
        self.i64(t.timestamp());
        self.u32(t.timestamp_subsec_nanos());
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn i64(&mut self) -> Option<i64> {
        self.take(8)
            .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        self.take(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
    fn str(&mut self) -> Option<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).ok()
    }
    fn opt_str(&mut self) -> Option<Option<String>> {
        match self.u8()? {
            0 => Some(None),
            1 => Some(Some(self.str()?)),
            _ => None,
        }
    }
    fn time(&mut self) -> Option<DateTime<Utc>> {
        let secs = self.i64()?;
        Utc.timestamp_opt(secs, self.u32()?).single()
    }
}

pub fn encode_record(r: &EmbeddingRecord) -> Vec<u8> {
    let mut e = Enc::default();
    e.u64(r.id);
    e.time(&r.created_at);
    e.u8(r.record_kind.code());
    e.str(&r.collection);
    e.str(&r.payload_text);
    e.str(&r.source.id);
    e.u8(r.source.kind.code());
    e.str(&r.source.uri);
    e.opt_str(r.source.title.as_deref());
    e.time(&r.source.fetched_at);
    e.opt_str(r.meta.response_id.as_deref());
    e.opt_str(r.meta.session_id.as_deref());
    e.opt_str(r.meta.query.as_deref());
    match r.meta.rating {
        Some(v) => {
            e.u8(1);
            e.u8(v as u8);
        }
        None => e.u8(0),
    }
    e.u32(r.vector.dim() as u32);
    for v in r.vector.values() {
        e.0.extend_from_slice(&v.to_le_bytes());
    }
    e.0
}

pub fn decode_record(buf: &[u8]) -> Option<EmbeddingRecord> {
    let mut d = Dec { buf, pos: 0 };
    let id = d.u64()?;
    let created_at = d.time()?;
    let record_kind = RecordKind::from_code(d.u8()?)?;
    let collection = d.str()?;
    let payload_text = d.str()?;
    let source_id = d.str()?;
    let source_kind = SourceKind::from_code(d.u8()?)?;
    let uri = d.str()?;
    let title = d.opt_str()?;
    let fetched_at = d.time()?;
    let meta = RecordMeta {
        response_id: d.opt_str()?,
        session_id: d.opt_str()?,
        query: d.opt_str()?,
        rating: match d.u8()? {
            0 => None,
            1 => Some(d.u8()? as i8),
            _ => return None,
        },
    };
    let dim = d.u32()? as usize;
    if dim.checked_mul(8)? > buf.len() {
        return None;
    }
    let values = (0..dim).map(|_| d.f64()).collect::<Option<Vec<_>>>()?;
    if d.pos != buf.len() {
        return None;
    }
    Some(EmbeddingRecord {
        id,
        collection,
        vector: EmbeddingVector::new(values),
        payload_text,
        source: SourceRef {
            id: source_id,
            kind: source_kind,
            uri,
            title,
            fetched_at,
        },
        record_kind,
        created_at,
        meta,
    })
}

/// Length-prefixed, checksummed frame.
pub fn frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + FRAME_HEADER);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Why frame parsing stopped before the end of the buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFault {
    TornHeader,
    TornPayload,
    ChecksumMismatch,
    Undecodable,
}

impl std::fmt::Display for FrameFault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FrameFault::TornHeader => "torn frame header",
            FrameFault::TornPayload => "torn frame payload",
            FrameFault::ChecksumMismatch => "checksum mismatch",
            FrameFault::Undecodable => "undecodable record",
        })
    }
}

/// Decodes consecutive frames. Returns the records, the byte offset just past
/// the last good frame, and the fault that stopped parsing, if any.
pub fn read_frames(buf: &[u8]) -> (Vec<EmbeddingRecord>, usize, Option<FrameFault>) {
    let mut records = Vec::new();
    let mut pos = 0;
    while pos < buf.len() {
        if buf.len() - pos < FRAME_HEADER {
            return (records, pos, Some(FrameFault::TornHeader));
        }
        let len = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(buf[pos + 4..pos + 8].try_into().unwrap());
        let start = pos + FRAME_HEADER;
        if len > MAX_FRAME || buf.len() - start < len {
            return (records, pos, Some(FrameFault::TornPayload));
        }
        let payload = &buf[start..start + len];
        if crc32fast::hash(payload) != crc {
            return (records, pos, Some(FrameFault::ChecksumMismatch));
        }
        match decode_record(payload) {
            Some(r) => records.push(r),
            None => return (records, pos, Some(FrameFault::Undecodable)),
        }
        pos = start + len;
    }
    (records, pos, None)
}
