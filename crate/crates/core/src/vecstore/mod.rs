//! The dynamic vector store.
//!
//! Records live in memory and are persisted as an append-only, checksummed
//! log plus a periodic snapshot. Search is an exact cosine scan; results are
//! ordered by score descending with ties going to the lower record id.
//!
//! Writers are serialized and an insert returns only after its log frame has
//! been synced. Readers never block each other.

mod codec;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{dot, fnv1a64, EmbedError, Embedder, EmbeddingVector};
use crate::generate::{AgentResponse, Feedback};
use crate::ingest::SourceRef;

pub use codec::FrameFault;

/// Collection searched by the retrieval layer and filled by dataset ingest.
pub const CORPUS_COLLECTION: &str = "corpus";
/// Collection receiving responses and feedback.
pub const INTERACTIONS_COLLECTION: &str = "interactions";

const SNAPSHOT_FILE: &str = "snapshot.bin";
const LOG_FILE: &str = "log.bin";
const DEFAULT_SNAPSHOT_EVERY: usize = 1024;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dimension mismatch in collection `{collection}`: expected {expected}, got {actual}")]
    DimensionMismatch {
        collection: String,
        expected: usize,
        actual: usize,
    },
    #[error("invalid collection name `{0}` (expected [a-z0-9_]+)")]
    InvalidCollection(String),
    #[error("record text is empty")]
    EmptyText,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("unknown response id `{0}`")]
    UnknownResponse(String),
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("storage error: {0}")]
    Storage(String),
    #[error("corrupt snapshot {}: {reason}", path.display())]
    CorruptSnapshot { path: PathBuf, reason: String },
}

impl StoreError {
    fn io(context: &str, path: &Path, err: std::io::Error) -> Self {
        StoreError::Storage(format!("{context} {}: {err}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Corpus,
    Response,
    Feedback,
}

impl RecordKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            RecordKind::Corpus => 0,
            RecordKind::Response => 1,
            RecordKind::Feedback => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => RecordKind::Corpus,
            1 => RecordKind::Response,
            2 => RecordKind::Feedback,
            _ => return None,
        })
    }
}

/// Interaction metadata. Corpus records leave everything empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub response_id: Option<String>,
    pub session_id: Option<String>,
    /// The user query a response answered.
    pub query: Option<String>,
    /// Feedback rating in {-1, 0, 1}.
    pub rating: Option<i8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: u64,
    pub collection: String,
    pub vector: EmbeddingVector,
    pub payload_text: String,
    pub source: SourceRef,
    pub record_kind: RecordKind,
    pub created_at: DateTime<Utc>,
    pub meta: RecordMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchHit {
    pub record_id: u64,
    pub score: f64,
    pub payload_text: String,
    pub source: SourceRef,
    pub record_kind: RecordKind,
}

/// Where log replay stopped early.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Truncation {
    pub valid_bytes: u64,
    pub discarded_bytes: u64,
    pub fault: FrameFault,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub from_snapshot: usize,
    pub from_log: usize,
    pub truncation: Option<Truncation>,
}

#[derive(Debug, Default)]
struct Collection {
    dim: usize,
    rows: Vec<usize>,
}

#[derive(Debug, Default)]
struct Inner {
    records: Vec<EmbeddingRecord>,
    norms: Vec<f64>,
    collections: HashMap<String, Collection>,
    responses: HashMap<String, u64>,
}

impl Inner {
    fn check_dim(&self, collection: &str, dim: usize) -> Result<(), StoreError> {
        match self.collections.get(collection) {
            Some(c) if c.dim != dim => Err(StoreError::DimensionMismatch {
                collection: collection.to_string(),
                expected: c.dim,
                actual: dim,
            }),
            _ => Ok(()),
        }
    }

    fn push(&mut self, record: EmbeddingRecord) {
        let row = self.records.len();
        let entry = self
            .collections
            .entry(record.collection.clone())
            .or_insert_with(|| Collection {
                dim: record.vector.dim(),
                rows: Vec::new(),
            });
        entry.rows.push(row);
        if record.record_kind == RecordKind::Response {
            if let Some(rid) = &record.meta.response_id {
                self.responses.insert(rid.clone(), record.id);
            }
        }
        self.norms.push(record.vector.norm());
        self.records.push(record);
    }

    fn next_id(&self) -> u64 {
        self.records.last().map_or(0, |r| r.id + 1)
    }
}

struct Persistence {
    dir: PathBuf,
    log: File,
    log_entries: usize,
    snapshot_every: usize,
}

/// Everything needed to insert one record except its id and timestamp.
#[derive(Debug, Clone)]
pub struct NewRecord {
    pub collection: String,
    pub text: String,
    pub vector: EmbeddingVector,
    pub source: SourceRef,
    pub kind: RecordKind,
    pub meta: RecordMeta,
}

pub struct Store {
    inner: RwLock<Inner>,
    writer: Mutex<Option<Persistence>>,
    embedder: Arc<dyn Embedder>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("records", &self.len())
            .finish()
    }
}

pub fn valid_collection_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl Store {
    /// A store with no persistence.
    pub fn in_memory(embedder: Arc<dyn Embedder>) -> Self {
        Self {
            inner: RwLock::new(Inner::default()),
            writer: Mutex::new(None),
            embedder,
        }
    }

    /// Opens (or creates) a store directory, replaying snapshot then log.
    ///
    /// A torn or corrupt log tail is cut off at the last valid frame and
    /// reported in the [`LoadReport`]; a corrupt snapshot is an error.
    pub fn open(
        dir: impl AsRef<Path>,
        embedder: Arc<dyn Embedder>,
    ) -> Result<(Self, LoadReport), StoreError> {
        Self::open_with(dir, embedder, DEFAULT_SNAPSHOT_EVERY)
    }

    pub fn open_with(
        dir: impl AsRef<Path>,
        embedder: Arc<dyn Embedder>,
        snapshot_every: usize,
    ) -> Result<(Self, LoadReport), StoreError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| StoreError::io("creating", &dir, e))?;
        let mut inner = Inner::default();
        let mut report = LoadReport::default();

        let snap_path = dir.join(SNAPSHOT_FILE);
        if snap_path.exists() {
            let buf =
                std::fs::read(&snap_path).map_err(|e| StoreError::io("reading", &snap_path, e))?;
            let corrupt = |reason: &str| StoreError::CorruptSnapshot {
                path: snap_path.clone(),
                reason: reason.to_string(),
            };
            if buf.len() < 13
                || buf[0] != codec::FORMAT_VERSION
                || &buf[1..5] != codec::SNAPSHOT_MAGIC
            {
                return Err(corrupt("bad header"));
            }
            let count = u64::from_le_bytes(buf[5..13].try_into().unwrap()) as usize;
            let (records, _, fault) = codec::read_frames(&buf[13..]);
            if let Some(fault) = fault {
                return Err(corrupt(&fault.to_string()));
            }
            if records.len() != count {
                return Err(corrupt("record count mismatch"));
            }
            report.from_snapshot = records.len();
            for r in records {
                inner.push(r);
            }
        }

        let log_path = dir.join(LOG_FILE);
        let mut log = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&log_path)
            .map_err(|e| StoreError::io("opening", &log_path, e))?;
        let mut buf = Vec::new();
        log.read_to_end(&mut buf)
            .map_err(|e| StoreError::io("reading", &log_path, e))?;
        let mut log_entries = 0;
        if buf.is_empty() {
            log.write_all(&[codec::FORMAT_VERSION])
                .and_then(|_| log.sync_data())
                .map_err(|e| StoreError::io("initializing", &log_path, e))?;
        } else {
            if buf[0] != codec::FORMAT_VERSION {
                return Err(StoreError::Storage(format!(
                    "{}: unsupported format version {}",
                    log_path.display(),
                    buf[0]
                )));
            }
            let (records, end, fault) = codec::read_frames(&buf[1..]);
            let valid = 1 + end as u64;
            if let Some(fault) = fault {
                let discarded = buf.len() as u64 - valid;
                tracing::warn!(path = %log_path.display(), valid, discarded, %fault, "truncating store log");
                log.set_len(valid)
                    .and_then(|_| log.sync_data())
                    .map_err(|e| StoreError::io("truncating", &log_path, e))?;
                report.truncation = Some(Truncation {
                    valid_bytes: valid,
                    discarded_bytes: discarded,
                    fault,
                });
            }
            log_entries = records.len();
            let floor = inner.next_id();
            for r in records {
                // Frames already folded into the snapshot by an interrupted compaction.
                if r.id < floor {
                    continue;
                }
                inner.check_dim(&r.collection, r.vector.dim())?;
                report.from_log += 1;
                inner.push(r);
            }
        }

        let store = Self {
            inner: RwLock::new(inner),
            writer: Mutex::new(Some(Persistence {
                dir,
                log,
                log_entries,
                snapshot_every: snapshot_every.max(1),
            })),
            embedder,
        };
        Ok((store, report))
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn len(&self) -> usize {
        self.inner.read().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn collection_len(&self, collection: &str) -> usize {
        self.inner
            .read()
            .collections
            .get(collection)
            .map_or(0, |c| c.rows.len())
    }

    pub fn collection_dim(&self, collection: &str) -> Option<usize> {
        self.inner.read().collections.get(collection).map(|c| c.dim)
    }

    pub fn get(&self, id: u64) -> Option<EmbeddingRecord> {
        let inner = self.inner.read();
        let row = inner.records.binary_search_by_key(&id, |r| r.id).ok()?;
        Some(inner.records[row].clone())
    }

    /// Records of one collection in insertion order.
    pub fn records(&self, collection: &str) -> Vec<EmbeddingRecord> {
        let inner = self.inner.read();
        inner
            .collections
            .get(collection)
            .map(|c| {
                c.rows
                    .iter()
                    .map(|&row| inner.records[row].clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn all_records(&self) -> Vec<EmbeddingRecord> {
        self.inner.read().records.clone()
    }

    /// Hash over the encoded contents; changes iff the stored data changes.
    pub fn state_hash(&self) -> u64 {
        let inner = self.inner.read();
        let mut bytes = Vec::new();
        for r in &inner.records {
            bytes.extend_from_slice(&fnv1a64(&codec::encode_record(r)).to_le_bytes());
        }
        fnv1a64(&bytes)
    }

    /// Embeds `text` with the configured provider and appends it.
    pub async fn insert(
        &self,
        collection: &str,
        text: &str,
        source: SourceRef,
        kind: RecordKind,
    ) -> Result<u64, StoreError> {
        self.insert_with_meta(collection, text, source, kind, RecordMeta::default())
            .await
    }

    pub async fn insert_with_meta(
        &self,
        collection: &str,
        text: &str,
        source: SourceRef,
        kind: RecordKind,
        meta: RecordMeta,
    ) -> Result<u64, StoreError> {
        validate(collection, text)?;
        // Fail fast before paying for the embedding.
        if let Some(dim) = self.collection_dim(collection) {
            if dim != self.embedder.dim() {
                return Err(StoreError::DimensionMismatch {
                    collection: collection.to_string(),
                    expected: dim,
                    actual: self.embedder.dim(),
                });
            }
        }
        let vector = self.embedder.embed(text).await?;
        self.insert_vector(NewRecord {
            collection: collection.to_string(),
            text: text.to_string(),
            vector,
            source,
            kind,
            meta,
        })
    }

    /// Appends a pre-embedded record. Returns after the record is durable.
    pub fn insert_vector(&self, new: NewRecord) -> Result<u64, StoreError> {
        validate(&new.collection, &new.text)?;
        if new.vector.values().iter().any(|v| !v.is_finite()) {
            return Err(StoreError::Storage(
                "vector contains non-finite values".into(),
            ));
        }
        let mut writer = self.writer.lock();
        let record = {
            let inner = self.inner.read();
            inner.check_dim(&new.collection, new.vector.dim())?;
            EmbeddingRecord {
                id: inner.next_id(),
                collection: new.collection,
                vector: new.vector,
                payload_text: new.text,
                source: new.source,
                record_kind: new.kind,
                created_at: Utc::now(),
                meta: new.meta,
            }
        };
        let id = record.id;
        let mut compact = false;
        if let Some(p) = writer.as_mut() {
            let framed = codec::frame(&codec::encode_record(&record));
            p.log
                .write_all(&framed)
                .and_then(|_| p.log.sync_data())
                .map_err(|e| StoreError::io("appending to", &p.dir.join(LOG_FILE), e))?;
            p.log_entries += 1;
            compact = p.log_entries >= p.snapshot_every;
        }
        self.inner.write().push(record);
        if compact {
            if let Some(p) = writer.as_mut() {
                self.write_snapshot(p)?;
            }
        }
        Ok(id)
    }

    /// Folds the log into a fresh snapshot and empties the log.
    pub fn compact(&self) -> Result<(), StoreError> {
        let mut writer = self.writer.lock();
        match writer.as_mut() {
            Some(p) => self.write_snapshot(p),
            None => Ok(()),
        }
    }

    fn write_snapshot(&self, p: &mut Persistence) -> Result<(), StoreError> {
        let tmp = p.dir.join("snapshot.tmp");
        let dst = p.dir.join(SNAPSHOT_FILE);
        {
            let inner = self.inner.read();
            let mut buf = vec![codec::FORMAT_VERSION];
            buf.extend_from_slice(codec::SNAPSHOT_MAGIC);
            buf.extend_from_slice(&(inner.records.len() as u64).to_le_bytes());
            for r in &inner.records {
                buf.extend_from_slice(&codec::frame(&codec::encode_record(r)));
            }
            let mut f = File::create(&tmp).map_err(|e| StoreError::io("creating", &tmp, e))?;
            f.write_all(&buf)
                .and_then(|_| f.sync_all())
                .map_err(|e| StoreError::io("writing", &tmp, e))?;
        }
        std::fs::rename(&tmp, &dst).map_err(|e| StoreError::io("renaming", &tmp, e))?;
        if let Ok(d) = File::open(&p.dir) {
            let _ = d.sync_all();
        }
        let log_path = p.dir.join(LOG_FILE);
        p.log
            .set_len(1)
            .and_then(|_| p.log.sync_data())
            .map_err(|e| StoreError::io("resetting", &log_path, e))?;
        p.log_entries = 0;
        Ok(())
    }

    /// Exact top-`k` cosine search. A missing collection yields no hits.
    pub fn search(
        &self,
        collection: &str,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<SearchHit>, StoreError> {
        if k == 0 {
            return Err(StoreError::InvalidK);
        }
        let inner = self.inner.read();
        let Some(coll) = inner.collections.get(collection) else {
            return Ok(Vec::new());
        };
        if coll.dim != query.dim() {
            return Err(StoreError::DimensionMismatch {
                collection: collection.to_string(),
                expected: coll.dim,
                actual: query.dim(),
            });
        }
        let qn = query.norm();
        let mut scored: Vec<(f64, u64, usize)> = coll
            .rows
            .iter()
            .map(|&row| {
                let rn = inner.norms[row];
                let score = if qn == 0.0 || rn == 0.0 {
                    0.0
                } else {
                    dot(query.values(), inner.records[row].vector.values()) / (qn * rn)
                };
                // +0.0 folds -0.0 into 0.0 so equal scores compare equal.
                (score.clamp(-1.0, 1.0) + 0.0, inner.records[row].id, row)
            })
            .collect();
        let order =
            |a: &(f64, u64, usize), b: &(f64, u64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(scored
            .into_iter()
            .map(|(score, id, row)| {
                let r = &inner.records[row];
                SearchHit {
                    record_id: id,
                    score,
                    payload_text: r.payload_text.clone(),
                    source: r.source.clone(),
                    record_kind: r.record_kind,
                }
            })
            .collect())
    }

    pub fn response_record(&self, response_id: &str) -> Option<u64> {
        self.inner.read().responses.get(response_id).copied()
    }

    /// Writes a response (and optional feedback on it) back into the
    /// interactions collection. Returns the new record ids.
    pub async fn record_interaction(
        &self,
        session_id: &str,
        response: &AgentResponse,
        feedback: Option<&Feedback>,
    ) -> Result<Vec<u64>, StoreError> {
        if let Some(fb) = feedback {
            if fb.response_id != response.response_id
                && self.response_record(&fb.response_id).is_none()
            {
                return Err(StoreError::UnknownResponse(fb.response_id.clone()));
            }
        }
        let source = session_source(session_id);
        let meta = RecordMeta {
            response_id: Some(response.response_id.clone()),
            session_id: Some(session_id.to_string()),
            query: Some(response.query.clone()),
            rating: None,
        };
        let text = if response.text.trim().is_empty() {
            "(empty response)"
        } else {
            response.text.as_str()
        };
        let mut ids = vec![
            self.insert_with_meta(
                INTERACTIONS_COLLECTION,
                text,
                source,
                RecordKind::Response,
                meta,
            )
            .await?,
        ];
        if let Some(fb) = feedback {
            ids.push(self.record_feedback(session_id, fb).await?);
        }
        Ok(ids)
    }

    /// Stores feedback for a response recorded earlier.
    pub async fn record_feedback(
        &self,
        session_id: &str,
        feedback: &Feedback,
    ) -> Result<u64, StoreError> {
        if self.response_record(&feedback.response_id).is_none() {
            return Err(StoreError::UnknownResponse(feedback.response_id.clone()));
        }
        let meta = RecordMeta {
            response_id: Some(feedback.response_id.clone()),
            session_id: Some(session_id.to_string()),
            query: None,
            rating: Some(feedback.rating),
        };
        self.insert_with_meta(
            INTERACTIONS_COLLECTION,
            &feedback.render(),
            session_source(session_id),
            RecordKind::Feedback,
            meta,
        )
        .await
    }
}

fn session_source(session_id: &str) -> SourceRef {
    SourceRef::store_record(format!("session://{session_id}"), None)
}

fn validate(collection: &str, text: &str) -> Result<(), StoreError> {
    if !valid_collection_name(collection) {
        return Err(StoreError::InvalidCollection(collection.to_string()));
    }
    if text.trim().is_empty() {
        return Err(StoreError::EmptyText);
    }
    Ok(())
}
