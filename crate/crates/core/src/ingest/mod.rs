//! Content acquisition: preferred URLs, open web search and local files,
//! all normalized to markdown-like text and split into token windows.

mod chunk;
mod fetch;
pub mod html;
mod local;
mod search;

use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::embed::fnv1a64;

pub use chunk::{chunk_document, reconstruct, Chunk, ChunkConfig};
pub use fetch::{FetchedBody, Fetcher, HttpFetcher, PageFetcher, StaticFetcher, StaticPage};
pub use local::{parse_local_file, ConverterMap};
pub use search::{
    substitute_query, web_search, web_search_detailed, FixtureSearchProvider, HttpSearchProvider,
    SearchOutcome, SearchProvider, SearchResult, DEFAULT_WEB_RESULTS,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("network error fetching {url}: {reason}")]
    Network { url: String, reason: String },
    #[error("content at {url} is not convertible to text ({content_type})")]
    NotText { url: String, content_type: String },
    #[error("normalization of {0} produced no text")]
    EmptyContent(String),
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("unsupported format .{0}: no built-in handler and no converter configured")]
    UnsupportedFormat(String),
    #[error("converter `{command}` failed ({status}): {stderr}")]
    ConverterFailed {
        command: String,
        status: String,
        stderr: String,
    },
    #[error("search provider error: {0}")]
    Provider(String),
    #[error("invalid URL `{0}`")]
    InvalidUrl(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    PreferredUrl,
    WebSearch,
    LocalFile,
    StoreRecord,
}

impl SourceKind {
    fn prefix(self) -> &'static str {
        match self {
            SourceKind::PreferredUrl => "pref",
            SourceKind::WebSearch => "web",
            SourceKind::LocalFile => "file",
            SourceKind::StoreRecord => "rec",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            SourceKind::PreferredUrl => 0,
            SourceKind::WebSearch => 1,
            SourceKind::LocalFile => 2,
            SourceKind::StoreRecord => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => SourceKind::PreferredUrl,
            1 => SourceKind::WebSearch,
            2 => SourceKind::LocalFile,
            3 => SourceKind::StoreRecord,
            _ => return None,
        })
    }
}

/// Provenance handle for anything the agent can retrieve.
///
/// The id is derived from the kind and uri, so the same resource seen through
/// the same channel always carries the same id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub id: String,
    pub kind: SourceKind,
    pub uri: String,
    pub title: Option<String>,
    pub fetched_at: DateTime<Utc>,
}

impl SourceRef {
    /// Builds a reference, checking that URL kinds carry absolute URLs.
    pub fn new(
        kind: SourceKind,
        uri: impl Into<String>,
        title: Option<String>,
    ) -> Result<Self, IngestError> {
        let uri = uri.into();
        if matches!(kind, SourceKind::PreferredUrl | SourceKind::WebSearch) {
            parse_absolute_url(&uri)?;
        }
        if uri.is_empty() {
            return Err(IngestError::InvalidArgument("empty source uri".into()));
        }
        Ok(Self::unchecked(kind, uri, title, Utc::now()))
    }

    pub(crate) fn unchecked(
        kind: SourceKind,
        uri: String,
        title: Option<String>,
        fetched_at: DateTime<Utc>,
    ) -> Self {
        let id = format!("{}-{:016x}", kind.prefix(), fnv1a64(uri.as_bytes()));
        Self {
            id,
            kind,
            uri,
            title,
            fetched_at,
        }
    }

    pub fn local_file(path: &std::path::Path) -> Self {
        let title = path.file_name().map(|n| n.to_string_lossy().into_owned());
        Self::unchecked(
            SourceKind::LocalFile,
            path.display().to_string(),
            title,
            Utc::now(),
        )
    }

    pub fn store_record(uri: impl Into<String>, title: Option<String>) -> Self {
        Self::unchecked(SourceKind::StoreRecord, uri.into(), title, Utc::now())
    }
}

/// Parses an absolute http(s) URL.
pub fn parse_absolute_url(raw: &str) -> Result<Url, IngestError> {
    let url = Url::parse(raw).map_err(|_| IngestError::InvalidUrl(raw.to_string()))?;
    if !matches!(url.scheme(), "http" | "https") || url.host_str().is_none() {
        return Err(IngestError::InvalidUrl(raw.to_string()));
    }
    Ok(url)
}

/// Normalized text plus its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub source: SourceRef,
    pub text: String,
    pub content_hash: u64,
}

impl Document {
    /// Rejects text that is empty or whitespace only.
    pub fn new(source: SourceRef, text: String) -> Result<Self, IngestError> {
        if text.trim().is_empty() {
            return Err(IngestError::EmptyContent(source.uri));
        }
        let content_hash = fnv1a64(text.as_bytes());
        Ok(Self {
            source,
            text,
            content_hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_kinds_require_absolute_urls() {
        assert!(SourceRef::new(SourceKind::PreferredUrl, "https://example.com/a", None).is_ok());
        assert!(matches!(
            SourceRef::new(SourceKind::WebSearch, "ht!tp:/x", None),
            Err(IngestError::InvalidUrl(_))
        ));
        assert!(matches!(
            SourceRef::new(SourceKind::PreferredUrl, "/etc/hosts", None),
            Err(IngestError::InvalidUrl(_))
        ));
        assert!(SourceRef::new(SourceKind::LocalFile, "/tmp/notes.md", None).is_ok());
    }

    #[test]
    fn ids_differ_across_kinds() {
        let a = SourceRef::new(SourceKind::PreferredUrl, "https://x.org/", None).unwrap();
        let b = SourceRef::new(SourceKind::WebSearch, "https://x.org/", None).unwrap();
        let c = SourceRef::new(SourceKind::PreferredUrl, "https://x.org/", None).unwrap();
        assert_ne!(a.id, b.id);
        assert_eq!(a.id, c.id);
    }

    #[test]
    fn document_rejects_blank_text() {
        let src = SourceRef::store_record("r", None);
        assert!(matches!(
            Document::new(src.clone(), " \n ".into()),
            Err(IngestError::EmptyContent(_))
        ));
        let d1 = Document::new(src.clone(), "hello".into()).unwrap();
        let d2 = Document::new(src, "hello".into()).unwrap();
        assert_eq!(d1.content_hash, d2.content_hash);
    }
}
