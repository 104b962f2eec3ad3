use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use chrono::Utc;
use tokio::sync::Semaphore;
use url::Url;

use super::html::{html_title, html_to_markdown};
use super::{parse_absolute_url, Document, IngestError, SourceKind, SourceRef};

/// Raw HTTP payload.
#[derive(Debug, Clone)]
pub struct FetchedBody {
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

/// Transport behind URL fetching. Implementations return an error for any
/// non-success status.
#[async_trait]
pub trait Fetcher: Send + Sync {
    async fn get(&self, url: &Url, timeout: Duration) -> Result<FetchedBody, IngestError>;
}

#[derive(Debug, Clone, Default)]
pub struct HttpFetcher {
    client: reqwest::Client,
}

impl HttpFetcher {
    pub fn new() -> Self {
        let client = reqwest::Client::builder()
            .user_agent(concat!("finsearch/", env!("CARGO_PKG_VERSION")))
            .build()
            .unwrap_or_default();
        Self { client }
    }
}

#[async_trait]
impl Fetcher for HttpFetcher {
    async fn get(&self, url: &Url, timeout: Duration) -> Result<FetchedBody, IngestError> {
        let network = |reason: String| IngestError::Network {
            url: url.to_string(),
            reason,
        };
        let resp = self
            .client
            .get(url.clone())
            .timeout(timeout)
            .send()
            .await
            .map_err(|e| network(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(network(format!("HTTP {status}")));
        }
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let body = resp
            .bytes()
            .await
            .map_err(|e| network(e.to_string()))?
            .to_vec();
        Ok(FetchedBody { content_type, body })
    }
}

/// A canned page served by [`StaticFetcher`].
#[derive(Debug, Clone)]
pub struct StaticPage {
    pub status: u16,
    pub content_type: String,
    pub body: String,
}

impl StaticPage {
    pub fn html(body: impl Into<String>) -> Self {
        Self {
            status: 200,
            content_type: "text/html; charset=utf-8".into(),
            body: body.into(),
        }
    }

    pub fn status(status: u16) -> Self {
        Self {
            status,
            content_type: "text/plain".into(),
            body: String::new(),
        }
    }
}

/// In-memory fetcher for offline operation and fixtures. Unknown URLs behave
/// like unreachable hosts.
#[derive(Debug, Clone, Default)]
pub struct StaticFetcher {
    pages: HashMap<String, StaticPage>,
}

impl StaticFetcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_page(mut self, url: impl Into<String>, page: StaticPage) -> Self {
        self.insert(url, page);
        self
    }

    pub fn insert(&mut self, url: impl Into<String>, page: StaticPage) {
        let url = url.into();
        let key = Url::parse(&url).map(|u| u.to_string()).unwrap_or(url);
        self.pages.insert(key, page);
    }
}

#[async_trait]
impl Fetcher for StaticFetcher {
    async fn get(&self, url: &Url, _timeout: Duration) -> Result<FetchedBody, IngestError> {
        let page = self
            .pages
            .get(url.as_str())
            .ok_or_else(|| IngestError::Network {
                url: url.to_string(),
                reason: "host unreachable".into(),
            })?;
        if !(200..300).contains(&page.status) {
            return Err(IngestError::Network {
                url: url.to_string(),
                reason: format!("HTTP {}", page.status),
            });
        }
        Ok(FetchedBody {
            content_type: Some(page.content_type.clone()),
            body: page.body.clone().into_bytes(),
        })
    }
}

/// Fetches URLs and normalizes them into [`Document`]s, with a shared cap on
/// in-flight requests.
#[derive(Clone)]
pub struct PageFetcher {
    fetcher: Arc<dyn Fetcher>,
    timeout: Duration,
    slots: Arc<Semaphore>,
}

impl PageFetcher {
    pub const DEFAULT_IN_FLIGHT: usize = 4;

    pub fn new(
        fetcher: Arc<dyn Fetcher>,
        timeout_ms: u64,
        max_in_flight: usize,
    ) -> Result<Self, IngestError> {
        if timeout_ms == 0 {
            return Err(IngestError::InvalidArgument(
                "timeout_ms must be positive".into(),
            ));
        }
        Ok(Self {
            fetcher,
            timeout: Duration::from_millis(timeout_ms),
            slots: Arc::new(Semaphore::new(max_in_flight.max(1))),
        })
    }

    /// Fetches a URL as a preferred source.
    pub async fn fetch_url(&self, url: &str) -> Result<Document, IngestError> {
        self.fetch_as(url, SourceKind::PreferredUrl).await
    }

    pub async fn fetch_as(&self, url: &str, kind: SourceKind) -> Result<Document, IngestError> {
        let parsed = parse_absolute_url(url)?;
        let fetched = {
            let _slot = self
                .slots
                .acquire()
                .await
                .map_err(|e| IngestError::Network {
                    url: url.to_string(),
                    reason: e.to_string(),
                })?;
            self.fetcher.get(&parsed, self.timeout).await?
        };
        let (text, title) = normalize_body(url, &fetched)?;
        let source = SourceRef::unchecked(kind, url.to_string(), title, Utc::now());
        Document::new(source, text)
    }
}

fn normalize_body(
    url: &str,
    fetched: &FetchedBody,
) -> Result<(String, Option<String>), IngestError> {
    let mime = fetched
        .content_type
        .as_deref()
        .and_then(|ct| ct.split(';').next())
        .map(|m| m.trim().to_ascii_lowercase())
        .unwrap_or_default();
    let not_text = || IngestError::NotText {
        url: url.to_string(),
        content_type: fetched
            .content_type
            .clone()
            .unwrap_or_else(|| "unknown".into()),
    };
    let as_text = || {
        std::str::from_utf8(&fetched.body)
            .map(str::to_string)
            .map_err(|_| not_text())
    };

    let is_html = match mime.as_str() {
        "text/html" | "application/xhtml+xml" => true,
        "" => {
            let text = as_text()?;
            text.trim_start().starts_with('<')
        }
        m if m.starts_with("text/") || m == "application/json" || m.ends_with("+json") => false,
        _ => return Err(not_text()),
    };
    let raw = String::from_utf8_lossy(&fetched.body);
    if is_html {
        Ok((html_to_markdown(&raw), html_title(&raw)))
    } else {
        Ok((raw.trim().to_string(), None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fetcher(pages: StaticFetcher) -> PageFetcher {
        PageFetcher::new(Arc::new(pages), 1000, 4).unwrap()
    }

    #[tokio::test]
    async fn static_html_is_normalized() {
        let pages = StaticFetcher::new().with_page(
            "http://fixture.local/rates",
            StaticPage::html("<html><body><h1>Rates</h1><p>Fed holds.</p></body></html>"),
        );
        let doc = fetcher(pages)
            .fetch_url("http://fixture.local/rates")
            .await
            .unwrap();
        assert_eq!(doc.text, "# Rates\n\nFed holds.");
        assert_eq!(doc.source.kind, SourceKind::PreferredUrl);
    }

    #[tokio::test]
    async fn binary_content_is_not_text() {
        let pages = StaticFetcher::new().with_page(
            "http://fixture.local/img",
            StaticPage {
                status: 200,
                content_type: "image/png".into(),
                body: "\u{89}PNG".into(),
            },
        );
        let err = fetcher(pages)
            .fetch_url("http://fixture.local/img")
            .await
            .unwrap_err();
        assert!(matches!(err, IngestError::NotText { .. }));
    }

    #[tokio::test]
    async fn json_endpoints_pass_through() {
        let pages = StaticFetcher::new().with_page(
            "http://api.local/q",
            StaticPage {
                status: 200,
                content_type: "application/json".into(),
                body: " {\"px\": 101.5} ".into(),
            },
        );
        let doc = fetcher(pages)
            .fetch_url("http://api.local/q")
            .await
            .unwrap();
        assert_eq!(doc.text, "{\"px\": 101.5}");
    }

    #[test]
    fn zero_timeout_rejected() {
        assert!(PageFetcher::new(Arc::new(StaticFetcher::new()), 0, 4).is_err());
    }
}
