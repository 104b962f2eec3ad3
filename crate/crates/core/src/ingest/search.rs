use std::path::Path;
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};

use super::{Document, IngestError, PageFetcher, SourceKind};

/// Number of search results fetched when the caller does not say otherwise.
pub const DEFAULT_WEB_RESULTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub url: String,
    #[serde(default)]
    pub title: Option<String>,
}

/// Query in, ranked result URLs out.
#[async_trait]
pub trait SearchProvider: Send + Sync {
    async fn search(&self, query: &str) -> Result<Vec<SearchResult>, IngestError>;
}

/// Replaces every `{query}` in `template` with the percent-encoded query.
pub fn substitute_query(template: &str, query: &str) -> String {
    let encoded = utf8_percent_encode(query, NON_ALPHANUMERIC).to_string();
    template.replace("{query}", &encoded)
}

/// GETs a URL template and expects a JSON array of `{url, title}`.
#[derive(Debug, Clone)]
pub struct HttpSearchProvider {
    client: reqwest::Client,
    template: String,
    timeout: Duration,
}

impl HttpSearchProvider {
    pub fn new(template: impl Into<String>, timeout: Duration) -> Self {
        Self {
            client: reqwest::Client::new(),
            template: template.into(),
            timeout,
        }
    }
}

#[async_trait]
impl SearchProvider for HttpSearchProvider {
    async fn search(&self, query: &str) -> Result<Vec<SearchResult>, IngestError> {
        let url = substitute_query(&self.template, query);
        let resp = self
            .client
            .get(&url)
            .timeout(self.timeout)
            .send()
            .await
            .map_err(|e| IngestError::Provider(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(IngestError::Provider(format!("HTTP {}", resp.status())));
        }
        resp.json()
            .await
            .map_err(|e| IngestError::Provider(format!("malformed result list: {e}")))
    }
}

/// Returns the same result list for every query.
#[derive(Debug, Clone, Default)]
pub struct FixtureSearchProvider {
    results: Vec<SearchResult>,
}

impl FixtureSearchProvider {
    pub fn new(results: Vec<SearchResult>) -> Self {
        Self { results }
    }

    pub fn from_urls<I, S>(urls: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(
            urls.into_iter()
                .map(|u| SearchResult {
                    url: u.into(),
                    title: None,
                })
                .collect(),
        )
    }

    /// Loads a JSON array of `{url, title}`.
    pub fn from_file(path: &Path) -> Result<Self, IngestError> {
        let raw = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let results = serde_json::from_str(&raw)
            .map_err(|e| IngestError::Provider(format!("{}: {e}", path.display())))?;
        Ok(Self { results })
    }
}

#[async_trait]
impl SearchProvider for FixtureSearchProvider {
    async fn search(&self, _query: &str) -> Result<Vec<SearchResult>, IngestError> {
        Ok(self.results.clone())
    }
}

/// Documents that fetched, plus the URLs that did not.
#[derive(Debug, Default)]
pub struct SearchOutcome {
    pub documents: Vec<Document>,
    pub failures: Vec<(String, IngestError)>,
}

/// Fetches the provider's top `k` results in rank order. Failed pages are
/// skipped.
pub async fn web_search(
    provider: &dyn SearchProvider,
    pages: &PageFetcher,
    query: &str,
    k: usize,
) -> Result<Vec<Document>, IngestError> {
    Ok(web_search_detailed(provider, pages, query, k)
        .await?
        .documents)
}

pub async fn web_search_detailed(
    provider: &dyn SearchProvider,
    pages: &PageFetcher,
    query: &str,
    k: usize,
) -> Result<SearchOutcome, IngestError> {
    if query.trim().is_empty() {
        return Err(IngestError::InvalidArgument("empty search query".into()));
    }
    if k == 0 {
        return Err(IngestError::InvalidArgument("k must be at least 1".into()));
    }
    let mut hits = provider.search(query).await?;
    hits.truncate(k);

    let fetched: Vec<_> = stream::iter(hits)
        .map(|hit| async move {
            let result = pages.fetch_as(&hit.url, SourceKind::WebSearch).await;
            (hit, result)
        })
        .buffered(PageFetcher::DEFAULT_IN_FLIGHT)
        .collect()
        .await;

    let mut outcome = SearchOutcome::default();
    for (hit, result) in fetched {
        match result {
            Ok(mut doc) => {
                if doc.source.title.is_none() {
                    doc.source.title = hit.title;
                }
                outcome.documents.push(doc);
            }
            Err(err) => {
                tracing::debug!(url = %hit.url, error = %err, "skipping search result");
                outcome.failures.push((hit.url, err));
            }
        }
    }
    Ok(outcome)
}
