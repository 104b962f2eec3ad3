//! Context gathering in priority order (preferred sources, local files, web
//! search, then the vector store) and token-budgeted packing.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{cosine, fnv1a64, Embedder, EmbeddingVector, Tokenizer, WordTokenizer};
use crate::ingest::{
    chunk_document, parse_absolute_url, parse_local_file, substitute_query, web_search_detailed,
    ChunkConfig, ConverterMap, Document, PageFetcher, SearchProvider, SourceKind, SourceRef,
    DEFAULT_WEB_RESULTS,
};
use crate::vecstore::{Store, CORPUS_COLLECTION, INTERACTIONS_COLLECTION};

pub const DEFAULT_K_PER_TIER: usize = 4;
pub const DEFAULT_BUDGET_TOKENS: usize = 8000;
pub const MIN_BUDGET_TOKENS: usize = 64;
pub const DEFAULT_SOURCE_TTL: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Preferred = 0,
    Local = 1,
    Web = 2,
    Store = 3,
}

impl Tier {
    pub fn for_kind(kind: SourceKind) -> Self {
        match kind {
            SourceKind::PreferredUrl => Tier::Preferred,
            SourceKind::LocalFile => Tier::Local,
            SourceKind::WebSearch => Tier::Web,
            SourceKind::StoreRecord => Tier::Store,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UserPreferences {
    pub preferred_urls: Vec<String>,
    /// URL templates; `{query}` is replaced by the percent-encoded query.
    pub api_endpoints: Vec<String>,
    pub local_paths: Vec<PathBuf>,
    pub web_search_enabled: bool,
    pub k_web: usize,
}

impl Default for UserPreferences {
    fn default() -> Self {
        Self {
            preferred_urls: Vec::new(),
            api_endpoints: Vec::new(),
            local_paths: Vec::new(),
            web_search_enabled: true,
            k_web: DEFAULT_WEB_RESULTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid {field}[{index}]: `{entry}`")]
pub struct PreferenceError {
    pub field: &'static str,
    pub index: usize,
    pub entry: String,
}

impl UserPreferences {
    pub fn validate(&self) -> Result<(), PreferenceError> {
        for (index, url) in self.preferred_urls.iter().enumerate() {
            if parse_absolute_url(url).is_err() {
                return Err(PreferenceError {
                    field: "preferred_urls",
                    index,
                    entry: url.clone(),
                });
            }
        }
        for (index, template) in self.api_endpoints.iter().enumerate() {
            if parse_absolute_url(&substitute_query(template, "q")).is_err() {
                return Err(PreferenceError {
                    field: "api_endpoints",
                    index,
                    entry: template.clone(),
                });
            }
        }
        for (index, path) in self.local_paths.iter().enumerate() {
            if path.as_os_str().is_empty() {
                return Err(PreferenceError {
                    field: "local_paths",
                    index,
                    entry: String::new(),
                });
            }
        }
        if self.k_web == 0 {
            return Err(PreferenceError {
                field: "k_web",
                index: 0,
                entry: "0".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextItem {
    pub text: String,
    pub source: SourceRef,
    pub score: f64,
    pub tier: Tier,
    pub content_hash: u64,
}

/// A tier-level problem that did not stop retrieval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub tier: Tier,
    pub source: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Gathered {
    pub items: Vec<ContextItem>,
    pub diagnostics: Vec<Diagnostic>,
}

struct Candidate {
    text: String,
    source: SourceRef,
    hash: u64,
}

/// Retrieval settings and collaborators.
pub struct Retriever {
    pages: PageFetcher,
    search: Option<Arc<dyn SearchProvider>>,
    embedder: Arc<dyn Embedder>,
    chunking: ChunkConfig,
    converters: ConverterMap,
    store_collections: Vec<String>,
    source_ttl: Duration,
    cache: Mutex<HashMap<String, (Instant, Document)>>,
}

impl Retriever {
    pub fn new(pages: PageFetcher, embedder: Arc<dyn Embedder>) -> Self {
        Self {
            pages,
            search: None,
            embedder,
            chunking: ChunkConfig::default(),
            converters: ConverterMap::new(),
            store_collections: vec![CORPUS_COLLECTION.into(), INTERACTIONS_COLLECTION.into()],
            source_ttl: DEFAULT_SOURCE_TTL,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_search(mut self, provider: Arc<dyn SearchProvider>) -> Self {
        self.search = Some(provider);
        self
    }

    pub fn with_chunking(mut self, chunking: ChunkConfig) -> Self {
        self.chunking = chunking;
        self
    }

    pub fn with_converters(mut self, converters: ConverterMap) -> Self {
        self.converters = converters;
        self
    }

    /// Collections searched for the store tier; empty disables the tier.
    pub fn with_store_collections(mut self, collections: Vec<String>) -> Self {
        self.store_collections = collections;
        self
    }

    /// How long a fetched preferred source is reused. Zero disables caching.
    pub fn with_source_ttl(mut self, ttl: Duration) -> Self {
        self.source_ttl = ttl;
        self
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    /// Collects ranked context for `query`.
    ///
    /// Each tier is ranked by cosine similarity to the query and cut to
    /// `k_per_tier`. A chunk whose content hash already appeared in a
    /// lower-numbered tier (or earlier in its own tier) is dropped before the
    /// cut, so the selection in each tier only grows with `k_per_tier`.
    pub async fn gather_context(
        &self,
        query: &str,
        prefs: &UserPreferences,
        store: Option<&Store>,
        k_per_tier: usize,
    ) -> Gathered {
        let mut out = Gathered::default();
        if query.trim().is_empty() || k_per_tier == 0 {
            return out;
        }
        let query_vec = match self.embedder.embed(query).await {
            Ok(v) => v,
            Err(e) => {
                out.diagnostics.push(Diagnostic {
                    tier: Tier::Preferred,
                    source: "query".into(),
                    message: format!("could not embed query: {e}"),
                });
                return out;
            }
        };

        let (preferred, local, web) = futures::join!(
            self.preferred_tier(query, prefs),
            async { self.local_tier(prefs) },
            self.web_tier(query, prefs),
        );

        let mut seen = HashSet::new();
        for (tier, (docs, diags)) in [
            (Tier::Preferred, preferred),
            (Tier::Local, local),
            (Tier::Web, web),
        ] {
            out.diagnostics.extend(diags);
            let candidates = self.chunk_all(&docs);
            let ranked = self
                .rank(tier, candidates, &query_vec, &mut out.diagnostics)
                .await;
            let kept: Vec<ContextItem> = ranked
                .into_iter()
                .filter(|c| seen.insert(c.content_hash))
                .collect();
            out.items.extend(kept.into_iter().take(k_per_tier));
        }

        if let Some(store) = store {
            let (items, diags) = self.store_tier(store, &query_vec, k_per_tier, &seen);
            out.items.extend(items);
            out.diagnostics.extend(diags);
        }
        out
    }

    async fn preferred_tier(
        &self,
        query: &str,
        prefs: &UserPreferences,
    ) -> (Vec<Document>, Vec<Diagnostic>) {
        let urls: Vec<String> = prefs
            .preferred_urls
            .iter()
            .cloned()
            .chain(
                prefs
                    .api_endpoints
                    .iter()
                    .map(|t| substitute_query(t, query)),
            )
            .collect();
        let results: Vec<_> = stream::iter(urls)
            .map(|url| async move {
                let res = self.fetch_cached(&url).await;
                (url, res)
            })
            .buffered(PageFetcher::DEFAULT_IN_FLIGHT)
            .collect()
            .await;
        let mut docs = Vec::new();
        let mut diags = Vec::new();
        for (url, res) in results {
            match res {
                Ok(doc) => docs.push(doc),
                Err(e) => diags.push(Diagnostic {
                    tier: Tier::Preferred,
                    source: url,
                    message: e.to_string(),
                }),
            }
        }
        (docs, diags)
    }

    async fn fetch_cached(&self, url: &str) -> Result<Document, crate::ingest::IngestError> {
        if !self.source_ttl.is_zero() {
            if let Some((at, doc)) = self.cache.lock().get(url) {
                if at.elapsed() < self.source_ttl {
                    return Ok(doc.clone());
                }
            }
        }
        let doc = self.pages.fetch_url(url).await?;
        if !self.source_ttl.is_zero() {
            self.cache
                .lock()
                .insert(url.to_string(), (Instant::now(), doc.clone()));
        }
        Ok(doc)
    }

    fn local_tier(&self, prefs: &UserPreferences) -> (Vec<Document>, Vec<Diagnostic>) {
        let mut docs = Vec::new();
        let mut diags = Vec::new();
        for path in &prefs.local_paths {
            match parse_local_file(path, &self.converters) {
                Ok(doc) => docs.push(doc),
                Err(e) => diags.push(Diagnostic {
                    tier: Tier::Local,
                    source: path.display().to_string(),
                    message: e.to_string(),
                }),
            }
        }
        (docs, diags)
    }

    async fn web_tier(
        &self,
        query: &str,
        prefs: &UserPreferences,
    ) -> (Vec<Document>, Vec<Diagnostic>) {
        if !prefs.web_search_enabled {
            return (Vec::new(), Vec::new());
        }
        let diag = |source: &str, message: String| Diagnostic {
            tier: Tier::Web,
            source: source.to_string(),
            message,
        };
        let Some(provider) = &self.search else {
            return (
                Vec::new(),
                vec![diag("search", "no search provider configured".into())],
            );
        };
        match web_search_detailed(provider.as_ref(), &self.pages, query, prefs.k_web.max(1)).await {
            Ok(outcome) => {
                let diags = outcome
                    .failures
                    .into_iter()
                    .map(|(url, e)| diag(&url, e.to_string()))
                    .collect();
                (outcome.documents, diags)
            }
            Err(e) => (Vec::new(), vec![diag("search", e.to_string())]),
        }
    }

    fn chunk_all(&self, docs: &[Document]) -> Vec<Candidate> {
        docs.iter()
            .flat_map(|doc| chunk_document(doc, &WordTokenizer, self.chunking))
            .filter_map(|chunk| {
                let text = chunk.text.trim().to_string();
                (!text.is_empty()).then(|| Candidate {
                    hash: fnv1a64(text.as_bytes()),
                    text,
                    source: chunk.doc_source,
                })
            })
            .collect()
    }

    /// Scores candidates against the query; best first, ties in input order.
    async fn rank(
        &self,
        tier: Tier,
        candidates: Vec<Candidate>,
        query: &EmbeddingVector,
        diags: &mut Vec<Diagnostic>,
    ) -> Vec<ContextItem> {
        let mut scored = Vec::with_capacity(candidates.len());
        for (order, c) in candidates.into_iter().enumerate() {
            let score = match self.embedder.embed(&c.text).await {
                Ok(v) => cosine(query, &v).unwrap_or(0.0),
                Err(e) => {
                    diags.push(Diagnostic {
                        tier,
                        source: c.source.uri.clone(),
                        message: format!("embedding failed: {e}"),
                    });
                    continue;
                }
            };
            scored.push((
                order,
                ContextItem {
                    text: c.text,
                    source: c.source,
                    score: score + 0.0,
                    tier,
                    content_hash: c.hash,
                },
            ));
        }
        scored.sort_by(|(oa, a), (ob, b)| b.score.total_cmp(&a.score).then(oa.cmp(ob)));
        scored.into_iter().map(|(_, item)| item).collect()
    }

    fn store_tier(
        &self,
        store: &Store,
        query: &EmbeddingVector,
        k: usize,
        seen: &HashSet<u64>,
    ) -> (Vec<ContextItem>, Vec<Diagnostic>) {
        let mut diags = Vec::new();
        let mut pool = Vec::new();
        for collection in &self.store_collections {
            let total = store.collection_len(collection);
            if total == 0 {
                continue;
            }
            // Ask for extra hits to make up for duplicates that get dropped.
            let mut want = (k + seen.len()).min(total);
            loop {
                match store.search(collection, query, want) {
                    Ok(hits) => {
                        let fresh = hits
                            .iter()
                            .filter(|h| !seen.contains(&fnv1a64(h.payload_text.trim().as_bytes())))
                            .count();
                        if fresh >= k || want >= total {
                            pool.extend(hits.into_iter().map(|h| (collection.clone(), h)));
                            break;
                        }
                        want = (want * 2).min(total);
                    }
                    Err(e) => {
                        diags.push(Diagnostic {
                            tier: Tier::Store,
                            source: collection.clone(),
                            message: e.to_string(),
                        });
                        break;
                    }
                }
            }
        }
        pool.sort_by(|(_, a), (_, b)| {
            b.score
                .total_cmp(&a.score)
                .then(a.record_id.cmp(&b.record_id))
        });

        let mut local_seen = seen.clone();
        let mut items = Vec::new();
        for (collection, hit) in pool {
            if items.len() == k {
                break;
            }
            let text = hit.payload_text.trim().to_string();
            let hash = fnv1a64(text.as_bytes());
            if text.is_empty() || !local_seen.insert(hash) {
                continue;
            }
            let source = if hit.source.kind == SourceKind::StoreRecord {
                hit.source
            } else {
                SourceRef::store_record(
                    format!("store://{collection}/{}", hit.record_id),
                    Some(hit.source.title.unwrap_or(hit.source.uri)),
                )
            };
            items.push(ContextItem {
                text,
                source,
                score: hit.score,
                tier: Tier::Store,
                content_hash: hash,
            });
        }
        (items, diags)
    }
}

/// One completed query/response exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub query: String,
    pub response: String,
}

impl Turn {
    pub fn render(&self) -> String {
        format!("User: {}\nAssistant: {}", self.query, self.response)
    }
}

/// A context item together with its 1-based source tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedItem {
    pub tag: usize,
    pub item: ContextItem,
}

impl PackedItem {
    pub fn render(&self) -> String {
        format!(
            "[{}] {}\n{}",
            self.tag, self.item.source.uri, self.item.text
        )
    }
}

/// The history and tagged sources handed to the generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub items: Vec<PackedItem>,
    pub history: Vec<Turn>,
    pub budget_tokens: usize,
}

impl ContextWindow {
    /// The tagged sources as one block of text.
    pub fn render_sources(&self) -> String {
        self.items
            .iter()
            .map(PackedItem::render)
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    /// Tokens of history plus rendered sources.
    pub fn token_count(&self) -> usize {
        let history: usize = self
            .history
            .iter()
            .map(|t| WordTokenizer.count(&t.render()))
            .sum();
        history + WordTokenizer.count(&self.render_sources())
    }

    pub fn item(&self, tag: usize) -> Option<&PackedItem> {
        tag.checked_sub(1).and_then(|i| self.items.get(i))
    }
}

/// Fills the window greedily in item order.
///
/// History is counted first. When it alone takes more than half the budget
/// the oldest turns are dropped until it fits in half. Items are then added
/// in order until the next one would overflow the budget.
pub fn pack_context(
    items: &[ContextItem],
    history: &[Turn],
    budget_tokens: usize,
) -> ContextWindow {
    let cost = |t: &Turn| WordTokenizer.count(&t.render());
    let mut history: Vec<Turn> = history.to_vec();
    let mut used: usize = history.iter().map(cost).sum();
    let half = budget_tokens / 2;
    if used > half {
        let mut drop = 0;
        while used > half && drop < history.len() {
            used -= cost(&history[drop]);
            drop += 1;
        }
        history.drain(..drop);
    }

    let mut packed = Vec::new();
    for item in items {
        let candidate = PackedItem {
            tag: packed.len() + 1,
            item: item.clone(),
        };
        let c = WordTokenizer.count(&candidate.render());
        if used + c > budget_tokens {
            break;
        }
        used += c;
        packed.push(candidate);
    }
    ContextWindow {
        items: packed,
        history,
        budget_tokens,
    }
}
