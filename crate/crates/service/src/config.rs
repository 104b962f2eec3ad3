//! TOML configuration and agent assembly.
//!
//! Relative paths are resolved against the directory holding the config
//! file. API keys are never read from the file, only from the environment
//! variable a backend names.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use finsearch_core::agent::{Agent, AgentSettings};
use finsearch_core::embed::{Embedder, HashEmbedder, RemoteEmbedder, REFERENCE_DIM};
use finsearch_core::generate::{ChatBackend, HttpChatBackend, MockBackend};
use finsearch_core::ingest::{
    ChunkConfig, ConverterMap, FixtureSearchProvider, HttpFetcher, HttpSearchProvider, PageFetcher,
    SearchProvider,
};
use finsearch_core::prompt::{RefineMode, SessionStore};
use finsearch_core::retrieve::{Retriever, UserPreferences};
use finsearch_core::vecstore::{Store, CORPUS_COLLECTION, INTERACTIONS_COLLECTION};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot open store: {0}")]
    Store(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Individual,
    Institutional,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    Mock {
        #[serde(default)]
        delay_ms: u64,
    },
    Http {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_backend_timeout")]
        timeout_ms: u64,
    },
}

fn default_backend_timeout() -> u64 {
    120_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbedConfig {
    Hash,
    Http {
        url: String,
        dim: usize,
        #[serde(default = "default_fetch_timeout")]
        timeout_ms: u64,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
}

fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SearchConfig {
    /// `url_template` contains `{query}`; the endpoint answers with a JSON
    /// array of `{url, title}`.
    Http {
        url_template: String,
        #[serde(default = "default_fetch_timeout")]
        timeout_ms: u64,
    },
    /// Fixed results from a JSON file, for offline use.
    Fixture { path: PathBuf },
}

fn default_fetch_timeout() -> u64 {
    10_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k_per_tier: usize,
    pub budget_tokens: usize,
    pub k_web: usize,
    pub chunk_tokens: usize,
    pub overlap_tokens: usize,
    pub fetch_timeout_ms: u64,
    pub fetch_in_flight: usize,
    pub source_ttl_secs: u64,
    pub store_tier: bool,
    pub refine: RefineMode,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let settings = AgentSettings::default();
        let chunk = ChunkConfig::default();
        Self {
            k_per_tier: settings.k_per_tier,
            budget_tokens: settings.budget_tokens,
            k_web: UserPreferences::default().k_web,
            chunk_tokens: chunk.chunk_tokens,
            overlap_tokens: chunk.overlap_tokens,
            fetch_timeout_ms: default_fetch_timeout(),
            fetch_in_flight: PageFetcher::DEFAULT_IN_FLIGHT,
            source_ttl_secs: 300,
            store_tier: true,
            refine: RefineMode::Template,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Train the built-in linear scorer on store embeddings.
    Linear,
    /// Write an SFT dataset for an external trainer.
    SftExport,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub collection: String,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Output of `sft_export`, relative to `store_dir` unless absolute.
    pub export_path: PathBuf,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Linear,
            collection: INTERACTIONS_COLLECTION.into(),
            batch_size: 16,
            epochs: 20,
            lr: 0.05,
            seed: 0,
            export_path: PathBuf::from("sft.jsonl"),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub profile: Profile,
    pub store_dir: PathBuf,
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    /// Required when more than one backend is configured.
    #[serde(default)]
    pub default_backend: Option<String>,
    pub backends: BTreeMap<String, BackendConfig>,
    #[serde(default = "default_embed")]
    pub embed: EmbedConfig,
    #[serde(default)]
    pub search: Option<SearchConfig>,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    /// Extension (without dot) to converter command.
    #[serde(default)]
    pub converters: BTreeMap<String, String>,
    /// Starting preferences for every new session.
    #[serde(default)]
    pub preferences: Option<UserPreferences>,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    /// Static files served under `/`.
    #[serde(default)]
    pub ui_dir: Option<PathBuf>,
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_embed() -> EmbedConfig {
    EmbedConfig::Hash
}

impl AgentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.default_backend_id()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.store_dir);
        if let Some(dir) = self.ui_dir.as_mut() {
            fix(dir);
        }
        if let Some(SearchConfig::Fixture { path }) = self.search.as_mut() {
            fix(path);
        }
        if let Some(prefs) = self.preferences.as_mut() {
            prefs.local_paths.iter_mut().for_each(fix);
        }
    }

    /// The one backend answering queries.
    pub fn default_backend_id(&self) -> Result<&str, ConfigError> {
        match (&self.default_backend, self.backends.len()) {
            (_, 0) => Err(ConfigError::Invalid(
                "at least one backend must be configured".into(),
            )),
            (Some(id), _) if self.backends.contains_key(id) => Ok(id),
            (Some(id), _) => Err(ConfigError::Invalid(format!(
                "default_backend `{id}` is not configured"
            ))),
            (None, 1) => Ok(self.backends.keys().next().expect("one backend")),
            (None, _) => Err(ConfigError::Invalid(
                "several backends configured; set default_backend".into(),
            )),
        }
    }

    pub fn embedder(&self) -> Arc<dyn Embedder> {
        match &self.embed {
            EmbedConfig::Hash => Arc::new(HashEmbedder),
            EmbedConfig::Http {
                url,
                dim,
                timeout_ms,
                max_in_flight,
            } => Arc::new(RemoteEmbedder::new(
                url.clone(),
                *dim,
                Duration::from_millis(*timeout_ms),
                *max_in_flight,
            )),
        }
    }

    pub fn embed_dim(&self) -> usize {
        match &self.embed {
            EmbedConfig::Hash => REFERENCE_DIM,
            EmbedConfig::Http { dim, .. } => *dim,
        }
    }

    fn backend(
        &self,
        id: &str,
        config: &BackendConfig,
    ) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        Ok(match config {
            BackendConfig::Mock { delay_ms } => {
                Arc::new(MockBackend::new(id).with_delay(Duration::from_millis(*delay_ms)))
            }
            BackendConfig::Http {
                base_url,
                model,
                api_key_env,
                timeout_ms,
            } => Arc::new(
                HttpChatBackend::new(
                    id,
                    base_url,
                    model.clone(),
                    api_key_env.as_deref(),
                    Duration::from_millis(*timeout_ms),
                )
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            ),
        })
    }

    pub fn settings(&self) -> AgentSettings {
        let mut prefs = self.preferences.clone().unwrap_or_default();
        if self.preferences.is_none() {
            prefs.k_web = self.retrieval.k_web;
        }
        AgentSettings {
            k_per_tier: self.retrieval.k_per_tier,
            budget_tokens: self.retrieval.budget_tokens,
            refine: self.retrieval.refine,
            default_preferences: prefs,
        }
    }

    /// Opens the store in `store_dir` and assembles an agent.
    pub fn build_agent(&self) -> Result<Agent, ConfigError> {
        std::fs::create_dir_all(&self.store_dir).map_err(|e| ConfigError::Read {
            path: self.store_dir.clone(),
            reason: e.to_string(),
        })?;
        let embedder = self.embedder();
        let (store, report) = Store::open(&self.store_dir, embedder.clone())
            .map_err(|e| ConfigError::Store(e.to_string()))?;
        if let Some(t) = &report.truncation {
            tracing::warn!(
                discarded = t.discarded_bytes,
                "store log had a damaged tail ({}); kept {} bytes",
                t.fault,
                t.valid_bytes
            );
        }
        let sessions =
            SessionStore::open(&self.store_dir).map_err(|e| ConfigError::Store(e.to_string()))?;
        self.assemble(Arc::new(store), sessions, embedder)
    }

    /// Assembles an agent around an already opened store.
    pub fn assemble(
        &self,
        store: Arc<Store>,
        sessions: SessionStore,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Agent, ConfigError> {
        let r = &self.retrieval;
        let pages = PageFetcher::new(
            Arc::new(HttpFetcher::new()),
            r.fetch_timeout_ms,
            r.fetch_in_flight,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let chunking = ChunkConfig::new(r.chunk_tokens, r.overlap_tokens)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let converters: ConverterMap = self
            .converters
            .iter()
            .map(|(ext, cmd)| {
                (
                    ext.trim_start_matches('.').to_ascii_lowercase(),
                    cmd.clone(),
                )
            })
            .collect();
        let collections = if r.store_tier {
            vec![
                CORPUS_COLLECTION.to_string(),
                INTERACTIONS_COLLECTION.to_string(),
            ]
        } else {
            Vec::new()
        };
        let mut retriever = Retriever::new(pages, embedder)
            .with_chunking(chunking)
            .with_converters(converters)
            .with_store_collections(collections)
            .with_source_ttl(Duration::from_secs(r.source_ttl_secs));
        if let Some(search) = &self.search {
            let provider: Arc<dyn SearchProvider> = match search {
                SearchConfig::Http {
                    url_template,
                    timeout_ms,
                } => Arc::new(HttpSearchProvider::new(
                    url_template.clone(),
                    Duration::from_millis(*timeout_ms),
                )),
                SearchConfig::Fixture { path } => Arc::new(
                    FixtureSearchProvider::from_file(path)
                        .map_err(|e| ConfigError::Invalid(e.to_string()))?,
                ),
            };
            retriever = retriever.with_search(provider);
        }

        let default_id = self.default_backend_id()?.to_string();
        let default = self.backend(&default_id, &self.backends[&default_id])?;
        let mut agent = Agent::new(retriever, store, sessions, default, self.settings())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (id, cfg) in &self.backends {
            if *id != default_id {
                agent.add_backend(self.backend(id, cfg)?, false);
            }
        }
        Ok(agent)
    }
}
