//! The query pipeline: gather, pack, refine, generate, write back.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::AgentEndpoint;
use crate::generate::{
    complete, elapsed_ms, AgentResponse, BackendRequest, ChatBackend, ChatMessage, CitedSource,
    Feedback, GenerateError, Role,
};
use crate::ingest::SourceRef;
use crate::prompt::{
    from_rewrite, refine_query, RefineMode, RefinedPrompt, SessionError, SessionStore,
};
use crate::retrieve::{
    pack_context, ContextWindow, Diagnostic, PreferenceError, Retriever, Turn, UserPreferences,
    DEFAULT_BUDGET_TOKENS, DEFAULT_K_PER_TIER, MIN_BUDGET_TOKENS,
};
use crate::vecstore::{RecordKind, Store, StoreError};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("query must not be empty")]
    EmptyQuery,
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Preferences(#[from] PreferenceError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSettings {
    pub k_per_tier: usize,
    pub budget_tokens: usize,
    pub refine: RefineMode,
    /// Preferences every new session starts with.
    pub default_preferences: UserPreferences,
}

impl Default for AgentSettings {
    fn default() -> Self {
        Self {
            k_per_tier: DEFAULT_K_PER_TIER,
            budget_tokens: DEFAULT_BUDGET_TOKENS,
            refine: RefineMode::Template,
            default_preferences: UserPreferences::default(),
        }
    }
}

impl AgentSettings {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.k_per_tier == 0 {
            return Err(AgentError::Config("k_per_tier must be at least 1".into()));
        }
        if self.budget_tokens < MIN_BUDGET_TOKENS {
            return Err(AgentError::Config(format!(
                "budget_tokens must be at least {MIN_BUDGET_TOKENS}, got {}",
                self.budget_tokens
            )));
        }
        self.default_preferences.validate()?;
        Ok(())
    }
}

/// Result of one query.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub session_id: String,
    pub response: AgentResponse,
    pub window: ContextWindow,
    pub refined: RefinedPrompt,
    pub diagnostics: Vec<Diagnostic>,
}

/// One record of a dataset upload.
#[derive(Debug, Clone, Deserialize)]
pub struct DatasetRecord {
    pub text: String,
    pub source_uri: String,
    #[serde(default)]
    pub title: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestSummary {
    pub inserted: usize,
    pub errors: Vec<LineError>,
}

pub struct Agent {
    retriever: Retriever,
    store: Arc<Store>,
    sessions: SessionStore,
    backends: BTreeMap<String, Arc<dyn ChatBackend>>,
    default_backend: String,
    settings: AgentSettings,
}

impl Agent {
    pub fn new(
        retriever: Retriever,
        store: Arc<Store>,
        sessions: SessionStore,
        backend: Arc<dyn ChatBackend>,
        settings: AgentSettings,
    ) -> Result<Self, AgentError> {
        settings.validate()?;
        let id = backend.id().to_string();
        Ok(Self {
            retriever,
            store,
            sessions,
            backends: BTreeMap::from([(id.clone(), backend)]),
            default_backend: id,
            settings,
        })
    }

    /// Registers another backend, optionally making it the default.
    pub fn add_backend(&mut self, backend: Arc<dyn ChatBackend>, make_default: bool) {
        let id = backend.id().to_string();
        if make_default {
            self.default_backend = id.clone();
        }
        self.backends.insert(id, backend);
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }

    pub fn settings(&self) -> &AgentSettings {
        &self.settings
    }

    pub fn default_backend(&self) -> &str {
        &self.default_backend
    }

    pub fn backend(&self, id: &str) -> Result<&Arc<dyn ChatBackend>, AgentError> {
        self.backends
            .get(id)
            .ok_or_else(|| AgentError::UnknownBackend(id.to_string()))
    }

    pub async fn create_session(&self) -> Result<String, AgentError> {
        let (id, session) = self.sessions.create();
        session.lock().await.preferences = self.settings.default_preferences.clone();
        self.sessions.persist().await?;
        Ok(id)
    }

    /// Runs the full pipeline. Without a session id a new session is opened.
    /// Queries in one session run one at a time; the reported latency covers
    /// everything from arrival to the write-back.
    pub async fn handle_query(
        &self,
        session_id: Option<&str>,
        query: &str,
    ) -> Result<QueryOutcome, AgentError> {
        let started = Instant::now();
        let query = query.trim();
        if query.is_empty() {
            return Err(AgentError::EmptyQuery);
        }
        let session_id = match session_id {
            Some(id) => id.to_string(),
            None => self.create_session().await?,
        };
        let handle = self.sessions.get(&session_id)?;
        let mut session = handle.lock().await;
        let backend = self.backend(&self.default_backend)?.clone();

        let gathered = self
            .retriever
            .gather_context(
                query,
                &session.preferences,
                Some(&self.store),
                self.settings.k_per_tier,
            )
            .await;
        for d in &gathered.diagnostics {
            tracing::debug!(tier = ?d.tier, source = %d.source, "{}", d.message);
        }
        let window = pack_context(&gathered.items, &session.turns, self.settings.budget_tokens);
        let refined = match self.settings.refine {
            RefineMode::Template => refine_query(query, &window),
            RefineMode::Model => self.model_refine(backend.as_ref(), query, &window).await?,
        };
        let mut response = complete(&window, &refined, backend.as_ref(), started).await?;
        self.store
            .record_interaction(&session_id, &response, None)
            .await?;

        session.append_turn(
            Turn {
                query: query.to_string(),
                response: response.text.clone(),
            },
            &response.sources_used,
        );
        if let Err(e) = self.sessions.persist_with(&session).await {
            tracing::warn!("could not persist sessions: {e}");
        }
        response.latency_ms = elapsed_ms(started);
        Ok(QueryOutcome {
            session_id,
            response,
            window,
            refined,
            diagnostics: gathered.diagnostics,
        })
    }

    async fn model_refine(
        &self,
        backend: &dyn ChatBackend,
        query: &str,
        window: &ContextWindow,
    ) -> Result<RefinedPrompt, AgentError> {
        let tags: Vec<String> = window
            .items
            .iter()
            .map(|i| format!("[{}]", i.tag))
            .collect();
        let instruction = format!(
            "Rewrite the user's question as a precise, self-contained research prompt. \
             Keep the question itself verbatim and refer to the available sources {}.",
            if tags.is_empty() {
                "(none)".to_string()
            } else {
                tags.join(" ")
            }
        );
        let messages = vec![
            ChatMessage::new(Role::System, instruction)?,
            ChatMessage::new(Role::User, query)?,
        ];
        let placeholder = refine_query(query, window);
        let rewrite = backend
            .reply(&BackendRequest {
                messages: &messages,
                window,
                refined: &placeholder,
            })
            .await?;
        Ok(from_rewrite(query, &rewrite, window))
    }

    pub async fn preferences(&self, session_id: &str) -> Result<UserPreferences, AgentError> {
        Ok(self
            .sessions
            .get(session_id)?
            .lock()
            .await
            .preferences
            .clone())
    }

    /// Replaces the session's preferences after validating every entry.
    pub async fn set_preferences(
        &self,
        session_id: &str,
        prefs: UserPreferences,
    ) -> Result<(), AgentError> {
        prefs.validate()?;
        let handle = self.sessions.get(session_id)?;
        let mut session = handle.lock().await;
        session.preferences = prefs;
        self.sessions.persist_with(&session).await?;
        Ok(())
    }

    /// Every source cited in the session since it was last cleared.
    pub async fn sources(&self, session_id: &str) -> Result<Vec<CitedSource>, AgentError> {
        Ok(self.sessions.get(session_id)?.lock().await.sources.clone())
    }

    pub async fn clear(&self, session_id: &str) -> Result<(), AgentError> {
        self.sessions.clear_session(session_id).await?;
        Ok(())
    }

    pub async fn feedback(&self, session_id: &str, feedback: &Feedback) -> Result<u64, AgentError> {
        self.sessions.get(session_id)?;
        Ok(self.store.record_feedback(session_id, feedback).await?)
    }

    /// Inserts line-delimited `{text, source_uri}` records as corpus.
    /// Bad lines are reported and skipped; blank lines are ignored.
    pub async fn ingest_dataset(
        &self,
        collection: &str,
        body: &str,
    ) -> Result<IngestSummary, AgentError> {
        let mut summary = IngestSummary::default();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fail = |message: String| LineError {
                line: i + 1,
                message,
            };
            let rec: DatasetRecord = match serde_json::from_str(line) {
                Ok(r) => r,
                Err(e) => {
                    summary.errors.push(fail(e.to_string()));
                    continue;
                }
            };
            if rec.source_uri.trim().is_empty() {
                summary.errors.push(fail("source_uri is empty".into()));
                continue;
            }
            let source = SourceRef::store_record(rec.source_uri, rec.title);
            match self
                .store
                .insert(collection, &rec.text, source, RecordKind::Corpus)
                .await
            {
                Ok(_) => summary.inserted += 1,
                Err(e @ (StoreError::InvalidCollection(_) | StoreError::Storage(_))) => {
                    return Err(e.into())
                }
                Err(e) => summary.errors.push(fail(e.to_string())),
            }
        }
        Ok(summary)
    }
}

#[async_trait]
impl AgentEndpoint for Agent {
    async fn ask(&self, query: &str) -> Result<String, String> {
        self.handle_query(None, query)
            .await
            .map(|o| o.response.text)
            .map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedder;
    use crate::generate::MockBackend;
    use crate::ingest::{PageFetcher, StaticFetcher, StaticPage};
    use crate::retrieve::Tier;

    fn agent(fetcher: StaticFetcher) -> Agent {
        let embedder = Arc::new(HashEmbedder);
        let pages = PageFetcher::new(Arc::new(fetcher), 1000, 4).unwrap();
        Agent::new(
            Retriever::new(pages, embedder.clone()),
            Arc::new(Store::in_memory(embedder)),
            SessionStore::in_memory(),
            Arc::new(MockBackend::default()),
            AgentSettings::default(),
        )
        .unwrap()
    }

    #[tokio::test]
    async fn preferred_fact_is_answered_and_cited() {
        let fetcher = StaticFetcher::new().with_page(
            "http://ir.example/ceo",
            StaticPage::html("<p>Apple's CEO is Tim Cook. He took over in 2011.</p>"),
        );
        let agent = agent(fetcher);
        let sid = agent.create_session().await.unwrap();
        agent
            .set_preferences(
                &sid,
                UserPreferences {
                    preferred_urls: vec!["http://ir.example/ceo".into()],
                    web_search_enabled: false,
                    ..Default::default()
                },
            )
            .await
            .unwrap();
        let out = agent
            .handle_query(Some(&sid), "Who is Apple's CEO?")
            .await
            .unwrap();
        assert_eq!(out.response.text, "ANSWER: Apple's CEO is Tim Cook. [1]");
        assert_eq!(out.response.sources_used[0].tier, Tier::Preferred);
        assert!(out.response.latency_ms > 0.0);
        assert_eq!(agent.store().len(), 1);

        let second = agent
            .handle_query(Some(&sid), "And before him?")
            .await
            .unwrap();
        assert_eq!(second.window.history.len(), 1);
        assert_eq!(agent.sources(&sid).await.unwrap().len(), 1);
        agent.clear(&sid).await.unwrap();
        assert!(agent.sources(&sid).await.unwrap().is_empty());
    }

    #[tokio::test]
    async fn empty_query_and_unknown_session() {
        let agent = agent(StaticFetcher::new());
        assert!(matches!(
            agent.handle_query(None, "  ").await,
            Err(AgentError::EmptyQuery)
        ));
        assert!(matches!(
            agent.handle_query(Some("missing"), "q").await,
            Err(AgentError::Session(SessionError::UnknownSession(_)))
        ));
    }

    #[tokio::test]
    async fn dataset_lines_reported_individually() {
        let agent = agent(StaticFetcher::new());
        let body = "{\"text\":\"a\",\"source_uri\":\"u1\"}\n{\"source_uri\":\"u2\"}\n\n{\"text\":\"c\",\"source_uri\":\"u3\"}\n";
        let s = agent.ingest_dataset("corpus", body).await.unwrap();
        assert_eq!(s.inserted, 2);
        assert_eq!(s.errors.len(), 1);
        assert_eq!(s.errors[0].line, 2);
    }

    #[tokio::test]
    async fn feedback_requires_known_response() {
        let agent = agent(StaticFetcher::new());
        let sid = agent.create_session().await.unwrap();
        let out = agent.handle_query(Some(&sid), "anything").await.unwrap();
        let good = Feedback::new(out.response.response_id, 1, None).unwrap();
        agent.feedback(&sid, &good).await.unwrap();
        let bad = Feedback::new("nope", 1, None).unwrap();
        assert!(matches!(
            agent.feedback(&sid, &bad).await,
            Err(AgentError::Store(StoreError::UnknownResponse(_)))
        ));
    }
}
