//! Answer generation over a packed context window.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::ingest::SourceRef;
use crate::prompt::RefinedPrompt;
use crate::retrieve::{ContextWindow, Tier};

pub const DEFAULT_BACKEND_IN_FLIGHT: usize = 4;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("backend `{backend}` failed: {reason}")]
    Backend { backend: String, reason: String },
    #[error("backend `{backend}` timed out after {after_ms} ms")]
    Timeout { backend: String, after_ms: u64 },
    #[error("environment variable `{0}` holding the API key is not set")]
    MissingApiKey(String),
    #[error("context window holds {tokens} tokens, over its budget of {budget}")]
    BudgetExceeded { tokens: usize, budget: usize },
    #[error("chat message content must not be empty")]
    EmptyMessage,
    #[error("rating must be -1, 0 or 1, got {0}")]
    InvalidRating(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Result<Self, GenerateError> {
        let content = content.into();
        if content.trim().is_empty() {
            return Err(GenerateError::EmptyMessage);
        }
        Ok(Self { role, content })
    }
}

/// A source the response cited, by its tag in the context window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitedSource {
    pub tag: usize,
    pub tier: Tier,
    pub source: SourceRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub response_id: String,
    pub query: String,
    /// Backend output, unmodified.
    pub text: String,
    pub sources_used: Vec<CitedSource>,
    pub latency_ms: f64,
    pub backend_id: String,
    /// Tags the backend emitted that name no packed source.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub invalid_tags: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub response_id: String,
    pub rating: i8,
    #[serde(default)]
    pub comment: Option<String>,
}

impl Feedback {
    pub fn new(
        response_id: impl Into<String>,
        rating: i64,
        comment: Option<String>,
    ) -> Result<Self, GenerateError> {
        if !(-1..=1).contains(&rating) {
            return Err(GenerateError::InvalidRating(rating));
        }
        Ok(Self {
            response_id: response_id.into(),
            rating: rating as i8,
            comment: comment.filter(|c| !c.trim().is_empty()),
        })
    }

    /// Text stored alongside the rating.
    pub fn render(&self) -> String {
        let sign = match self.rating {
            r if r > 0 => "+1",
            0 => "0",
            _ => "-1",
        };
        match &self.comment {
            Some(c) => format!("feedback rating {sign}: {c}"),
            None => format!("feedback rating {sign}"),
        }
    }
}

/// Everything a backend sees for one turn.
pub struct BackendRequest<'a> {
    pub messages: &'a [ChatMessage],
    pub window: &'a ContextWindow,
    pub refined: &'a RefinedPrompt,
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    async fn reply(&self, request: &BackendRequest<'_>) -> Result<String, GenerateError>;
}

/// Any OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpChatBackend {
    id: String,
    client: reqwest::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    timeout: Duration,
    slots: Semaphore,
}

impl HttpChatBackend {
    /// `api_key_env` names the environment variable holding the key; the key
    /// itself is never part of configuration.
    pub fn new(
        id: impl Into<String>,
        base_url: &str,
        model: impl Into<String>,
        api_key_env: Option<&str>,
        timeout: Duration,
    ) -> Result<Self, GenerateError> {
        let api_key = match api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| GenerateError::MissingApiKey(var.to_string()))?,
            ),
            None => None,
        };
        Ok(Self {
            id: id.into(),
            client: reqwest::Client::new(),
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.into(),
            api_key,
            timeout,
            slots: Semaphore::new(DEFAULT_BACKEND_IN_FLIGHT),
        })
    }

    fn fail(&self, reason: impl Into<String>) -> GenerateError {
        GenerateError::Backend {
            backend: self.id.clone(),
            reason: reason.into(),
        }
    }
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

#[async_trait]
impl ChatBackend for HttpChatBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn reply(&self, request: &BackendRequest<'_>) -> Result<String, GenerateError> {
        let _slot = self
            .slots
            .acquire()
            .await
            .map_err(|e| self.fail(e.to_string()))?;
        let mut req = self
            .client
            .post(&self.endpoint)
            .timeout(self.timeout)
            .json(&serde_json::json!({ "model": self.model, "messages": request.messages }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| {
            if e.is_timeout() {
                GenerateError::Timeout {
                    backend: self.id.clone(),
                    after_ms: self.timeout.as_millis() as u64,
                }
            } else {
                self.fail(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(self.fail(format!(
                "HTTP {status}: {}",
                body.chars().take(200).collect::<String>()
            )));
        }
        let completion: Completion = resp.json().await.map_err(|e| self.fail(e.to_string()))?;
        completion
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| self.fail("response has no message content"))
    }
}

/// Deterministic offline generator.
///
/// Answers with the first sentence of the top-ranked source followed by that
/// source's tag, or a fixed line when the window is empty.
#[derive(Debug, Clone)]
pub struct MockBackend {
    id: String,
    delay: Duration,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new("mock")
    }
}

impl MockBackend {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            delay: Duration::ZERO,
        }
    }

    /// Sleeps this long before every reply.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

pub const MOCK_EMPTY_ANSWER: &str = "ANSWER: no context available";

pub fn mock_reply(window: &ContextWindow) -> String {
    match window.items.first() {
        None => MOCK_EMPTY_ANSWER.to_string(),
        Some(top) => format!("ANSWER: {} [{}]", first_sentence(&top.item.text), top.tag),
    }
}

/// First sentence after collapsing whitespace. A sentence ends at `.`, `!`
/// or `?` followed by whitespace or the end of the text.
pub fn first_sentence(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut chars = collapsed.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            match chars.peek() {
                None => break,
                Some((_, ' ')) => return collapsed[..i + c.len_utf8()].to_string(),
                _ => {}
            }
        }
    }
    collapsed
}

#[async_trait]
impl ChatBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn reply(&self, request: &BackendRequest<'_>) -> Result<String, GenerateError> {
        if !self.delay.is_zero() {
            tokio::time::sleep(self.delay).await;
        }
        Ok(mock_reply(request.window))
    }
}

const SYSTEM_PREAMBLE: &str = "You are a financial research assistant. Answer from the numbered sources \
below and cite them inline by tag, for example [1]. If the sources do not answer the question, say so.";

/// The message list sent to a backend: instructions with the sources, the
/// retained history, then the refined query.
pub fn build_messages(window: &ContextWindow, refined: &RefinedPrompt) -> Vec<ChatMessage> {
    let sources = window.render_sources();
    let system = if sources.is_empty() {
        format!("{SYSTEM_PREAMBLE}\n\nNo sources were retrieved.")
    } else {
        format!("{SYSTEM_PREAMBLE}\n\nSources:\n\n{sources}")
    };
    let mut out = vec![ChatMessage {
        role: Role::System,
        content: system,
    }];
    for turn in &window.history {
        out.extend(ChatMessage::new(Role::User, turn.query.clone()).ok());
        out.extend(ChatMessage::new(Role::Assistant, turn.response.clone()).ok());
    }
    let query = if refined.refined.trim().is_empty() {
        refined.original.clone()
    } else {
        refined.refined.clone()
    };
    out.push(ChatMessage {
        role: Role::User,
        content: query,
    });
    out
}

fn tag_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[(\d{1,6})\]").unwrap())
}

/// Splits the tags in `text` into cited sources and tags naming nothing.
pub fn extract_citations(text: &str, window: &ContextWindow) -> (Vec<CitedSource>, Vec<usize>) {
    let mut cited: Vec<CitedSource> = Vec::new();
    let mut invalid = Vec::new();
    for cap in tag_pattern().captures_iter(text) {
        let tag: usize = cap[1].parse().unwrap_or(0);
        match window.item(tag) {
            Some(p) => {
                if !cited.iter().any(|c| c.tag == tag) {
                    cited.push(CitedSource {
                        tag,
                        tier: p.item.tier,
                        source: p.item.source.clone(),
                    });
                }
            }
            None => {
                if !invalid.contains(&tag) {
                    invalid.push(tag);
                }
            }
        }
    }
    (cited, invalid)
}

/// Runs one generation and attaches citations. `started` marks the arrival
/// of the query, so the reported latency covers retrieval as well.
pub async fn complete(
    window: &ContextWindow,
    refined: &RefinedPrompt,
    backend: &dyn ChatBackend,
    started: Instant,
) -> Result<AgentResponse, GenerateError> {
    let tokens = window.token_count();
    if tokens > window.budget_tokens {
        return Err(GenerateError::BudgetExceeded {
            tokens,
            budget: window.budget_tokens,
        });
    }
    let messages = build_messages(window, refined);
    let text = backend
        .reply(&BackendRequest {
            messages: &messages,
            window,
            refined,
        })
        .await?;
    let (sources_used, invalid_tags) = extract_citations(&text, window);
    if !invalid_tags.is_empty() {
        tracing::warn!(
            backend = backend.id(),
            ?invalid_tags,
            "response cites unknown source tags"
        );
    }
    Ok(AgentResponse {
        response_id: uuid::Uuid::new_v4().simple().to_string(),
        query: refined.original.clone(),
        text,
        sources_used,
        latency_ms: elapsed_ms(started),
        backend_id: backend.id().to_string(),
        invalid_tags,
    })
}

/// [`complete`] against the mock generator, without any waiting.
pub fn mock_complete(window: &ContextWindow, refined: &RefinedPrompt) -> AgentResponse {
    let started = Instant::now();
    let text = mock_reply(window);
    let (sources_used, invalid_tags) = extract_citations(&text, window);
    AgentResponse {
        response_id: uuid::Uuid::new_v4().simple().to_string(),
        query: refined.original.clone(),
        text,
        sources_used,
        latency_ms: elapsed_ms(started),
        backend_id: "mock".into(),
        invalid_tags,
    }
}

pub(crate) fn elapsed_ms(started: Instant) -> f64 {
    (started.elapsed().as_secs_f64() * 1000.0).max(f64::MIN_POSITIVE)
}
