//! Query refinement and conversation sessions.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::{extract_citations, CitedSource};
use crate::retrieve::{ContextWindow, Turn, UserPreferences};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    #[default]
    Template,
    /// Ask the chat backend to rewrite the query.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedPrompt {
    pub original: String,
    pub refined: String,
    /// Packed source tags the refined prompt points at.
    pub evidence_tags: Vec<usize>,
    pub mode: RefineMode,
}

/// Wraps the query in an instruction naming the packed source tags.
///
/// With no sources there is nothing to point at, so the query is used as is.
pub fn refine_query(query: &str, window: &ContextWindow) -> RefinedPrompt {
    let refined = if window.items.is_empty() {
        query.to_string()
    } else {
        let tags = window
            .items
            .iter()
            .map(|i| format!("[{}]", i.tag))
            .collect::<Vec<_>>()
            .join(" ");
        format!(
            "Based on the following retrieved sources {tags}, and the conversation so far, \
             answer precisely and cite source tags: {query}"
        )
    };
    RefinedPrompt {
        original: query.to_string(),
        refined,
        evidence_tags: window.items.iter().map(|i| i.tag).collect(),
        mode: RefineMode::Template,
    }
}

/// Builds a refined prompt from a model rewrite, keeping the original query
/// verbatim when the rewrite dropped it. Only tags present in `window` count
/// as evidence.
pub fn from_rewrite(query: &str, rewrite: &str, window: &ContextWindow) -> RefinedPrompt {
    let rewrite = rewrite.trim();
    let refined = if rewrite.is_empty() {
        query.to_string()
    } else if rewrite.contains(query) {
        rewrite.to_string()
    } else {
        format!("{rewrite}\n\nOriginal question: {query}")
    };
    let evidence_tags = extract_citations(&refined, window)
        .0
        .iter()
        .map(|c| c.tag)
        .collect();
    RefinedPrompt {
        original: query.to_string(),
        refined,
        evidence_tags,
        mode: RefineMode::Model,
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session storage error on {path}: {reason}")]
    Storage { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub turns: Vec<Turn>,
    pub preferences: UserPreferences,
    pub created_at: DateTime<Utc>,
    /// Every source cited so far, in first-cited order.
    pub sources: Vec<CitedSource>,
}

impl Session {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            turns: Vec::new(),
            preferences: UserPreferences::default(),
            created_at: Utc::now(),
            sources: Vec::new(),
        }
    }

    pub fn append_turn(&mut self, turn: Turn, cited: &[CitedSource]) {
        self.turns.push(turn);
        for c in cited {
            if !self.sources.iter().any(|s| s.source.id == c.source.id) {
                self.sources.push(c.clone());
            }
        }
    }

    /// Forgets history and cited sources. Preferences survive.
    pub fn clear(&mut self) {
        self.turns.clear();
        self.sources.clear();
    }
}

pub type SharedSession = Arc<tokio::sync::Mutex<Session>>;

/// Live sessions, optionally mirrored to a JSON file.
pub struct SessionStore {
    sessions: RwLock<HashMap<String, SharedSession>>,
    path: Option<PathBuf>,
    write_lock: parking_lot::Mutex<()>,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self {
            sessions: RwLock::new(HashMap::new()),
            path: None,
            write_lock: parking_lot::Mutex::new(()),
        }
    }

    /// Loads `sessions.json` from `dir` if present.
    pub fn open(dir: &Path) -> Result<Self, SessionError> {
        let path = dir.join("sessions.json");
        let err = |reason: String| SessionError::Storage {
            path: path.clone(),
            reason,
        };
        let mut sessions = HashMap::new();
        match std::fs::read(&path) {
            Ok(bytes) => {
                let list: Vec<Session> =
                    serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
                for s in list {
                    sessions.insert(s.session_id.clone(), Arc::new(tokio::sync::Mutex::new(s)));
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(err(e.to_string())),
        }
        Ok(Self {
            sessions: RwLock::new(sessions),
            path: Some(path),
            write_lock: parking_lot::Mutex::new(()),
        })
    }

    pub fn create(&self) -> (String, SharedSession) {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Arc::new(tokio::sync::Mutex::new(Session::new(id.clone())));
        self.sessions.write().insert(id.clone(), session.clone());
        (id, session)
    }

    pub fn get(&self, id: &str) -> Result<SharedSession, SessionError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownSession(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.sessions.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub async fn clear_session(&self, id: &str) -> Result<(), SessionError> {
        let session = self.get(id)?;
        session.lock().await.clear();
        self.persist().await
    }

    /// Writes every session to disk through a temp file and rename.
    pub async fn persist(&self) -> Result<(), SessionError> {
        self.write(None)
    }

    /// Persists with `held` standing in for its own, already locked, entry.
    pub async fn persist_with(&self, held: &Session) -> Result<(), SessionError> {
        self.write(Some(held))
    }

    fn write(&self, held: Option<&Session>) -> Result<(), SessionError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let handles: Vec<(String, SharedSession)> = self
            .sessions
            .read()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let mut list = Vec::with_capacity(handles.len());
        for (id, h) in handles {
            match held {
                Some(s) if s.session_id == id => list.push(s.clone()),
                // A session locked by an in-flight query is written next time.
                _ => {
                    if let Ok(s) = h.try_lock() {
                        list.push(s.clone());
                    }
                }
            }
        }
        list.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        let err = |reason: String| SessionError::Storage {
            path: path.clone(),
            reason,
        };
        let bytes = serde_json::to_vec(&list).map_err(|e| err(e.to_string()))?;
        let _guard = self.write_lock.lock();
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| err(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| err(e.to_string()))
    }
}
