//! JSON routes over the agent.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use finsearch_core::agent::{Agent, AgentError};
use finsearch_core::generate::{AgentResponse, CitedSource, Feedback, GenerateError};
use finsearch_core::prompt::SessionError;
use finsearch_core::retrieve::{Tier, UserPreferences};
use finsearch_core::vecstore::{StoreError, CORPUS_COLLECTION};

use crate::config::Profile;
use crate::finetune::{FinetuneJob, JobState};

#[derive(Clone)]
pub struct AppState {
    pub agent: Arc<Agent>,
    pub profile: Profile,
    pub finetune: Arc<FinetuneJob>,
}

/// Error body: `{code, message}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "code": self.code, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

impl From<AgentError> for ApiError {
    fn from(e: AgentError) -> Self {
        let message = e.to_string();
        let (status, code) = match &e {
            AgentError::EmptyQuery => (StatusCode::BAD_REQUEST, "empty_query"),
            AgentError::Preferences(_) => (StatusCode::BAD_REQUEST, "invalid_preferences"),
            AgentError::Session(SessionError::UnknownSession(_)) => {
                (StatusCode::NOT_FOUND, "unknown_session")
            }
            AgentError::Store(StoreError::UnknownResponse(_)) => {
                (StatusCode::NOT_FOUND, "unknown_response")
            }
            AgentError::Store(StoreError::InvalidCollection(_)) => {
                (StatusCode::BAD_REQUEST, "invalid_collection")
            }
            AgentError::Generate(GenerateError::InvalidRating(_)) => {
                (StatusCode::BAD_REQUEST, "invalid_rating")
            }
            AgentError::Generate(_) | AgentError::UnknownBackend(_) => {
                (StatusCode::BAD_GATEWAY, "backend_error")
            }
            AgentError::Session(_) | AgentError::Store(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "storage_error")
            }
            AgentError::Config(_) => (StatusCode::INTERNAL_SERVER_ERROR, "config_error"),
        };
        Self::new(status, code, message)
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

fn require(state: &AppState, profile: Profile) -> Result<(), ApiError> {
    if state.profile == profile {
        return Ok(());
    }
    let name = match profile {
        Profile::Individual => "individual",
        Profile::Institutional => "institutional",
    };
    Err(ApiError::new(
        StatusCode::FORBIDDEN,
        "wrong_profile",
        format!("this endpoint is only available under the {name} profile"),
    ))
}

/// A cited source on the wire.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireSource {
    pub tag: usize,
    pub uri: String,
    pub title: Option<String>,
    pub tier: Tier,
}

impl From<&CitedSource> for WireSource {
    fn from(c: &CitedSource) -> Self {
        Self {
            tag: c.tag,
            uri: c.source.uri.clone(),
            title: c.source.title.clone(),
            tier: c.tier,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryResult {
    pub session_id: String,
    pub response_id: String,
    pub text: String,
    pub sources: Vec<WireSource>,
    pub latency_ms: f64,
    pub backend_id: String,
}

impl QueryResult {
    fn new(session_id: String, r: &AgentResponse) -> Self {
        Self {
            session_id,
            response_id: r.response_id.clone(),
            text: r.text.clone(),
            sources: r.sources_used.iter().map(WireSource::from).collect(),
            latency_ms: r.latency_ms,
            backend_id: r.backend_id.clone(),
        }
    }
}

#[derive(Deserialize)]
struct QueryBody {
    #[serde(default)]
    session_id: Option<String>,
    query: String,
}

#[derive(Deserialize)]
struct SessionBody {
    session_id: String,
}

#[derive(Deserialize)]
struct SessionParam {
    session: String,
}

#[derive(Deserialize)]
struct PreferencesBody {
    session_id: String,
    preferences: UserPreferences,
}

#[derive(Deserialize)]
struct FeedbackBody {
    session_id: String,
    response_id: String,
    rating: i64,
    #[serde(default)]
    comment: Option<String>,
}

#[derive(Deserialize)]
struct CollectionParam {
    #[serde(default)]
    collection: Option<String>,
}

pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/session", post(create_session))
        .route("/api/query", post(query))
        .route("/api/sources", get(sources))
        .route(
            "/api/preferences",
            post(set_preferences).get(get_preferences),
        )
        .route("/api/feedback", post(feedback))
        .route("/api/clear", post(clear))
        .route("/api/datasets", post(datasets))
        .route("/api/finetune", post(start_finetune))
        .route("/api/finetune/status", get(finetune_status))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

async fn health(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "profile": s.profile,
        "records": s.agent.store().len(),
        "backend": s.agent.default_backend(),
    }))
}

async fn create_session(State(s): State<AppState>) -> ApiResult<serde_json::Value> {
    let id = s.agent.create_session().await?;
    Ok(Json(serde_json::json!({ "session_id": id })))
}

async fn query(State(s): State<AppState>, body: Bytes) -> ApiResult<QueryResult> {
    let req: QueryBody = parse(&body)?;
    let out = s
        .agent
        .handle_query(req.session_id.as_deref(), &req.query)
        .await?;
    Ok(Json(QueryResult::new(out.session_id, &out.response)))
}

async fn sources(
    State(s): State<AppState>,
    Query(p): Query<SessionParam>,
) -> ApiResult<serde_json::Value> {
    let list: Vec<WireSource> = s
        .agent
        .sources(&p.session)
        .await?
        .iter()
        .map(WireSource::from)
        .collect();
    Ok(Json(serde_json::json!({ "sources": list })))
}

async fn set_preferences(State(s): State<AppState>, body: Bytes) -> ApiResult<serde_json::Value> {
    require(&s, Profile::Individual)?;
    let req: PreferencesBody = parse(&body)?;
    s.agent
        .set_preferences(&req.session_id, req.preferences)
        .await?;
    Ok(Json(serde_json::json!({ "ok": true })))
}

async fn get_preferences(
    State(s): State<AppState>,
    Query(p): Query<SessionParam>,
) -> ApiResult<UserPreferences> {
    require(&s, Profile::Individual)?;
    Ok(Json(s.agent.preferences(&p.session).await?))
}

async fn feedback(State(s): State<AppState>, body: Bytes) -> ApiResult<serde_json::Value> {
    let req: FeedbackBody = parse(&body)?;
    let fb = Feedback::new(req.response_id, req.rating, req.comment).map_err(AgentError::from)?;
    let id = s.agent.feedback(&req.session_id, &fb).await?;
    Ok(Json(serde_json::json!({ "record_id": id })))
}

async fn clear(State(s): State<AppState>, body: Bytes) -> ApiResult<serde_json::Value> {
    let req: SessionBody = parse(&body)?;
    s.agent.clear(&req.session_id).await?;
    Ok(Json(serde_json::json!({ "ok": true })))
}

async fn datasets(
    State(s): State<AppState>,
    Query(p): Query<CollectionParam>,
    body: Bytes,
) -> Result<Response, ApiError> {
    require(&s, Profile::Institutional)?;
    let text =
        std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    let collection = p.collection.as_deref().unwrap_or(CORPUS_COLLECTION);
    let summary = s.agent.ingest_dataset(collection, text).await?;
    // Nothing usable at all is a client error; partial success is not.
    let status = if summary.inserted == 0 && !summary.errors.is_empty() {
        StatusCode::BAD_REQUEST
    } else {
        StatusCode::OK
    };
    Ok((status, Json(summary)).into_response())
}

async fn start_finetune(State(s): State<AppState>) -> Result<Response, ApiError> {
    require(&s, Profile::Institutional)?;
    match s.finetune.start(s.agent.store().clone()) {
        Ok(state) => Ok((StatusCode::ACCEPTED, Json(state)).into_response()),
        Err(_) => Err(ApiError::new(
            StatusCode::CONFLICT,
            "job_running",
            "a fine-tune job is already running",
        )),
    }
}

async fn finetune_status(State(s): State<AppState>) -> ApiResult<JobState> {
    require(&s, Profile::Institutional)?;
    Ok(Json(s.finetune.status()))
}
