use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use axum::response::Html;
use axum::routing::get;
use parking_lot::Mutex;
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::net::TcpListener;

use finsearch_core::eval::{parse_dataset, run_eval, HttpEndpoint};
use finsearch_core::generate::{
    mock_reply, BackendRequest, ChatBackend, ChatMessage, GenerateError,
};
use finsearch_service::{router, AgentConfig, AppState, FinetuneJob};

const FACT: &str = "Apple's CEO is Tim Cook.";

async fn spawn_router(app: axum::Router) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

/// Pages standing in for preferred sources and search results.
async fn spawn_pages() -> String {
    let app = axum::Router::new()
        .route(
            "/ceo",
            get(|| async {
                Html(format!(
                    "<html><body><p>{FACT} He succeeded Steve Jobs.</p></body></html>"
                ))
            }),
        )
        .route(
            "/rates",
            get(|| async { Html("<p>The Fed held rates at 5.25 percent.</p>") }),
        )
        .route(
            "/other",
            get(|| async { Html("<p>Unrelated market commentary.</p>") }),
        );
    spawn_router(app).await
}

struct Harness {
    base: String,
    state: AppState,
    client: reqwest::Client,
    _dir: tempfile::TempDir,
}

fn config(profile: &str, dir: &std::path::Path, extra: &str) -> AgentConfig {
    let text = format!(
        "profile = \"{profile}\"\nstore_dir = \"{}\"\n{extra}\n[backends.mock]\nkind = \"mock\"\n",
        dir.join("store").display()
    );
    AgentConfig::parse(&text).unwrap()
}

async fn harness_with(profile: &str, extra: &str, capture: Option<Arc<Capture>>) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(profile, dir.path(), extra);
    let mut agent = cfg.build_agent().unwrap();
    if let Some(c) = capture {
        agent.add_backend(c, true);
    }
    let state = AppState {
        agent: Arc::new(agent),
        profile: cfg.profile,
        finetune: Arc::new(FinetuneJob::new(
            cfg.finetune.clone(),
            cfg.store_dir.clone(),
        )),
    };
    let base = spawn_router(router(state.clone(), None)).await;
    Harness {
        base,
        state,
        client: reqwest::Client::new(),
        _dir: dir,
    }
}

async fn harness(profile: &str) -> Harness {
    harness_with(profile, "", None).await
}

impl Harness {
    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let resp = self
            .client
            .post(format!("{}{path}", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn post_raw(&self, path: &str, body: String) -> (StatusCode, Value) {
        let resp = self
            .client
            .post(format!("{}{path}", self.base))
            .body(body)
            .send()
            .await
            .unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let resp = self
            .client
            .get(format!("{}{path}", self.base))
            .send()
            .await
            .unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn session(&self) -> String {
        let (status, body) = self.post("/api/session", json!({})).await;
        assert_eq!(status, StatusCode::OK);
        body["session_id"].as_str().unwrap().to_string()
    }

    async fn prefer(&self, session: &str, urls: &[String]) {
        let prefs = json!({ "preferred_urls": urls, "web_search_enabled": false });
        let (status, _) = self
            .post(
                "/api/preferences",
                json!({ "session_id": session, "preferences": prefs }),
            )
            .await;
        assert_eq!(status, StatusCode::OK);
    }
}

/// Records the messages it receives and answers like the mock.
#[derive(Default)]
struct Capture {
    seen: Mutex<Vec<Vec<ChatMessage>>>,
}

#[async_trait]
impl ChatBackend for Capture {
    fn id(&self) -> &str {
        "capture"
    }

    async fn reply(&self, request: &BackendRequest<'_>) -> Result<String, GenerateError> {
        self.seen.lock().push(request.messages.to_vec());
        Ok(mock_reply(request.window))
    }
}

#[tokio::test]
async fn health_reports_profile() {
    let h = harness("individual").await;
    let (status, body) = h.get("/api/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["profile"], "individual");
}

#[tokio::test]
async fn preferred_source_answers_the_query() {
    let pages = spawn_pages().await;
    let h = harness("individual").await;
    let sid = h.session().await;
    h.prefer(&sid, &[format!("{pages}/ceo")]).await;
    let (status, body) = h
        .post(
            "/api/query",
            json!({ "session_id": sid, "query": "Who is Apple's CEO?" }),
        )
        .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert!(body["text"].as_str().unwrap().contains(FACT));
    let sources = body["sources"].as_array().unwrap();
    assert_eq!(sources.len(), 1);
    assert_eq!(sources[0]["tag"], 1);
    assert_eq!(sources[0]["tier"], "preferred");
    assert_eq!(sources[0]["uri"], format!("{pages}/ceo"));
    assert!(body["latency_ms"].as_f64().unwrap() > 0.0);
    assert!(!body["response_id"].as_str().unwrap().is_empty());
}

#[tokio::test]
async fn empty_query_is_400_with_error_body() {
    let h = harness("individual").await;
    let (status, body) = h.post("/api/query", json!({ "query": "   " })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "empty_query");
    assert!(body["message"].is_string());
    let (status, body) = h.post_raw("/api/query", "{not json".into()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "bad_request");
}

#[tokio::test]
async fn query_without_session_creates_one() {
    let h = harness("individual").await;
    let (status, body) = h
        .post("/api/query", json!({ "query": "anything at all" }))
        .await;
    assert_eq!(status, StatusCode::OK);
    let sid = body["session_id"].as_str().unwrap();
    let (status, _) = h.get(&format!("/api/sources?session={sid}")).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = h.get("/api/sources?session=unknown").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "unknown_session");
}

#[tokio::test]
async fn second_query_sees_first_turn() {
    let pages = spawn_pages().await;
    let capture = Arc::new(Capture::default());
    let h = harness_with("individual", "", Some(capture.clone())).await;
    let sid = h.session().await;
    h.prefer(&sid, &[format!("{pages}/ceo")]).await;
    h.post(
        "/api/query",
        json!({ "session_id": sid, "query": "Who is Apple's CEO?" }),
    )
    .await;
    h.post(
        "/api/query",
        json!({ "session_id": sid, "query": "Since when?" }),
    )
    .await;
    let seen = capture.seen.lock();
    assert_eq!(seen.len(), 2);
    assert!(!seen[0].iter().any(|m| m.content == "Who is Apple's CEO?"));
    let second = &seen[1];
    let pos = second
        .iter()
        .position(|m| m.content == "Who is Apple's CEO?")
        .unwrap();
    assert!(second[pos + 1].content.contains(FACT));
}

#[tokio::test]
async fn preferences_round_trip_and_validation() {
    let pages = spawn_pages().await;
    let h = harness("individual").await;
    let sid = h.session().await;
    let urls = vec![format!("{pages}/rates"), format!("{pages}/other")];
    h.prefer(&sid, &urls).await;
    let (status, body) = h.get(&format!("/api/preferences?session={sid}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["preferred_urls"], json!(urls));

    let bad = json!({ "session_id": sid, "preferences": { "preferred_urls": ["ht!tp:/x"] } });
    let (status, body) = h.post("/api/preferences", bad).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let msg = body["message"].as_str().unwrap();
    assert!(
        msg.contains("preferred_urls[0]") && msg.contains("ht!tp:/x"),
        "{msg}"
    );
    // The failed update left the earlier set in place.
    let (_, body) = h.get(&format!("/api/preferences?session={sid}")).await;
    assert_eq!(body["preferred_urls"], json!(urls));

    // Tier-0 context now comes only from those two pages.
    let (_, body) = h
        .post(
            "/api/query",
            json!({ "session_id": sid, "query": "Where are rates?" }),
        )
        .await;
    for s in body["sources"].as_array().unwrap() {
        assert!(urls.contains(&s["uri"].as_str().unwrap().to_string()));
    }
    assert!(body["text"].as_str().unwrap().contains("5.25 percent"));
}

#[tokio::test]
async fn sources_accumulate_until_clear() {
    let pages = spawn_pages().await;
    let h = harness("individual").await;
    let sid = h.session().await;
    let mut union = std::collections::BTreeSet::new();
    for (path, q) in [
        ("/ceo", "Who is Apple's CEO?"),
        ("/rates", "Fed rates?"),
        ("/ceo", "Apple CEO again"),
    ] {
        h.prefer(&sid, &[format!("{pages}{path}")]).await;
        let (_, body) = h
            .post("/api/query", json!({ "session_id": sid, "query": q }))
            .await;
        for s in body["sources"].as_array().unwrap() {
            union.insert(s["uri"].as_str().unwrap().to_string());
        }
        let (_, panel) = h.get(&format!("/api/sources?session={sid}")).await;
        let shown: std::collections::BTreeSet<String> = panel["sources"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| s["uri"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(shown, union);
    }
    assert_eq!(union.len(), 2);
    let (status, _) = h.post("/api/clear", json!({ "session_id": sid })).await;
    assert_eq!(status, StatusCode::OK);
    let (_, panel) = h.get(&format!("/api/sources?session={sid}")).await;
    assert!(panel["sources"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn feedback_is_recorded_against_responses() {
    let h = harness("individual").await;
    let sid = h.session().await;
    let (_, body) = h
        .post("/api/query", json!({ "session_id": sid, "query": "hello" }))
        .await;
    let rid = body["response_id"].as_str().unwrap();
    let before = h.state.agent.store().len();
    let (status, _) = h
        .post(
            "/api/feedback",
            json!({ "session_id": sid, "response_id": rid, "rating": 1, "comment": "good" }),
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(h.state.agent.store().len(), before + 1);
    let (status, body) = h
        .post(
            "/api/feedback",
            json!({ "session_id": sid, "response_id": rid, "rating": 5 }),
        )
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "invalid_rating");
    let (status, _) = h
        .post(
            "/api/feedback",
            json!({ "session_id": sid, "response_id": "nope", "rating": 0 }),
        )
        .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

fn dataset_body(n: usize, broken_line: Option<usize>) -> String {
    (1..=n)
        .map(|i| {
            if Some(i) == broken_line {
                json!({ "source_uri": format!("upload://{i}") }).to_string()
            } else {
                json!({ "text": format!("record number {i} about equities"), "source_uri": format!("upload://{i}") })
                    .to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[tokio::test]
async fn dataset_ingest_counts_and_line_errors() {
    let h = harness("institutional").await;
    let (status, body) = h.post_raw("/api/datasets", dataset_body(100, None)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["inserted"], 100);
    assert_eq!(h.state.agent.store().collection_len("corpus"), 100);

    let (status, body) = h
        .post_raw("/api/datasets?collection=extra", dataset_body(100, Some(7)))
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["inserted"], 99);
    assert_eq!(body["errors"][0]["line"], 7);
    assert!(body["errors"][0]["message"]
        .as_str()
        .unwrap()
        .contains("text"));
    assert_eq!(h.state.agent.store().collection_len("extra"), 99);
}

#[tokio::test]
async fn profile_gates_cover_the_route_table() {
    let ind = harness("individual").await;
    let inst = harness("institutional").await;
    let sid_ind = ind.session().await;
    let sid_inst = inst.session().await;

    for (status, _) in [
        ind.post_raw("/api/datasets", dataset_body(1, None)).await,
        ind.post("/api/finetune", json!({})).await,
        ind.get("/api/finetune/status").await,
    ] {
        assert_eq!(status, StatusCode::FORBIDDEN);
    }
    let prefs = json!({ "session_id": sid_inst, "preferences": {} });
    for (status, body) in [
        inst.post("/api/preferences", prefs).await,
        inst.get(&format!("/api/preferences?session={sid_inst}"))
            .await,
    ] {
        assert_eq!(status, StatusCode::FORBIDDEN);
        assert_eq!(body["code"], "wrong_profile");
    }
    // Shared routes work under both profiles.
    for (h, sid) in [(&ind, &sid_ind), (&inst, &sid_inst)] {
        assert_eq!(h.get("/api/health").await.0, StatusCode::OK);
        assert_eq!(
            h.post("/api/query", json!({ "session_id": sid, "query": "q" }))
                .await
                .0,
            StatusCode::OK
        );
        assert_eq!(
            h.get(&format!("/api/sources?session={sid}")).await.0,
            StatusCode::OK
        );
        assert_eq!(
            h.post("/api/clear", json!({ "session_id": sid })).await.0,
            StatusCode::OK
        );
    }
}

#[tokio::test]
async fn reads_do_not_touch_the_store() {
    let h = harness("institutional").await;
    h.post_raw("/api/datasets", dataset_body(10, None)).await;
    let sid = h.session().await;
    h.post(
        "/api/query",
        json!({ "session_id": sid, "query": "equities" }),
    )
    .await;
    let before = h.state.agent.store().state_hash();
    h.get("/api/health").await;
    h.get(&format!("/api/sources?session={sid}")).await;
    h.get("/api/finetune/status").await;
    assert_eq!(h.state.agent.store().state_hash(), before);
}

async fn poll_done(h: &Harness) -> Value {
    for _ in 0..600 {
        let (_, body) = h.get("/api/finetune/status").await;
        if body["state"] != "running" {
            return body;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    panic!("fine-tune job did not finish");
}

#[tokio::test]
async fn finetune_job_lifecycle() {
    let extra = "[finetune]\ncollection = \"corpus\"\nbatch_size = 1\nepochs = 20000\nlr = 0.01\n";
    let h = harness_with("institutional", extra, None).await;
    let (_, body) = h.get("/api/finetune/status").await;
    assert_eq!(body["state"], "idle");

    h.post_raw("/api/datasets", dataset_body(50, None)).await;
    let (status, body) = h.post("/api/finetune", json!({})).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(body["state"], "running");
    let (status, body) = h.post("/api/finetune", json!({})).await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");
    assert_eq!(body["code"], "job_running");

    let done = poll_done(&h).await;
    assert_eq!(done["state"], "done", "{done}");
    let train = &done["report"]["train"];
    assert_eq!(train["epochs"], 20000);
    assert_eq!(train["epoch_losses"].as_array().unwrap().len(), 20000);
    assert_eq!(done["report"]["records"], 50);
}

#[tokio::test]
async fn finetune_failure_and_export_modes() {
    let h = harness("institutional").await;
    let (status, _) = h.post("/api/finetune", json!({})).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let done = poll_done(&h).await;
    assert_eq!(done["state"], "failed");

    let h = harness_with("institutional", "[finetune]\nmode = \"sft_export\"\n", None).await;
    let sid = h.session().await;
    h.post("/api/query", json!({ "session_id": sid, "query": "first" }))
        .await;
    h.post(
        "/api/query",
        json!({ "session_id": sid, "query": "second" }),
    )
    .await;
    h.post("/api/finetune", json!({})).await;
    let done = poll_done(&h).await;
    assert_eq!(done["report"]["mode"], "sft_export");
    assert_eq!(done["report"]["examples"], 2);
    let path = done["report"]["path"].as_str().unwrap();
    assert_eq!(std::fs::read_to_string(path).unwrap().lines().count(), 2);
}

#[tokio::test]
async fn eval_over_http_is_repeatable() {
    let pages = spawn_pages().await;
    let extra = format!(
        "[preferences]\npreferred_urls = [\"{pages}/ceo\", \"{pages}/rates\"]\nweb_search_enabled = false\n"
    );
    let h = harness_with("individual", &extra, None).await;
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("items.jsonl");
    let rows = [
        json!({"id": "ceo", "question": "Who is Apple's CEO?", "current_answers": ["Tim Cook"], "outdated_answers": ["Steve Jobs"], "difficulty": "easy", "dataset": "fixture"}),
        json!({"id": "rates", "question": "Where did the Fed hold rates, in percent?", "current_answers": ["5.25"], "difficulty": "easy", "dataset": "fixture"}),
    ];
    std::fs::write(
        &dataset,
        rows.iter()
            .map(Value::to_string)
            .collect::<Vec<_>>()
            .join("\n"),
    )
    .unwrap();
    assert_eq!(
        parse_dataset(&std::fs::read_to_string(&dataset).unwrap())
            .unwrap()
            .len(),
        2
    );

    let endpoint = HttpEndpoint::new(&h.base, Duration::from_secs(30));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let report = run_eval(&dataset, &endpoint, &a).await.unwrap();
    run_eval(&dataset, &endpoint, &b).await.unwrap();
    assert_eq!(report.summary.accuracy, Some(1.0));
    for f in ["report.jsonl", "summary.json", "summary.txt"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}
