use std::path::Path;
use std::sync::Arc;

use axum::http::{header, StatusCode};
use axum::routing::get;
use axum::Router;

use finsearch_core::agent::{Agent, AgentSettings};
use finsearch_core::embed::HashEmbedder;
use finsearch_core::eval::parse_dataset;
use finsearch_core::generate::MockBackend;
use finsearch_core::ingest::{FixtureSearchProvider, HttpFetcher, PageFetcher, SourceRef};
use finsearch_core::prompt::SessionStore;
use finsearch_core::retrieve::{Retriever, Tier, UserPreferences};
use finsearch_core::vecstore::{RecordKind, Store};

async fn page_server() -> String {
    let app = Router::new()
        .route(
            "/ir",
            get(|| async {
                (
                    [(header::CONTENT_TYPE, "text/html")],
                    "<html><head><title>Investor relations</title></head><body>\
                     <h1>Leadership</h1><p>The treasurer of Example Corp is Ada Byron. \
                     She joined in 2019.</p><script>var x = 1;</script></body></html>",
                )
            }),
        )
        .route(
            "/news",
            get(|| async {
                (
                    [(header::CONTENT_TYPE, "text/html")],
                    "<p>Markets drifted lower on Friday.</p>",
                )
            }),
        )
        .route("/gone", get(|| async { StatusCode::NOT_FOUND }));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

fn http_agent(base: &str, store: Arc<Store>) -> Agent {
    let pages = PageFetcher::new(Arc::new(HttpFetcher::new()), 5000, 4).unwrap();
    let retriever = Retriever::new(pages, Arc::new(HashEmbedder)).with_search(Arc::new(
        FixtureSearchProvider::from_urls([format!("{base}/news")]),
    ));
    Agent::new(
        retriever,
        store,
        SessionStore::in_memory(),
        Arc::new(MockBackend::default()),
        AgentSettings::default(),
    )
    .unwrap()
}

#[tokio::test]
async fn preferred_page_over_http_grounds_the_answer() {
    let base = page_server().await;
    let agent = http_agent(&base, Arc::new(Store::in_memory(Arc::new(HashEmbedder))));
    let sid = agent.create_session().await.unwrap();
    let prefs = UserPreferences {
        preferred_urls: vec![format!("{base}/ir"), format!("{base}/gone")],
        ..Default::default()
    };
    agent.set_preferences(&sid, prefs).await.unwrap();

    let out = agent
        .handle_query(Some(&sid), "Who is the treasurer of Example Corp?")
        .await
        .unwrap();
    assert!(
        out.response.text.contains("Ada Byron"),
        "{}",
        out.response.text
    );
    assert!(!out.response.text.contains("var x"));
    let cited = &out.response.sources_used[0];
    assert_eq!(cited.tier, Tier::Preferred);
    assert_eq!(cited.source.title.as_deref(), Some("Investor relations"));
    // The 404 is reported, not fatal.
    assert!(out.diagnostics.iter().any(|d| d.source.ends_with("/gone")));
}

#[tokio::test]
async fn interactions_are_retrievable_after_reopen() {
    let base = page_server().await;
    let dir = tempfile::tempdir().unwrap();
    let (store, _) = Store::open(dir.path(), Arc::new(HashEmbedder)).unwrap();
    let agent = http_agent(&base, Arc::new(store));
    let sid = agent.create_session().await.unwrap();
    agent
        .set_preferences(
            &sid,
            UserPreferences {
                preferred_urls: vec![format!("{base}/ir")],
                web_search_enabled: false,
                ..Default::default()
            },
        )
        .await
        .unwrap();
    agent
        .handle_query(Some(&sid), "Who is the treasurer of Example Corp?")
        .await
        .unwrap();
    let before = agent.store().state_hash();
    drop(agent);

    let (store, report) = Store::open(dir.path(), Arc::new(HashEmbedder)).unwrap();
    assert!(report.truncation.is_none());
    assert_eq!(store.state_hash(), before);
    let responses: Vec<_> = store
        .records("interactions")
        .into_iter()
        .filter(|r| r.record_kind == RecordKind::Response)
        .collect();
    assert_eq!(responses.len(), 1);
    assert!(responses[0].payload_text.contains("Ada Byron"));

    // A later session with no preferences still finds it through the store tier.
    let agent = http_agent(&base, Arc::new(store));
    let sid = agent.create_session().await.unwrap();
    agent
        .set_preferences(
            &sid,
            UserPreferences {
                web_search_enabled: false,
                ..Default::default()
            },
        )
        .await
        .unwrap();
    let out = agent
        .handle_query(Some(&sid), "treasurer of Example Corp")
        .await
        .unwrap();
    assert!(
        out.response.text.contains("Ada Byron"),
        "{}",
        out.response.text
    );
    assert_eq!(out.response.sources_used[0].tier, Tier::Store);
}

#[tokio::test]
async fn snapshot_and_log_replay_agree() {
    let dir = tempfile::tempdir().unwrap();
    let texts: Vec<String> = (0..25)
        .map(|i| format!("quarterly filing number {i}"))
        .collect();
    {
        let (store, _) = Store::open_with(dir.path(), Arc::new(HashEmbedder), 10).unwrap();
        for (i, t) in texts.iter().enumerate() {
            let src = SourceRef::store_record(format!("upload://{i}"), None);
            store
                .insert("corpus", t, src, RecordKind::Corpus)
                .await
                .unwrap();
        }
    }
    assert!(dir.path().join("snapshot.bin").exists());
    let (store, report) = Store::open(dir.path(), Arc::new(HashEmbedder)).unwrap();
    assert_eq!(report.from_snapshot + report.from_log, 25);
    assert!(report.from_snapshot >= 20);
    let got: Vec<String> = store
        .records("corpus")
        .into_iter()
        .map(|r| r.payload_text)
        .collect();
    assert_eq!(got, texts);
}

#[test]
fn bundled_eval_dataset_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/eval/items.jsonl");
    let items = parse_dataset(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(items.len(), 5);
    assert_eq!(items.iter().filter(|i| i.ungraded).count(), 1);
}
