use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/eval")
}

fn write_config(dir: &Path) -> PathBuf {
    let docs: Vec<String> = ["apple_ceo.md", "fed_rate.md", "twitter.md", "semis.md"]
        .iter()
        .map(|f| {
            format!(
                "{:?}",
                fixtures().join("docs").join(f).display().to_string()
            )
        })
        .collect();
    let text = format!(
        "profile = \"institutional\"\nstore_dir = \"store\"\ndefault_backend = \"mock\"\n\n\
         [backends.mock]\nkind = \"mock\"\n\n\
         [preferences]\nlocal_paths = [{}]\nweb_search_enabled = false\n",
        docs.join(", ")
    );
    let path = dir.join("agent.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn agent(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agent"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn eval_run_writes_reports_and_prints_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let dataset = fixtures().join("items.jsonl");
    let out_dir = dir.path().join("out");
    let out = agent(
        &config,
        &[
            "eval",
            "run",
            "--dataset",
            dataset.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("0.625"), "{stdout}");
    for f in [
        "report.jsonl",
        "summary.json",
        "summary.txt",
        "latency.json",
    ] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["accuracy"], 0.625);
    assert_eq!(summary["ungraded"], 1);
}

#[test]
fn ingest_reports_rejected_lines() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = dir.path().join("records.jsonl");
    std::fs::write(
        &data,
        "{\"text\": \"Bond spreads widened.\", \"source_uri\": \"upload://a\"}\n\
         not json\n\
         {\"text\": \"Oil rallied.\", \"source_uri\": \"upload://b\"}\n",
    )
    .unwrap();
    let out = agent(&config, &["ingest", "--file", data.to_str().unwrap()]);
    assert!(!out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["inserted"], 2);
    assert_eq!(summary["errors"][0]["line"], 2);

    // The accepted records were persisted.
    let ok = dir.path().join("ok.jsonl");
    std::fs::write(
        &ok,
        "{\"text\": \"Gold held steady.\", \"source_uri\": \"upload://c\"}\n",
    )
    .unwrap();
    let out = agent(&config, &["ingest", "--file", ok.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (store, _) = finsearch_core::vecstore::Store::open(
        dir.path().join("store"),
        std::sync::Arc::new(finsearch_core::embed::HashEmbedder),
    )
    .unwrap();
    assert_eq!(store.collection_len("corpus"), 3);
}

#[test]
fn missing_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = agent(&dir.path().join("absent.toml"), &["serve"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));
}

#[test]
fn example_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../agent.example.toml");
    let config = finsearch_service::AgentConfig::load(&path).unwrap();
    assert_eq!(config.default_backend_id().unwrap(), "local");
    assert_eq!(config.backends.len(), 3);
    assert!(config.settings().default_preferences.validate().is_ok());
}
