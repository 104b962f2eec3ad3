//! Answer-key grading with freshness credit, batch evaluation runs and
//! latency statistics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use regex::Regex;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

pub const DEFAULT_EVAL_IN_FLIGHT: usize = 4;
pub const NUMERIC_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line {line}: {reason}")]
    Schema { line: usize, reason: String },
    #[error("need at least {needed} inputs, got {got}")]
    EmptyInput { needed: usize, got: usize },
    #[error("agent error: {reason}")]
    Backend {
        reason: String,
        /// Timings collected before the failure, in ms.
        partial: Vec<f64>,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EvalError {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    #[serde(deserialize_with = "string_or_number")]
    pub id: String,
    pub question: String,
    pub current_answers: Vec<String>,
    #[serde(default)]
    pub outdated_answers: Vec<String>,
    pub difficulty: Difficulty,
    pub dataset: String,
    #[serde(default)]
    pub category: Option<String>,
    /// Excluded from automatic accuracy; needs a human grader.
    #[serde(default)]
    pub ungraded: bool,
}

fn string_or_number<'de, D: serde::Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        S(String),
        N(serde_json::Number),
    }
    Ok(match Id::deserialize(d)? {
        Id::S(s) => s,
        Id::N(n) => n.to_string(),
    })
}

impl EvalItem {
    fn check(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("question is empty".into());
        }
        if self.current_answers.iter().all(|a| a.trim().is_empty()) {
            return Err("current_answers must hold at least one non-empty answer".into());
        }
        for a in &self.current_answers {
            if self
                .outdated_answers
                .iter()
                .any(|o| normalize(o) == normalize(a))
            {
                return Err(format!("`{a}` is listed as both current and outdated"));
            }
        }
        Ok(())
    }
}

/// Parses a line-delimited dataset. Blank lines are skipped.
pub fn parse_dataset(text: &str) -> Result<Vec<EvalItem>, EvalError> {
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let schema = |reason: String| EvalError::Schema {
            line: i + 1,
            reason,
        };
        let item: EvalItem = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        item.check().map_err(schema)?;
        items.push(item);
    }
    if items.is_empty() {
        return Err(EvalError::Schema {
            line: 0,
            reason: "dataset has no items".into(),
        });
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Score {
    Zero,
    Half,
    Full,
}

impl Score {
    pub fn value(self) -> f64 {
        match self {
            Score::Zero => 0.0,
            Score::Half => 0.5,
            Score::Full => 1.0,
        }
    }
}

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grade {
    pub item_id: String,
    pub score: Score,
    pub matched: Option<String>,
    pub response_text: String,
}

/// Lowercases, trims and collapses whitespace.
pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn number_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d[\d,]*(?:\.\d+)?|-?\.\d+").unwrap())
}

fn parse_number(s: &str) -> Option<f64> {
    let cleaned: String = s
        .trim()
        .trim_start_matches('$')
        .trim_end_matches('%')
        .chars()
        .filter(|c| *c != ',')
        .collect();
    if cleaned.is_empty() {
        return None;
    }
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn numbers_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= NUMERIC_TOLERANCE * a.abs().max(b.abs()) || a == b
}

/// True when `needle` occurs in `hay` with no alphanumeric character
/// directly on either side.
fn contains_whole(hay: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let word = |c: Option<char>| c.is_some_and(char::is_alphanumeric);
    hay.match_indices(needle).any(|(i, m)| {
        let before = hay[..i].chars().next_back();
        let after = hay[i + m.len()..].chars().next();
        !word(before) && !word(after)
    })
}

fn answer_matches(response: &str, response_numbers: &[f64], answer: &str) -> bool {
    let answer = normalize(answer);
    if let Some(target) = parse_number(&answer) {
        if response_numbers.iter().any(|n| numbers_close(*n, target)) {
            return true;
        }
    }
    contains_whole(response, &answer)
}

/// Scores 1 for a current answer, 0.5 for an outdated one, 0 otherwise.
pub fn grade_response(item: &EvalItem, response: &str) -> Grade {
    let norm = normalize(response);
    let numbers: Vec<f64> = number_pattern()
        .find_iter(&norm)
        .filter_map(|m| parse_number(m.as_str()))
        .collect();
    let find = |answers: &[String]| {
        answers
            .iter()
            .find(|a| !a.trim().is_empty() && answer_matches(&norm, &numbers, a))
            .cloned()
    };
    let (score, matched) = match find(&item.current_answers) {
        Some(m) => (Score::Full, Some(m)),
        None => match find(&item.outdated_answers) {
            Some(m) => (Score::Half, Some(m)),
            None => (Score::Zero, None),
        },
    };
    Grade {
        item_id: item.id.clone(),
        score,
        matched,
        response_text: response.to_string(),
    }
}

/// Mean score.
pub fn accuracy(grades: &[Grade]) -> Result<f64, EvalError> {
    if grades.is_empty() {
        return Err(EvalError::EmptyInput { needed: 1, got: 0 });
    }
    Ok(grades.iter().map(|g| g.score.value()).sum::<f64>() / grades.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct BreakdownKey {
    pub dataset: String,
    pub difficulty: Difficulty,
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BreakdownRow {
    #[serde(flatten)]
    pub key: BreakdownKey,
    pub n: usize,
    pub accuracy: f64,
}

/// Accuracy per (dataset, difficulty, category), sorted by key.
pub fn breakdown(items: &[EvalItem], grades: &[Grade]) -> Vec<BreakdownRow> {
    let mut groups: BTreeMap<BreakdownKey, Vec<f64>> = BTreeMap::new();
    for (item, grade) in items.iter().zip(grades) {
        let key = BreakdownKey {
            dataset: item.dataset.clone(),
            difficulty: item.difficulty,
            category: item.category.clone(),
        };
        groups.entry(key).or_default().push(grade.score.value());
    }
    groups
        .into_iter()
        .map(|(key, scores)| BreakdownRow {
            key,
            n: scores.len(),
            accuracy: scores.iter().sum::<f64>() / scores.len() as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std_ms: f64,
    pub n: usize,
    pub timings_ms: Vec<f64>,
}

impl LatencyStats {
    pub fn from_timings(timings_ms: Vec<f64>) -> Result<Self, EvalError> {
        let n = timings_ms.len();
        if n < 2 {
            return Err(EvalError::EmptyInput { needed: 2, got: n });
        }
        let mean = timings_ms.iter().sum::<f64>() / n as f64;
        let var = timings_ms
            .iter()
            .map(|t| (t - mean) * (t - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        Ok(Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
            n,
            timings_ms,
        })
    }
}

/// Something that answers questions: the HTTP service or an in-process agent.
#[async_trait]
pub trait AgentEndpoint: Send + Sync {
    async fn ask(&self, query: &str) -> Result<String, String>;
}

/// Talks to a running service's `POST /api/query`.
pub struct HttpEndpoint {
    client: reqwest::Client,
    url: String,
}

impl HttpEndpoint {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .unwrap_or_default();
        Self {
            client,
            url: format!("{}/api/query", base_url.trim_end_matches('/')),
        }
    }
}

#[async_trait]
impl AgentEndpoint for HttpEndpoint {
    async fn ask(&self, query: &str) -> Result<String, String> {
        let resp = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({ "query": query }))
            .send()
            .await
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        let body: serde_json::Value = resp.json().await.map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!(
                "HTTP {status}: {}",
                body["message"].as_str().unwrap_or("")
            ));
        }
        body["text"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| "response has no `text` field".to_string())
    }
}

/// Times each query serially, wall clock, one at a time.
pub async fn measure_latency(
    endpoint: &dyn AgentEndpoint,
    queries: &[String],
) -> Result<LatencyStats, EvalError> {
    if queries.len() < 2 {
        return Err(EvalError::EmptyInput {
            needed: 2,
            got: queries.len(),
        });
    }
    let mut timings = Vec::with_capacity(queries.len());
    for q in queries {
        let started = Instant::now();
        if let Err(reason) = endpoint.ask(q).await {
            return Err(EvalError::Backend {
                reason,
                partial: timings,
            });
        }
        timings.push(started.elapsed().as_secs_f64() * 1000.0);
    }
    LatencyStats::from_timings(timings)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportLine {
    pub id: String,
    pub dataset: String,
    pub difficulty: Difficulty,
    pub category: Option<String>,
    pub question: String,
    pub response: String,
    /// Absent for ungraded items.
    pub score: Option<Score>,
    pub matched: Option<String>,
    pub ungraded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub items: usize,
    pub graded: usize,
    pub ungraded: usize,
    pub errors: usize,
    pub accuracy: Option<f64>,
    pub breakdown: Vec<BreakdownRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub lines: Vec<ReportLine>,
    pub summary: EvalSummary,
    /// Per-item wall-clock time, kept apart from the deterministic report.
    pub latency: Option<LatencyStats>,
}

/// Grades every item against `endpoint`, keeping dataset order. A failed
/// query counts as a zero-scored answer with its error recorded.
pub async fn evaluate(
    items: &[EvalItem],
    endpoint: &dyn AgentEndpoint,
    in_flight: usize,
) -> EvalReport {
    let answers: Vec<(Result<String, String>, f64)> = stream::iter(items)
        .map(|item| async move {
            let started = Instant::now();
            let r = endpoint.ask(&item.question).await;
            (r, started.elapsed().as_secs_f64() * 1000.0)
        })
        .buffered(in_flight.max(1))
        .collect()
        .await;

    let mut lines = Vec::with_capacity(items.len());
    let mut graded_items = Vec::new();
    let mut grades = Vec::new();
    let mut timings = Vec::with_capacity(items.len());
    for (item, (answer, ms)) in items.iter().zip(answers) {
        timings.push(ms);
        let (response, error) = match answer {
            Ok(text) => (text, None),
            Err(e) => (String::new(), Some(e)),
        };
        let grade = grade_response(item, &response);
        if !item.ungraded {
            graded_items.push(item.clone());
            grades.push(grade.clone());
        }
        lines.push(ReportLine {
            id: item.id.clone(),
            dataset: item.dataset.clone(),
            difficulty: item.difficulty,
            category: item.category.clone(),
            question: item.question.clone(),
            response,
            score: (!item.ungraded).then_some(grade.score),
            matched: if item.ungraded { None } else { grade.matched },
            ungraded: item.ungraded,
            error,
        });
    }
    let summary = EvalSummary {
        items: items.len(),
        graded: grades.len(),
        ungraded: items.len() - grades.len(),
        errors: lines.iter().filter(|l| l.error.is_some()).count(),
        accuracy: accuracy(&grades).ok(),
        breakdown: breakdown(&graded_items, &grades),
    };
    EvalReport {
        lines,
        summary,
        latency: LatencyStats::from_timings(timings).ok(),
    }
}

/// Human-readable summary table.
pub fn render_summary(summary: &EvalSummary) -> String {
    let mut out = String::new();
    let acc = summary
        .accuracy
        .map_or("n/a".to_string(), |a| format!("{a:.4}"));
    out.push_str(&format!(
        "items {}  graded {}  ungraded {}  errors {}  accuracy {acc}\n\n",
        summary.items, summary.graded, summary.ungraded, summary.errors
    ));
    out.push_str(&format!(
        "{:<20} {:<6} {:<20} {:>5} {:>9}\n",
        "dataset", "level", "category", "n", "accuracy"
    ));
    for row in &summary.breakdown {
        let level = match row.key.difficulty {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        };
        out.push_str(&format!(
            "{:<20} {:<6} {:<20} {:>5} {:>9.4}\n",
            row.key.dataset,
            level,
            row.key.category.as_deref().unwrap_or("-"),
            row.n,
            row.accuracy
        ));
    }
    out
}

/// Reads the dataset, evaluates it and writes `report.jsonl`,
/// `summary.json` and `summary.txt` into `out_dir`. Timings go to
/// `latency.json` so the other three files depend only on the answers.
pub async fn run_eval(
    dataset: &Path,
    endpoint: &dyn AgentEndpoint,
    out_dir: &Path,
) -> Result<EvalReport, EvalError> {
    let text = std::fs::read_to_string(dataset).map_err(EvalError::io(dataset))?;
    let items = parse_dataset(&text)?;
    let report = evaluate(&items, endpoint, DEFAULT_EVAL_IN_FLIGHT).await;
    write_report(&report, out_dir)?;
    Ok(report)
}

pub fn write_report(report: &EvalReport, out_dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(out_dir).map_err(EvalError::io(out_dir))?;
    let mut jsonl = String::new();
    for line in &report.lines {
        jsonl.push_str(&serde_json::to_string(line).expect("report lines serialize"));
        jsonl.push('\n');
    }
    let write = |name: &str, body: String| {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(EvalError::io(&path))
    };
    write("report.jsonl", jsonl)?;
    write(
        "summary.json",
        serde_json::to_string_pretty(&report.summary).expect("summary serializes") + "\n",
    )?;
    write("summary.txt", render_summary(&report.summary))?;
    if let Some(lat) = &report.latency {
        write(
            "latency.json",
            serde_json::to_string_pretty(lat).expect("stats serialize") + "\n",
        )?;
    }
    Ok(())
}
