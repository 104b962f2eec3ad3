use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tokio::net::TcpListener;
use tracing_subscriber::EnvFilter;

use finsearch_core::eval::{measure_latency, run_eval, AgentEndpoint, HttpEndpoint};
use finsearch_service::{build_state, serve, AgentConfig};

#[derive(Parser)]
#[command(name = "agent", version, about = "Local financial search agent")]
struct Cli {
    /// Configuration file.
    #[arg(long, global = true, default_value = "agent.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        /// Overrides the configured listen address.
        #[arg(long)]
        listen: Option<std::net::SocketAddr>,
    },
    /// Insert line-delimited `{text, source_uri}` records into the store.
    Ingest {
        #[arg(long, default_value = "corpus")]
        collection: String,
        #[arg(long)]
        file: PathBuf,
    },
    /// Evaluation runs and latency measurement.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Args)]
struct Target {
    /// Base URL of a running service. Without it an in-process agent is
    /// built from the configuration file.
    #[arg(long)]
    endpoint: Option<String>,
    /// Per-query timeout when talking to an endpoint, in seconds.
    #[arg(long, default_value_t = 300)]
    timeout_secs: u64,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Grade a dataset and write report.jsonl, summary.json and summary.txt.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        target: Target,
    },
    /// Time queries (one per line) and print mean and sample std.
    Latency {
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        target: Target,
    },
}

fn endpoint(cli_config: &Path, target: &Target) -> Result<Arc<dyn AgentEndpoint>> {
    Ok(match &target.endpoint {
        Some(url) => Arc::new(HttpEndpoint::new(
            url,
            Duration::from_secs(target.timeout_secs),
        )),
        None => {
            let config = AgentConfig::load(cli_config)?;
            Arc::new(config.build_agent()?)
        }
    })
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();

    match cli.command {
        Command::Serve { listen } => {
            let config = AgentConfig::load(&cli.config)?;
            let state = build_state(&config)?;
            let addr = listen.unwrap_or(config.listen);
            let listener = TcpListener::bind(addr)
                .await
                .with_context(|| format!("binding {addr}"))?;
            tracing::info!(%addr, profile = ?config.profile, records = state.agent.store().len(), "serving");
            serve(listener, state, config.ui_dir.clone()).await?;
        }
        Command::Ingest { collection, file } => {
            let config = AgentConfig::load(&cli.config)?;
            let agent = config.build_agent()?;
            let body = std::fs::read_to_string(&file)
                .with_context(|| format!("reading {}", file.display()))?;
            let summary = agent.ingest_dataset(&collection, &body).await?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if !summary.errors.is_empty() {
                bail!("{} line(s) rejected", summary.errors.len());
            }
        }
        Command::Eval(EvalCommand::Run {
            dataset,
            out,
            target,
        }) => {
            let endpoint = endpoint(&cli.config, &target)?;
            let report = run_eval(&dataset, endpoint.as_ref(), &out).await?;
            print!("{}", finsearch_core::eval::render_summary(&report.summary));
            eprintln!("report written to {}", out.display());
        }
        Command::Eval(EvalCommand::Latency { queries, target }) => {
            let endpoint = endpoint(&cli.config, &target)?;
            let text = std::fs::read_to_string(&queries)
                .with_context(|| format!("reading {}", queries.display()))?;
            let list: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect();
            let stats = measure_latency(endpoint.as_ref(), &list).await?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
    }
    Ok(())
}
