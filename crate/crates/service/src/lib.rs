//! HTTP service and command-line front end for the financial search agent.

pub mod api;
pub mod config;
pub mod finetune;

use std::sync::Arc;

use tokio::net::TcpListener;

pub use api::{router, AppState};
pub use config::{AgentConfig, Profile};
pub use finetune::FinetuneJob;

/// Builds the application state described by `config`.
pub fn build_state(config: &AgentConfig) -> Result<AppState, config::ConfigError> {
    let agent = config.build_agent()?;
    Ok(AppState {
        agent: Arc::new(agent),
        profile: config.profile,
        finetune: Arc::new(FinetuneJob::new(
            config.finetune.clone(),
            config.store_dir.clone(),
        )),
    })
}

/// Serves until the listener fails or the process receives Ctrl-C.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    ui_dir: Option<std::path::PathBuf>,
) -> std::io::Result<()> {
    axum::serve(listener, router(state, ui_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
