//! The single background fine-tune job.

use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;

use finsearch_core::tune::{build_batches, export_sft, train, LinearModel, TrainReport};
use finsearch_core::vecstore::Store;

use crate::config::{FinetuneConfig, FinetuneMode};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum JobState {
    Idle,
    Running { progress: f64 },
    Done { report: JobReport },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum JobReport {
    Linear { train: TrainReport, records: usize },
    SftExport { examples: usize, path: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlreadyRunning;

pub struct FinetuneJob {
    state: Arc<Mutex<JobState>>,
    config: FinetuneConfig,
    store_dir: std::path::PathBuf,
}

impl FinetuneJob {
    pub fn new(config: FinetuneConfig, store_dir: std::path::PathBuf) -> Self {
        Self {
            state: Arc::new(Mutex::new(JobState::Idle)),
            config,
            store_dir,
        }
    }

    pub fn status(&self) -> JobState {
        self.state.lock().clone()
    }

    /// Starts a job on a blocking thread unless one is already running.
    pub fn start(&self, store: Arc<Store>) -> Result<JobState, AlreadyRunning> {
        {
            let mut state = self.state.lock();
            if matches!(*state, JobState::Running { .. }) {
                return Err(AlreadyRunning);
            }
            *state = JobState::Running { progress: 0.0 };
        }
        let state = self.state.clone();
        let config = self.config.clone();
        let export_path = if config.export_path.is_absolute() {
            config.export_path.clone()
        } else {
            self.store_dir.join(&config.export_path)
        };
        tokio::task::spawn_blocking(move || {
            let outcome = run(&store, &config, &export_path, &state);
            *state.lock() = match outcome {
                Ok(report) => JobState::Done { report },
                Err(reason) => JobState::Failed { reason },
            };
        });
        Ok(self.status())
    }
}

fn run(
    store: &Store,
    config: &FinetuneConfig,
    export_path: &std::path::Path,
    state: &Mutex<JobState>,
) -> Result<JobReport, String> {
    match config.mode {
        FinetuneMode::SftExport => {
            let examples =
                export_sft(store, &config.collection, export_path).map_err(|e| e.to_string())?;
            Ok(JobReport::SftExport {
                examples,
                path: export_path.display().to_string(),
            })
        }
        FinetuneMode::Linear => {
            let batches = build_batches(store, &config.collection, config.batch_size, config.seed)
                .map_err(|e| e.to_string())?;
            let records = batches.iter().map(|b| b.size()).sum();
            let dim = batches[0].inputs[0].len();
            let mut model = LinearModel::zeros(dim, 1);
            let total = (config.epochs * batches.len()).max(1) as f64;
            let mut on_batch = |epoch: usize, batch: usize, per_epoch: usize| {
                let done = (epoch * per_epoch + batch + 1) as f64;
                *state.lock() = JobState::Running {
                    progress: done / total,
                };
            };
            let train = train(
                &mut model,
                &batches,
                config.epochs,
                config.lr,
                Some(&mut on_batch),
            )
            .map_err(|e| e.to_string())?;
            Ok(JobReport::Linear { train, records })
        }
    }
}
