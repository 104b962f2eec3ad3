//! Fine-tuning support: batches drawn from the store, a generic
//! epoch/batch gradient-descent loop, and SFT dataset export.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vecstore::{EmbeddingRecord, RecordKind, Store};

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("collection `{0}` has no trainable records")]
    EmptyCollection(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        /// Losses of the epochs that completed.
        partial: TrainReport,
    },
    #[error("storage error: {0}")]
    Storage(String),
}

/// Parallel feature and target vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainBatch {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    /// Store ids of the records behind each row.
    pub record_ids: Vec<u64>,
}

impl TrainBatch {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self, TuneError> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(TuneError::InvalidArgument(format!(
                "batch needs matching non-empty inputs and targets, got {} and {}",
                inputs.len(),
                targets.len()
            )));
        }
        let record_ids = (0..inputs.len() as u64).collect();
        Ok(Self {
            inputs,
            targets,
            record_ids,
        })
    }

    pub fn size(&self) -> usize {
        self.inputs.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub batches_per_epoch: usize,
    pub lr: f64,
    pub epochs: usize,
}

/// A differentiable model with flat parameters.
pub trait TrainableModel {
    fn forward(&self, batch: &TrainBatch) -> Vec<Vec<f64>>;
    /// Non-negative scalar loss.
    fn loss(&self, predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> f64;
    /// Gradient of `loss` with respect to `parameters()`, same length.
    fn gradients(&self, batch: &TrainBatch, predictions: &[Vec<f64>]) -> Vec<f64>;
    fn apply(&mut self, gradients: &[f64], lr: f64);
    fn parameters(&self) -> Vec<f64>;
    fn set_parameters(&mut self, params: &[f64]);
}

/// `y = W x + b` under mean squared error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[o]
            })
            .collect()
    }
}

impl TrainableModel for LinearModel {
    fn forward(&self, batch: &TrainBatch) -> Vec<Vec<f64>> {
        batch.inputs.iter().map(|x| self.predict(x)).collect()
    }

    fn loss(&self, predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
        let count = (predictions.len() * self.outputs).max(1) as f64;
        predictions
            .iter()
            .zip(targets)
            .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)))
            .sum::<f64>()
            / count
    }

    fn gradients(&self, batch: &TrainBatch, predictions: &[Vec<f64>]) -> Vec<f64> {
        let scale = 2.0 / (batch.size() * self.outputs).max(1) as f64;
        let mut grad = vec![0.0; self.weights.len() + self.bias.len()];
        let (gw, gb) = grad.split_at_mut(self.weights.len());
        for ((x, p), t) in batch.inputs.iter().zip(predictions).zip(&batch.targets) {
            for o in 0..self.outputs {
                let r = scale * (p[o] - t[o]);
                for (g, v) in gw[o * self.inputs..(o + 1) * self.inputs].iter_mut().zip(x) {
                    *g += r * v;
                }
                gb[o] += r;
            }
        }
        grad
    }

    fn apply(&mut self, gradients: &[f64], lr: f64) {
        let (gw, gb) = gradients.split_at(self.weights.len());
        for (w, g) in self.weights.iter_mut().zip(gw) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(gb) {
            *b -= lr * g;
        }
    }

    fn parameters(&self) -> Vec<f64> {
        let mut p = self.weights.clone();
        p.extend_from_slice(&self.bias);
        p
    }

    fn set_parameters(&mut self, params: &[f64]) {
        let (w, b) = params.split_at(self.weights.len());
        self.weights.copy_from_slice(w);
        self.bias.copy_from_slice(b);
    }
}

/// Progress after each batch: (epoch, batch, batches_per_epoch).
pub type Progress<'a> = &'a mut dyn FnMut(usize, usize, usize);

/// Plain gradient descent. An epoch's loss is the mean of its batch losses,
/// each measured before that batch's update.
pub fn train(
    model: &mut dyn TrainableModel,
    batches: &[TrainBatch],
    epochs: usize,
    lr: f64,
    mut progress: Option<Progress<'_>>,
) -> Result<TrainReport, TuneError> {
    if epochs == 0 {
        return Err(TuneError::InvalidArgument(
            "epochs must be at least 1".into(),
        ));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(TuneError::InvalidArgument(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )));
    }
    if batches.is_empty() {
        return Err(TuneError::InvalidArgument("no batches".into()));
    }
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(epochs),
        batches_per_epoch: batches.len(),
        lr,
        epochs,
    };
    for epoch in 0..epochs {
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let preds = model.forward(batch);
            let loss = model.loss(&preds, &batch.targets);
            if !loss.is_finite() {
                return Err(TuneError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    partial: report,
                });
            }
            total += loss;
            let grads = model.gradients(batch, &preds);
            model.apply(&grads, lr);
            if let Some(cb) = progress.as_mut() {
                cb(epoch, b, batches.len());
            }
        }
        report.epoch_losses.push(total / batches.len() as f64);
    }
    Ok(report)
}

/// Training target for a record: corpus text is good, feedback carries its
/// rating rescaled to [0, 1], and a response takes the latest rating given
/// to it (neutral when unrated).
fn target(record: &EmbeddingRecord, ratings: &HashMap<&str, i8>) -> f64 {
    let scale = |r: i8| (f64::from(r) + 1.0) / 2.0;
    match record.record_kind {
        RecordKind::Corpus => 1.0,
        RecordKind::Feedback => scale(record.meta.rating.unwrap_or(0)),
        RecordKind::Response => record
            .meta
            .response_id
            .as_deref()
            .and_then(|id| ratings.get(id))
            .map_or(0.5, |r| scale(*r)),
    }
}

fn latest_ratings(records: &[EmbeddingRecord]) -> HashMap<&str, i8> {
    let mut out = HashMap::new();
    for r in records
        .iter()
        .filter(|r| r.record_kind == RecordKind::Feedback)
    {
        if let (Some(id), Some(rating)) = (r.meta.response_id.as_deref(), r.meta.rating) {
            out.insert(id, rating);
        }
    }
    out
}

/// Shuffles the collection's records with a seeded generator and cuts them
/// into batches. Feedback records rated -1 are left out.
pub fn build_batches(
    store: &Store,
    collection: &str,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<TrainBatch>, TuneError> {
    if batch_size == 0 {
        return Err(TuneError::InvalidArgument(
            "batch_size must be at least 1".into(),
        ));
    }
    let records = store.records(collection);
    let ratings = latest_ratings(&records);
    let mut usable: Vec<&EmbeddingRecord> = records
        .iter()
        .filter(|r| !(r.record_kind == RecordKind::Feedback && r.meta.rating == Some(-1)))
        .collect();
    if usable.is_empty() {
        return Err(TuneError::EmptyCollection(collection.to_string()));
    }
    usable.sort_by_key(|r| r.id);
    usable.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(usable
        .chunks(batch_size)
        .map(|chunk| TrainBatch {
            inputs: chunk.iter().map(|r| r.vector.values().to_vec()).collect(),
            targets: chunk.iter().map(|r| vec![target(r, &ratings)]).collect(),
            record_ids: chunk.iter().map(|r| r.id).collect(),
        })
        .collect())
}

#[derive(Serialize)]
struct SftLine<'a> {
    prompt: &'a str,
    completion: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    rating: Option<i8>,
}

/// Writes one `{prompt, completion, rating}` line per response record in
/// `collection`, rating omitted when none was given. Returns the line count.
pub fn export_sft(store: &Store, collection: &str, path: &Path) -> Result<usize, TuneError> {
    let records = store.records(collection);
    let ratings = latest_ratings(&records);
    let storage = |e: std::io::Error| TuneError::Storage(format!("{}: {e}", path.display()));
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(storage)?);
    let mut count = 0;
    for r in records
        .iter()
        .filter(|r| r.record_kind == RecordKind::Response)
    {
        let line = SftLine {
            prompt: r.meta.query.as_deref().unwrap_or(&r.payload_text),
            completion: &r.payload_text,
            rating: r
                .meta
                .response_id
                .as_deref()
                .and_then(|id| ratings.get(id).copied()),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| TuneError::Storage(e.to_string()))?;
        out.write_all(b"\n").map_err(storage)?;
        count += 1;
    }
    out.flush().map_err(storage)?;
    Ok(count)
}
