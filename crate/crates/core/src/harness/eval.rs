//! Held-out metrics over non-overlapping windows.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::Model;
use super::HarnessError;
use crate::tape::Tape;

/// Windows stacked into one forward pass.
const WINDOWS_PER_PASS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub cross_entropy_nats: f64,
    pub perplexity: f64,
    pub bpc: f64,
    pub predicted_tokens: usize,
}

impl EvalMetrics {
    pub fn from_nats(nats: f64, predicted_tokens: usize) -> Self {
        Self {
            cross_entropy_nats: nats,
            perplexity: nats.exp(),
            bpc: nats / LN_2,
            predicted_tokens,
        }
    }
}

/// Mean next-token cross-entropy over every predicted token of `dataset`.
/// Parameters are registered as constants, so no gradients are built.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<EvalMetrics, HarnessError> {
    let windows = dataset.eval_windows(model.config.max_seq_len);
    if windows.is_empty() {
        return Err(HarnessError::Data("evaluation corpus has nothing to predict".into()));
    }
    let mut mean = 0.0;
    let mut seen = 0usize;
    for chunk in windows.chunks(WINDOWS_PER_PASS) {
        let inputs: Vec<&[usize]> = chunk.iter().map(|w| dataset.window_inputs(w)).collect();
        let targets: Vec<usize> = chunk
            .iter()
            .flat_map(|w| dataset.window_targets(w).iter().copied())
            .collect();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &inputs, false)?;
        let ce = tape.cross_entropy(fwd.logits, &targets)?;
        let chunk_mean = tape.value(ce).item();
        seen += targets.len();
        mean += (chunk_mean - mean) * (targets.len() as f64 / seen as f64);
    }
    Ok(EvalMetrics::from_nats(mean, seen))
}
