//! Held-out cross-entropy and perplexity.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{AraError, Result};

use super::corpus::sequential_windows;
use super::model::Model;

/// Windows per forward pass.
const EVAL_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean next-token cross-entropy in nats.
    pub ce: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// Token-weighted mean CE over consecutive windows of `window + 1` tokens.
pub fn evaluate_ce(model: &Model, heldout: &[usize], window: usize) -> Result<EvalResult> {
    if heldout.len() < 2 {
        return Err(AraError::input("held-out split needs at least two tokens"));
    }
    let windows = sequential_windows(heldout, window + 1);
    let mut total = 0.0;
    let mut count = 0;
    for chunk in windows.chunks(EVAL_CHUNK) {
        let batch = model.batch(chunk);
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &batch)?;
        let loss = tape.cross_entropy(logits, &batch.targets)?;
        total += tape.scalar_value(loss) * batch.len() as f64;
        count += batch.len();
    }
    let ce = total / count as f64;
    Ok(EvalResult {
        ce,
        perplexity: ce.exp(),
        tokens: count,
    })
}
