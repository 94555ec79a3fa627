//! Full-parameter next-token training of a [`Model`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{AraError, Result};
use crate::optim::{AdamWConfig, AdamWState, Param};

use super::corpus::sample_windows;
use super::model::{LinearWeights, Model};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 600,
            batch_size: 8,
            seq_len: 64,
            lr: 3e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return Err(AraError::config(name, "must be positive"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AraError::config("lr", "must be a positive finite number"));
        }
        Ok(())
    }
}

/// Trains every parameter in place and returns the per-step training loss.
pub fn pretrain(model: &mut Model, tokens: &[usize], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(AraError::input("pretraining corpus is empty"));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= model.config.vocab) {
        return Err(AraError::input(format!(
            "token {t} outside vocabulary of {}",
            model.config.vocab
        )));
    }
    if model.layers.iter().any(|l| l.dense().is_none()) {
        return Err(AraError::Usage("pretraining requires an all-dense model".into()));
    }

    let mut params: Vec<Param> = model
        .embeddings
        .iter()
        .chain(model.layers.iter().map(|l| l.dense().unwrap()))
        .chain(std::iter::once(&model.head))
        .map(|m| Param::new(m.clone()))
        .collect();
    let opt_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamWState::new(opt_cfg, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ctx = model.config.context;
    let n_layers = model.layers.len();
    let limit = 3.0 * (model.config.vocab as f64).ln() + 5.0;
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let windows = sample_windows(tokens, cfg.batch_size, cfg.seq_len + 1, &mut rng)?;
        let batch = model.batch(&windows);
        let mut tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let backbone = super::model::BackboneVars {
            embeddings: vars[..ctx].to_vec(),
            head: vars[ctx + n_layers],
        };
        let layer_vars = &vars[ctx..ctx + n_layers];
        let logits = model.forward_with(&mut tape, &backbone, &batch, &mut |t, i, x| {
            t.matmul_nt(x, layer_vars[i])
        })?;
        let loss = tape.cross_entropy(logits, &batch.targets)?;
        let value = tape.scalar_value(loss);
        if !value.is_finite() || value > limit {
            return Err(AraError::Numerical(format!(
                "pretraining diverged at step {step} (loss {value}); retry with a learning rate below {}",
                cfg.lr
            )));
        }
        losses.push(value);
        tape.backward(loss)?;
        for (p, v) in params.iter_mut().zip(&vars) {
            p.grad = tape.take_grad(*v);
        }
        opt.step(&mut params)?;
    }

    let mut values = params.into_iter().map(|p| p.value);
    for e in model.embeddings.iter_mut() {
        *e = values.next().unwrap();
    }
    for l in model.layers.iter_mut() {
        l.weights = LinearWeights::Dense(values.next().unwrap());
    }
    model.head = values.next().unwrap();
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::corpus::synthetic_text;
    use crate::zoo::eval::evaluate_ce;

    #[test]
    fn pretraining_beats_uniform_prediction() {
        let text = synthetic_text(60_000, 1);
        let tokens: Vec<usize> = text.bytes().map(|b| b as usize).collect();
        let (train, held) = tokens.split_at(50_000);
        let mut model = Model::build(16, 1, 256, 3).unwrap();
        let before = evaluate_ce(&model, held, 64).unwrap().ce;
        assert!((before / 256f64.ln() - 1.0).abs() < 0.05);
        let cfg = PretrainConfig {
            steps: 150,
            batch_size: 4,
            seq_len: 32,
            ..PretrainConfig::default()
        };
        pretrain(&mut model, train, &cfg).unwrap();
        let after = evaluate_ce(&model, held, 64).unwrap().ce;
        assert!(after < 0.9 * 256f64.ln(), "ce {after}");
    }

    #[test]
    fn divergence_reports_learning_rate() {
        let tokens: Vec<usize> = synthetic_text(20_000, 2).bytes().map(|b| b as usize).collect();
        let mut model = Model::build(16, 1, 256, 3).unwrap();
        let cfg = PretrainConfig {
            steps: 200,
            batch_size: 2,
            seq_len: 16,
            lr: 1e6,
            ..PretrainConfig::default()
        };
        match pretrain(&mut model, &tokens, &cfg) {
            Err(AraError::Numerical(msg)) => assert!(msg.contains("learning rate")),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
