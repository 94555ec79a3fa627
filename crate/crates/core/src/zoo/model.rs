//! A small byte-level language model whose MLP projections are the
//! compressible linear layers.
//!
//! Architecture: the current token and the `context - 1` preceding tokens are
//! looked up in separate embedding tables and summed; `depth` residual blocks
//! each apply `down(silu(gate(z)) * up(z))` to `z = rmsnorm(h)`; a final
//! rmsnorm feeds the output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{AraError, Result};
use crate::guidance::Mode;
use crate::tensor::Matrix;

pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub width: usize,
    pub hidden: usize,
    pub depth: usize,
    /// Number of token positions summed into each input embedding.
    pub context: usize,
}

impl ModelConfig {
    /// Defaults: `hidden = 2 * width`, three-token context.
    pub fn new(width: usize, depth: usize, vocab: usize) -> Self {
        ModelConfig {
            vocab,
            width,
            hidden: 2 * width,
            depth,
            context: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab", self.vocab),
            ("width", self.width),
            ("hidden", self.hidden),
            ("depth", self.depth),
            ("context", self.context),
        ] {
            if v == 0 {
                return Err(AraError::config(name, "must be positive"));
            }
        }
        Ok(())
    }

    /// Total parameters of a dense model with this shape.
    pub fn param_count(&self) -> usize {
        self.context * self.vocab * self.width
            + self.depth * 3 * self.width * self.hidden
            + self.vocab * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LinearWeights {
    /// out x in
    Dense(Matrix),
    /// `wu` out x r, `wv` r x in
    LowRank { wu: Matrix, wv: Matrix },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub out_dim: usize,
    pub in_dim: usize,
    pub weights: LinearWeights,
}

impl Linear {
    pub fn mode(&self) -> Mode {
        match self.weights {
            LinearWeights::Dense(_) => Mode::Dense,
            LinearWeights::LowRank { .. } => Mode::LowRank,
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match &self.weights {
            LinearWeights::Dense(_) => None,
            LinearWeights::LowRank { wu, .. } => Some(wu.cols()),
        }
    }

    pub fn dense_params(&self) -> usize {
        self.out_dim * self.in_dim
    }

    pub fn stored_params(&self) -> usize {
        match &self.weights {
            LinearWeights::Dense(w) => w.len(),
            LinearWeights::LowRank { wu, wv } => wu.len() + wv.len(),
        }
    }

    /// Dense equivalent of the stored weights.
    pub fn effective(&self) -> Matrix {
        match &self.weights {
            LinearWeights::Dense(w) => w.clone(),
            LinearWeights::LowRank { wu, wv } => wu.matmul(wv).expect("factor shapes agree"),
        }
    }

    pub fn dense(&self) -> Option<&Matrix> {
        match &self.weights {
            LinearWeights::Dense(w) => Some(w),
            LinearWeights::LowRank { .. } => None,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &self.weights {
            LinearWeights::Dense(w) => {
                let w = tape.constant(w.clone());
                tape.matmul_nt(x, w)
            }
            LinearWeights::LowRank { wu, wv } => {
                let wv = tape.constant(wv.clone());
                let wu = tape.constant(wu.clone());
                let z = tape.matmul_nt(x, wv)?;
                tape.matmul_nt(z, wu)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `context` tables of vocab x width; table k embeds the token k steps back.
    pub embeddings: Vec<Matrix>,
    /// Three per block, in order gate, up, down.
    pub layers: Vec<Linear>,
    /// vocab x width
    pub head: Matrix,
}

/// Token indices for every context offset plus next-token targets.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub context_indices: Vec<Vec<Option<usize>>>,
    pub targets: Vec<usize>,
}

impl Batch {
    /// Each window of `L + 1` tokens contributes `L` positions; context never
    /// crosses window boundaries.
    pub fn from_windows(windows: &[Vec<usize>], context: usize) -> Batch {
        let mut context_indices = vec![Vec::new(); context];
        let mut targets = Vec::new();
        for w in windows {
            for t in 0..w.len().saturating_sub(1) {
                for (k, idx) in context_indices.iter_mut().enumerate() {
                    idx.push(if t >= k { Some(w[t - k]) } else { None });
                }
                targets.push(w[t + 1]);
            }
        }
        Batch {
            context_indices,
            targets,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Tape handles of the non-compressible tensors.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub embeddings: Vec<Var>,
    pub head: Var,
}

pub type LayerFn<'a> = dyn FnMut(&mut Tape, usize, Var) -> Result<Var> + 'a;

/// A network exposing named linear layers that can be swapped for masked or
/// factored versions during the forward pass.
pub trait CompressibleNet {
    fn layer_count(&self) -> usize;

    fn layer_name(&self, index: usize) -> &str;

    /// Original dense weight, out x in.
    fn layer_weight(&self, index: usize) -> &Matrix;

    /// Logits for `batch`; `apply` computes every compressible layer.
    fn forward_layers(&self, tape: &mut Tape, batch: &Batch, apply: &mut LayerFn<'_>) -> Result<Var>;

    fn layer_shape(&self, index: usize) -> (usize, usize) {
        self.layer_weight(index).shape()
    }

    /// Sum of `m * n` over compressible layers.
    fn compressible_params(&self) -> usize {
        (0..self.layer_count())
            .map(|i| {
                let (m, n) = self.layer_shape(i);
                m * n
            })
            .sum()
    }

    /// Context length `batches` are built with.
    fn context(&self) -> usize {
        1
    }
}

impl Model {
    /// Seeded random initialization with default `hidden` and `context`.
    pub fn build(width: usize, depth: usize, vocab: usize, seed: u64) -> Result<Model> {
        Model::with_config(ModelConfig::new(width, depth, vocab), seed)
    }

    pub fn with_config(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ModelConfig {
            vocab,
            width,
            hidden,
            depth,
            context,
        } = config;
        let emb_std = 1.0 / (context as f64).sqrt();
        let embeddings = (0..context)
            .map(|_| Matrix::randn(vocab, width, emb_std, &mut rng))
            .collect();
        let mut layers = Vec::with_capacity(3 * depth);
        for b in 0..depth {
            for (role, out_dim, in_dim) in [
                ("gate", hidden, width),
                ("up", hidden, width),
                ("down", width, hidden),
            ] {
                let w = Matrix::randn(out_dim, in_dim, 1.0 / (in_dim as f64).sqrt(), &mut rng);
                layers.push(Linear {
                    name: format!("blocks.{b}.{role}"),
                    out_dim,
                    in_dim,
                    weights: LinearWeights::Dense(w),
                });
            }
        }
        let head = Matrix::randn(vocab, width, 0.02, &mut rng);
        Ok(Model {
            config,
            embeddings,
            layers,
            head,
        })
    }

    pub fn total_params(&self) -> usize {
        self.embeddings.iter().map(Matrix::len).sum::<usize>()
            + self.layers.iter().map(Linear::stored_params).sum::<usize>()
            + self.head.len()
    }

    /// Stored parameters of the compressible layers.
    pub fn stored_layer_params(&self) -> usize {
        self.layers.iter().map(Linear::stored_params).sum()
    }

    /// Dense-equivalent parameters of the compressible layers.
    pub fn dense_layer_params(&self) -> usize {
        self.layers.iter().map(Linear::dense_params).sum()
    }

    pub fn backbone_constants(&self, tape: &mut Tape) -> BackboneVars {
        BackboneVars {
            embeddings: self
                .embeddings
                .iter()
                .map(|e| tape.constant(e.clone()))
                .collect(),
            head: tape.constant(self.head.clone()),
        }
    }

    /// Forward pass with caller-provided backbone handles.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        backbone: &BackboneVars,
        batch: &Batch,
        apply: &mut LayerFn<'_>,
    ) -> Result<Var> {
        if batch.context_indices.len() != self.config.context {
            return Err(AraError::dim(format!(
                "batch built for context {} but model uses {}",
                batch.context_indices.len(),
                self.config.context
            )));
        }
        let mut h: Option<Var> = None;
        for (table, idx) in backbone.embeddings.iter().zip(&batch.context_indices) {
            let e = tape.gather_rows(*table, idx)?;
            h = Some(match h {
                Some(acc) => tape.add(acc, e)?,
                None => e,
            });
        }
        let mut h = h.expect("context is positive");
        for b in 0..self.config.depth {
            let z = tape.rms_norm_rows(h, RMS_EPS);
            let gate = apply(tape, 3 * b, z)?;
            let up = apply(tape, 3 * b + 1, z)?;
            let act = tape.silu(gate);
            let mixed = tape.hadamard(act, up)?;
            let down = apply(tape, 3 * b + 2, mixed)?;
            h = tape.add(h, down)?;
        }
        let z = tape.rms_norm_rows(h, RMS_EPS);
        tape.matmul_nt(z, backbone.head)
    }

    /// Logits using the stored (dense or factored) weights.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let backbone = self.backbone_constants(tape);
        self.forward_with(tape, &backbone, batch, &mut |t, i, x| self.layers[i].apply(t, x))
    }

    pub fn batch(&self, windows: &[Vec<usize>]) -> Batch {
        Batch::from_windows(windows, self.config.context)
    }
}

impl CompressibleNet for Model {
    fn layer_count(&self) -> usize {
        self.layers.len()
    }

    fn layer_name(&self, index: usize) -> &str {
        &self.layers[index].name
    }

    fn layer_weight(&self, index: usize) -> &Matrix {
        self.layers[index]
            .dense()
            .expect("compression starts from a dense model")
    }

    fn layer_shape(&self, index: usize) -> (usize, usize) {
        let l = &self.layers[index];
        (l.out_dim, l.in_dim)
    }

    fn forward_layers(&self, tape: &mut Tape, batch: &Batch, apply: &mut LayerFn<'_>) -> Result<Var> {
        let backbone = self.backbone_constants(tape);
        self.forward_with(tape, &backbone, batch, apply)
    }

    fn context(&self) -> usize {
        self.config.context
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_closed_form() {
        let m = Model::build(64, 2, 96, 1).unwrap();
        // 3 * 96 * 64 embeddings + 2 blocks * 3 * 64 * 128 + 96 * 64 head
        assert_eq!(m.total_params(), 18432 + 49152 + 6144);
        assert_eq!(m.total_params(), m.config.param_count());
        assert_eq!(m.layers.len(), 6);
        assert_eq!(m.layers[2].name, "blocks.0.down");
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(Model::build(16, 2, 32, 9).unwrap(), Model::build(16, 2, 32, 9).unwrap());
        assert_ne!(Model::build(16, 2, 32, 9).unwrap(), Model::build(16, 2, 32, 10).unwrap());
    }

    #[test]
    fn forward_on_zero_tokens() {
        let m = Model::build(8, 1, 20, 0).unwrap();
        let mut tape = Tape::new();
        let logits = m.forward(&mut tape, &m.batch(&[])).unwrap();
        assert_eq!(tape.value(logits).shape(), (0, 20));
    }

    #[test]
    fn batch_context_stays_inside_window() {
        let b = Batch::from_windows(&[vec![1, 2, 3], vec![4, 5, 6]], 2);
        assert_eq!(b.targets, vec![2, 3, 5, 6]);
        assert_eq!(b.context_indices[0], vec![Some(1), Some(2), Some(4), Some(5)]);
        assert_eq!(b.context_indices[1], vec![None, Some(1), None, Some(4)]);
    }

    #[test]
    fn zero_config_rejected() {
        assert!(Model::build(0, 1, 10, 0).is_err());
    }
}
