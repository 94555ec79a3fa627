//! Two-layer network for gradient checks: `head(W2 tanh(W1 E[x]))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Matrix;

use super::model::{Batch, CompressibleNet, LayerFn};

#[derive(Clone, Debug)]
pub struct TwoLayerNet {
    pub embedding: Matrix,
    /// `[hidden x width, width x hidden]`
    pub weights: [Matrix; 2],
    pub head: Matrix,
    names: [String; 2],
}

impl TwoLayerNet {
    pub fn new(vocab: usize, width: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TwoLayerNet {
            embedding: Matrix::randn(vocab, width, 1.0, &mut rng),
            weights: [
                Matrix::randn(hidden, width, 1.0 / (width as f64).sqrt(), &mut rng),
                Matrix::randn(width, hidden, 1.0 / (hidden as f64).sqrt(), &mut rng),
            ],
            head: Matrix::randn(vocab, width, 0.5, &mut rng),
            names: ["fc1".into(), "fc2".into()],
        }
    }
}

impl CompressibleNet for TwoLayerNet {
    fn layer_count(&self) -> usize {
        2
    }

    fn layer_name(&self, index: usize) -> &str {
        &self.names[index]
    }

    fn layer_weight(&self, index: usize) -> &Matrix {
        &self.weights[index]
    }

    fn forward_layers(&self, tape: &mut Tape, batch: &Batch, apply: &mut LayerFn<'_>) -> Result<Var> {
        let e = tape.constant(self.embedding.clone());
        let head = tape.constant(self.head.clone());
        let x = tape.gather_rows(e, &batch.context_indices[0])?;
        let h = apply(tape, 0, x)?;
        let h = tape.tanh(h);
        let y = apply(tape, 1, h)?;
        tape.matmul_nt(y, head)
    }
}
