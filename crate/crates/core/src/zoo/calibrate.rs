//! Calibration windows and per-layer input activations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{AraError, Result};
use crate::factorization::gram_of_rows;
use crate::tensor::Matrix;

use super::corpus::sample_windows;
use super::model::{Batch, CompressibleNet};

const CAPTURE_CHUNK: usize = 16;

#[derive(Clone, Debug)]
pub struct CalibrationSet {
    /// Token windows of `seq_len + 1` tokens.
    pub windows: Vec<Vec<usize>>,
    /// Per layer, inputs as rows: tokens x in_dim. The whitening `X` is the
    /// transpose.
    pub inputs: Vec<Matrix>,
}

impl CalibrationSet {
    /// `X` (in_dim x tokens) for one layer.
    pub fn activations(&self, layer: usize) -> Matrix {
        self.inputs[layer].transpose()
    }

    /// `H = X X^T` per layer.
    pub fn grams(&self) -> Result<Vec<Matrix>> {
        self.inputs.iter().map(gram_of_rows).collect()
    }

    pub fn token_count(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

/// Draws `samples` windows with `seed` and records the input of every
/// compressible layer while running the unmodified forward pass.
pub fn capture_calibration<N: CompressibleNet + ?Sized>(
    net: &N,
    tokens: &[usize],
    samples: usize,
    seq_len: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    if samples == 0 || seq_len == 0 {
        return Err(AraError::input("calibration needs positive samples and seq_len"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let windows = sample_windows(tokens, samples, seq_len + 1, &mut rng)?;
    let mut parts: Vec<Vec<Matrix>> = vec![Vec::new(); net.layer_count()];
    for chunk in windows.chunks(CAPTURE_CHUNK) {
        let batch = Batch::from_windows(chunk, net.context());
        let mut tape = Tape::new();
        let weights: Vec<_> = (0..net.layer_count())
            .map(|i| tape.constant(net.layer_weight(i).clone()))
            .collect();
        net.forward_layers(&mut tape, &batch, &mut |t, i, x| {
            parts[i].push(t.value(x).clone());
            t.matmul_nt(x, weights[i])
        })?;
    }
    let inputs = parts
        .iter()
        .map(|p| Matrix::vstack(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationSet { windows, inputs })
}
