//! Comparison allocators: closed-form uniform truncation, a tanh mask with one
//! trainable cutoff per layer, and an unordered Gumbel-sigmoid mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{AraError, Result};
use crate::factorization::break_even_rank;
use crate::mask::{kept_rank, prefix_mask, MaskGraph};
use crate::tensor::Matrix;

/// Default tanh sharpness relative to the mask length `r`: `beta = 0.1 r`.
pub const DEFAULT_TANH_BETA_SCALE: f64 = 0.1;
pub const DEFAULT_GUMBEL_TEMPERATURE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "kebab-case")]
pub enum BaselineKind {
    Uniform,
    TanhMask { beta_scale: f64, lr: f64 },
    GumbelMask { temperature: f64, lr: f64 },
}

impl BaselineKind {
    pub fn tag(&self) -> &'static str {
        match self {
            BaselineKind::Uniform => "uniform",
            BaselineKind::TanhMask { .. } => "tanh",
            BaselineKind::GumbelMask { .. } => "gumbel",
        }
    }
}

/// Result of [`uniform_allocate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformAllocation {
    pub ranks: Vec<usize>,
    /// Indices of layers whose closed-form rank was 0 and were raised to 1.
    pub clamped: Vec<usize>,
}

/// `r_i = floor(R * m_i n_i / (m_i + n_i))`, at least 1 and at most
/// `min(m_i, n_i)`.
pub fn uniform_allocate(shapes: &[(usize, usize)], target: f64) -> Result<UniformAllocation> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(AraError::config("ratio", "must lie in (0, 1]"));
    }
    let mut clamped = Vec::new();
    let ranks = shapes
        .iter()
        .enumerate()
        .map(|(i, &(m, n))| {
            let r = kept_rank(target, m, n);
            if r == 0 {
                clamped.push(i);
                1
            } else {
                r
            }
        })
        .collect();
    Ok(UniformAllocation { ranks, clamped })
}

/// `m_i = 0.5 tanh(beta (k - i)) + 0.5` for `i = 1..=len`.
pub fn tanh_mask(k: f64, beta: f64, len: usize) -> Vec<f64> {
    (1..=len)
        .map(|i| 0.5 * (beta * (k - i as f64)).tanh() + 0.5)
        .collect()
}

/// `sigmoid((logit + noise) / temperature)` per index, with `noise` a logistic
/// draw (difference of two Gumbel samples).
pub fn gumbel_mask(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> Vec<f64> {
    let noise = logistic_noise(logits.len(), rng);
    relaxed_bernoulli(logits, &noise, temperature)
}

pub fn logistic_noise(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            u.ln() - (1.0 - u).ln()
        })
        .collect()
}

pub fn relaxed_bernoulli(logits: &[f64], noise: &[f64], temperature: f64) -> Vec<f64> {
    logits
        .iter()
        .zip(noise)
        .map(|(l, g)| crate::autodiff::sigmoid((l + g) / temperature))
        .collect()
}

fn ratio_scale(m: usize, n: usize) -> f64 {
    (m + n) as f64 / (m * n) as f64
}

/// Records the tanh mask for cutoff node `k` (1 x 1). The forward pass uses
/// the prefix mask kept at the resulting ratio.
pub fn record_tanh(tape: &mut Tape, k: Var, beta: f64, len: usize, m: usize, n: usize) -> Result<MaskGraph> {
    let ones = tape.constant(Matrix::filled(1, len, 1.0));
    let idx = tape.constant(Matrix::row_vector(
        &(1..=len).map(|i| i as f64).collect::<Vec<_>>(),
    ));
    let spread = tape.matmul(k, ones)?;
    let diff = tape.sub(spread, idx)?;
    let arg = tape.scale(diff, beta);
    let t = tape.tanh(arg);
    let half = tape.scale(t, 0.5);
    let p = tape.add_const(half, 0.5);
    finish(tape, p, len, m, n, None)
}

/// Records one Gumbel-sigmoid draw for `logits` (1 x len). The relaxed draw
/// itself, in index order, is the forward mask.
pub fn record_gumbel(
    tape: &mut Tape,
    logits: Var,
    noise: &[f64],
    temperature: f64,
    m: usize,
    n: usize,
) -> Result<MaskGraph> {
    let len = noise.len();
    let noise = tape.constant(Matrix::row_vector(noise));
    let shifted = tape.add(logits, noise)?;
    let scaled = tape.scale(shifted, 1.0 / temperature);
    let p = tape.sigmoid(scaled);
    let relaxed = tape.value(p).as_slice().to_vec();
    finish(tape, p, len, m, n, Some(relaxed))
}

fn finish(tape: &mut Tape, p: Var, len: usize, m: usize, n: usize, binary: Option<Vec<f64>>) -> Result<MaskGraph> {
    let sum_p = tape.sum(p);
    let ratio = tape.scale(sum_p, ratio_scale(m, n));
    let ratio_value = tape.scalar_value(ratio);
    let kept = kept_rank(ratio_value, m, n).min(len);
    Ok(MaskGraph {
        p,
        sum_p,
        ratio,
        ratio_value,
        kept_rank: kept,
        binary: binary.unwrap_or_else(|| prefix_mask(kept, len)),
    })
}

/// Cutoff whose tanh mask keeps about `target * k*` values.
pub fn tanh_init(target: f64, m: usize, n: usize) -> f64 {
    target * break_even_rank(m, n) + 0.5
}

/// Shared logit whose sigmoid keeps an expected `target * k*` of `len` values.
pub fn gumbel_init(target: f64, m: usize, n: usize, len: usize) -> f64 {
    let q = (target * break_even_rank(m, n) / len as f64).clamp(0.01, 0.99);
    (q / (1.0 - q)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_examples() {
        let a = uniform_allocate(&[(64, 64), (32, 32)], 0.5).unwrap();
        assert_eq!(a.ranks, vec![16, 8]);
        let a = uniform_allocate(&[(64, 128), (3, 3)], 1.0).unwrap();
        assert_eq!(a.ranks, vec![42, 1]);
        let a = uniform_allocate(&[(2, 2)], 0.1).unwrap();
        assert_eq!((a.ranks, a.clamped), (vec![1], vec![0]));
        assert!(uniform_allocate(&[(2, 2)], 1.5).is_err());
    }

    #[test]
    fn tanh_examples() {
        assert!((tanh_mask(4.0, 1.0, 8)[3] - 0.5).abs() < 1e-15);
        let sharp = tanh_mask(4.5, 1e3, 8);
        assert!(sharp[..4].iter().all(|&v| v > 1.0 - 1e-12));
        assert!(sharp[4..].iter().all(|&v| v < 1e-12));
        for w in tanh_mask(2.3, 0.7, 10).windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn tanh_gradient_matches_finite_differences() {
        let (beta, len, k0) = (0.8, 6, 2.7);
        let mut tape = Tape::new();
        let k = tape.leaf(Matrix::scalar(k0));
        let g = record_tanh(&mut tape, k, beta, len, 4, 4).unwrap();
        let w = Matrix::row_vector(&[1.0, -2.0, 0.5, 3.0, 0.25, -1.0]);
        let wv = tape.constant(w.clone());
        let prod = tape.hadamard(g.p, wv).unwrap();
        let s = tape.sum(prod);
        tape.backward(s).unwrap();
        let h = 1e-6;
        let f = |k: f64| -> f64 {
            tanh_mask(k, beta, len)
                .iter()
                .zip(w.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let fd = (f(k0 + h) - f(k0 - h)) / (2.0 * h);
        assert!((tape.grad(k).unwrap().item() - fd).abs() < 1e-6);
    }

    #[test]
    fn gumbel_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(gumbel_mask(&[1e6; 5], 0.5, &mut rng).iter().all(|&v| v > 1.0 - 1e-12));
        let noise = logistic_noise(8, &mut rng);
        let hard = relaxed_bernoulli(&[0.3; 8], &noise, 1e-9);
        assert!(hard.iter().all(|&v| v == 0.0 || v == 1.0));
        let draws = 10_000;
        let mean = (0..draws)
            .map(|_| gumbel_mask(&[0.0], 1.0, &mut rng)[0])
            .sum::<f64>()
            / draws as f64;
        assert!((mean - 0.5).abs() < 0.02);
    }

    #[test]
    fn inits_hit_target() {
        let (m, n) = (64, 128);
        let k = tanh_init(0.6, m, n);
        let kept: f64 = tanh_mask(k, 1e3, 64).iter().sum();
        assert_eq!(kept, (0.6 * break_even_rank(m, n)).round());
        let l = gumbel_init(0.6, m, n, 64);
        let q = crate::autodiff::sigmoid(l);
        assert!((q * 64.0 - 0.6 * break_even_rank(m, n)).abs() < 1e-9);
    }
}
