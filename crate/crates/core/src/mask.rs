//! Monotone rank mask driven by simplex parameters through a staircase map.
//!
//! `D` trainable logits `theta` give `alpha = softmax(theta)`. Column `i` of
//! the staircase matrix holds ones in its bottom `v_i` rows, so
//! `p_i = sum_{j > D - v_i} alpha_j` is non-increasing in `i` with `p_1 = 1`.
//! The forward pass uses a hard prefix mask; gradients reach `p` unchanged
//! through `p + stop_grad(m - p)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{AraError, Result};
use crate::factorization::break_even_rank;
use crate::tensor::Matrix;

/// Slack for `floor` on ranks recovered from a ratio, absorbing the rounding
/// of `sum(p) * (m + n) / mn * mn / (m + n)`.
const RANK_FLOOR_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaircaseMap {
    steps: usize,
    counts: Vec<usize>,
}

impl StaircaseMap {
    /// `v_i = D - floor((i - 1) D / r)` for `i = 1..=r`.
    pub fn new(steps: usize, len: usize) -> Result<Self> {
        if steps == 0 {
            return Err(AraError::input("staircase needs at least one step"));
        }
        if steps > len {
            return Err(AraError::input(format!(
                "staircase with {steps} steps over {len} columns"
            )));
        }
        let counts = (0..len).map(|i| steps - (i * steps) / len).collect();
        Ok(StaircaseMap { steps, counts })
    }

    /// Like [`StaircaseMap::new`] but clamps `steps` to `len`; the flag
    /// reports whether clamping happened.
    pub fn clamped(steps: usize, len: usize) -> Result<(Self, bool)> {
        let clamp = steps > len;
        Ok((StaircaseMap::new(steps.min(len), len)?, clamp))
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Column one-counts `v`.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// The D x r binary matrix.
    pub fn matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.steps, self.len());
        for (i, &v) in self.counts.iter().enumerate() {
            for j in (self.steps - v)..self.steps {
                m[(j, i)] = 1.0;
            }
        }
        m
    }
}

pub fn build_staircase(steps: usize, len: usize) -> Result<StaircaseMap> {
    StaircaseMap::new(steps, len)
}

/// `p = alpha M`.
pub fn probability_mask(alpha: &[f64], map: &StaircaseMap) -> Result<Vec<f64>> {
    if alpha.len() != map.steps() {
        return Err(AraError::dim(format!(
            "{} simplex weights for {} steps",
            alpha.len(),
            map.steps()
        )));
    }
    let d = alpha.len();
    let mut suffix = vec![0.0; d + 1];
    for j in (0..d).rev() {
        suffix[j] = suffix[j + 1] + alpha[j];
    }
    Ok(map.counts().iter().map(|&v| suffix[d - v]).collect())
}

/// Module compression ratio `sum(p) (m + n) / (m n)`.
pub fn module_ratio(p: &[f64], m: usize, n: usize) -> f64 {
    p.iter().sum::<f64>() * (m + n) as f64 / (m * n) as f64
}

/// Prefix mask of length `len` with `min(floor(ratio * len), len)` ones.
pub fn binarize(ratio: f64, len: usize) -> Vec<f64> {
    let ones = ((ratio.max(0.0) * len as f64).floor() as usize).min(len);
    prefix_mask(ones, len)
}

pub fn prefix_mask(ones: usize, len: usize) -> Vec<f64> {
    (0..len).map(|i| if i < ones { 1.0 } else { 0.0 }).collect()
}

/// Singular values kept by a low-rank `m x n` module at ratio `ratio`:
/// `floor(ratio * mn / (m + n))`, capped at `min(m, n)`.
pub fn kept_rank(ratio: f64, m: usize, n: usize) -> usize {
    let exact = ratio.max(0.0) * break_even_rank(m, n);
    ((exact + RANK_FLOOR_SLACK).floor() as usize).min(m.min(n))
}

/// Straight-through mask: forward value `binary`, gradient routed to `p`.
pub fn ste_mask(tape: &mut Tape, p: Var, binary: &[f64]) -> Result<Var> {
    let pv = tape.value(p);
    if pv.rows() != 1 || pv.cols() != binary.len() {
        return Err(AraError::dim(format!(
            "mask of length {} against probabilities {:?}",
            binary.len(),
            pv.shape()
        )));
    }
    let offset: Vec<f64> = binary
        .iter()
        .zip(pv.as_slice())
        .map(|(b, p)| b - p)
        .collect();
    let offset = tape.constant(Matrix::row_vector(&offset));
    tape.add(p, offset)
}

/// Applies a straight-through mask to the `k` latent coordinates of a
/// low-rank layer: `(x W_v^T) diag(mask) W_u^T`.
pub fn ste_apply(tape: &mut Tape, x: Var, wu: Var, wv: Var, mask: Var) -> Result<Var> {
    let z = tape.matmul_nt(x, wv)?;
    let z = tape.mul_cols(z, mask)?;
    tape.matmul_nt(z, wu)
}

/// Trainable mask state for one `m x n` module.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskParams {
    pub theta: Vec<f64>,
    pub map: StaircaseMap,
    pub m: usize,
    pub n: usize,
}

/// Tape handles and current values produced by [`MaskParams::record`].
#[derive(Clone, Debug)]
pub struct MaskGraph {
    pub p: Var,
    pub sum_p: Var,
    pub ratio: Var,
    pub ratio_value: f64,
    pub kept_rank: usize,
    pub binary: Vec<f64>,
}

impl MaskParams {
    /// Zero logits: uniform `alpha`, `p_i = v_i / D`.
    pub fn new(steps: usize, m: usize, n: usize) -> Result<(Self, bool)> {
        let (map, clamped) = StaircaseMap::clamped(steps, m.min(n))?;
        Ok((
            MaskParams {
                theta: vec![0.0; map.steps()],
                map,
                m,
                n,
            },
            clamped,
        ))
    }

    pub fn alpha(&self) -> Vec<f64> {
        softmax(&self.theta)
    }

    pub fn p(&self) -> Vec<f64> {
        probability_mask(&self.alpha(), &self.map).expect("theta matches map")
    }

    pub fn ratio(&self) -> f64 {
        module_ratio(&self.p(), self.m, self.n)
    }

    /// Largest attainable ratio, reached when every `p_i = 1`.
    pub fn max_ratio(&self) -> f64 {
        self.map.len() as f64 * (self.m + self.n) as f64 / (self.m * self.n) as f64
    }

    pub fn kept_rank(&self) -> usize {
        kept_rank(self.ratio(), self.m, self.n)
    }

    /// Records `theta -> alpha -> p -> ratio` on the tape; `theta` must be a
    /// 1 x D node holding `self.theta`.
    pub fn record(&self, tape: &mut Tape, theta: Var) -> Result<MaskGraph> {
        let alpha = tape.softmax_rows(theta);
        let staircase = tape.constant(self.map.matrix());
        let p = tape.matmul(alpha, staircase)?;
        let sum_p = tape.sum(p);
        let ratio = tape.scale(sum_p, (self.m + self.n) as f64 / (self.m * self.n) as f64);
        let ratio_value = tape.scalar_value(ratio);
        let kept = kept_rank(ratio_value, self.m, self.n);
        Ok(MaskGraph {
            p,
            sum_p,
            ratio,
            ratio_value,
            kept_rank: kept,
            binary: prefix_mask(kept, self.map.len()),
        })
    }
}

pub(crate) fn softmax(theta: &[f64]) -> Vec<f64> {
    let max = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta.iter().map(|t| (t - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}
