//! Full-rank guidance: preserved-capacity metric, guidance penalty and the
//! dense/low-rank switch.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::factorization::WhitenedFactorization;
use crate::mask::{kept_rank, ste_apply};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Dense,
    LowRank,
}

impl Mode {
    /// Dense exactly when `ratio >= 1`.
    pub fn for_ratio(ratio: f64) -> Self {
        if ratio >= 1.0 {
            Mode::Dense
        } else {
            Mode::LowRank
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dense => "dense",
            Mode::LowRank => "low-rank",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capacity {
    pub value: f64,
    /// Set for an all-zero whitened layer (`L_0 = 0`).
    pub degenerate: bool,
}

/// `G_R = (L_0 - L_R) / L_0` with `L_R` the truncation loss at the rank kept at
/// ratio `ratio`. A ratio at or above 1 selects the dense matrix, which keeps
/// everything.
pub fn capacity_preserved(f: &WhitenedFactorization, ratio: f64) -> Capacity {
    let l0 = f.total_norm();
    if l0 == 0.0 {
        return Capacity {
            value: 1.0,
            degenerate: true,
        };
    }
    if ratio >= 1.0 {
        return Capacity {
            value: 1.0,
            degenerate: false,
        };
    }
    let kept = kept_rank(ratio, f.m, f.n);
    let lr = f.truncation_loss(kept).expect("kept rank is capped");
    Capacity {
        value: ((l0 - lr) / l0).clamp(0.0, 1.0),
        degenerate: false,
    }
}

/// 0 while compression pays for itself (`capacity > ratio`), otherwise
/// `1 - ratio`, floored at zero when `clamp` is set.
pub fn guidance_loss(capacity: f64, ratio: f64, clamp: bool) -> f64 {
    if capacity > ratio {
        0.0
    } else if clamp {
        (1.0 - ratio).max(0.0)
    } else {
        1.0 - ratio
    }
}

/// Records the guidance penalty on the tape as a function of the ratio node.
/// Returns `None` when the penalty and its gradient are zero.
pub fn guidance_term(
    tape: &mut Tape,
    ratio: Var,
    capacity: f64,
    clamp: bool,
) -> Option<Var> {
    let r = tape.scalar_value(ratio);
    if capacity > r || (clamp && r >= 1.0) {
        return None;
    }
    let neg = tape.scale(ratio, -1.0);
    Some(tape.add_const(neg, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceEval {
    pub capacity: f64,
    pub loss: f64,
    pub mode: Mode,
    pub ratio: f64,
}

pub fn evaluate(f: &WhitenedFactorization, ratio: f64, clamp: bool) -> GuidanceEval {
    let capacity = capacity_preserved(f, ratio).value;
    GuidanceEval {
        capacity,
        loss: guidance_loss(capacity, ratio, clamp),
        mode: Mode::for_ratio(ratio),
        ratio,
    }
}

/// Handles of one layer's frozen tensors on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    /// m x n
    pub dense: Var,
    /// m x k
    pub wu: Var,
    /// k x n
    pub wv: Var,
}

/// Effective weight `W'`: the dense matrix in [`Mode::Dense`], otherwise
/// `W_u diag(mask) W_v`.
pub fn effective_weight(tape: &mut Tape, layer: LayerVars, mask: Var, mode: Mode) -> Result<Var> {
    match mode {
        Mode::Dense => Ok(layer.dense),
        Mode::LowRank => {
            let scaled = tape.mul_cols(layer.wu, mask)?;
            tape.matmul(scaled, layer.wv)
        }
    }
}

/// `x W'^T` without materializing `W'` in low-rank mode.
pub fn effective_apply(tape: &mut Tape, x: Var, layer: LayerVars, mask: Var, mode: Mode) -> Result<Var> {
    match mode {
        Mode::Dense => tape.matmul_nt(x, layer.dense),
        Mode::LowRank => ste_apply(tape, x, layer.wu, layer.wv, mask),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorization::whiten_with_gram;
    use crate::tensor::Matrix;

    fn diag_layer(values: &[f64]) -> WhitenedFactorization {
        whiten_with_gram(&Matrix::diag(values), &Matrix::identity(values.len()), 0.0).unwrap()
    }

    /// Ratio whose kept rank is `r` for an n x n module.
    fn ratio_for_rank(r: usize, n: usize) -> f64 {
        (r as f64 + 0.5) * 2.0 / n as f64
    }

    #[test]
    fn capacity_examples() {
        let f = diag_layer(&[4.0, 3.0]);
        // 2x2 module: break-even rank 1, so kept rank 1 needs ratio 1 which
        // is dense; use a 4x4 layer with the same leading spectrum instead.
        let f4 = diag_layer(&[4.0, 3.0, 0.0, 0.0]);
        let g = capacity_preserved(&f4, ratio_for_rank(1, 4));
        assert!((g.value - 0.4).abs() < 1e-12);
        assert_eq!(capacity_preserved(&f, 1.0).value, 1.0);
        assert_eq!(capacity_preserved(&f, 0.0).value, 0.0);
        let zero = diag_layer(&[0.0, 0.0]);
        assert!(capacity_preserved(&zero, 0.3).degenerate);
    }

    #[test]
    fn guidance_examples() {
        assert_eq!(guidance_loss(0.9, 0.5, true), 0.0);
        assert_eq!(guidance_loss(0.4, 0.5, true), 0.5);
        assert_eq!(guidance_loss(1.0, 1.2, true), 0.0);
        assert!((guidance_loss(1.0, 1.2, false) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn guidance_term_gradient_is_minus_one() {
        let mut tape = Tape::new();
        let r = tape.leaf(Matrix::scalar(0.5));
        let term = guidance_term(&mut tape, r, 0.4, true).unwrap();
        assert_eq!(tape.scalar_value(term), 0.5);
        tape.backward(term).unwrap();
        assert_eq!(tape.grad(r).unwrap().item(), -1.0);
        let mut tape = Tape::new();
        let r = tape.leaf(Matrix::scalar(1.2));
        assert!(guidance_term(&mut tape, r, 1.0, true).is_none());
        assert!(guidance_term(&mut tape, r, 1.0, false).is_some());
    }

    #[test]
    fn capacity_is_monotone_step_function() {
        let f = diag_layer(&[5.0, 4.0, 2.0, 1.0, 0.5, 0.1]);
        let mut last = 0.0;
        for i in 0..=200 {
            let r = i as f64 / 150.0;
            let g = capacity_preserved(&f, r).value;
            assert!(g >= last);
            assert!((0.0..=1.0).contains(&g));
            last = g;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn effective_weight_modes() {
        let f = diag_layer(&[3.0, 1.0, 0.0, 0.0]);
        let pair = f.full_factors();
        let dense = Matrix::diag(&[3.0, 1.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let layer = LayerVars {
            dense: tape.constant(dense.clone()),
            wu: tape.constant(pair.wu.clone()),
            wv: tape.constant(pair.wv.clone()),
        };
        let x = tape.constant(Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0]]));
        let mask = tape.constant(Matrix::row_vector(&[1.0, 0.0, 0.0, 0.0]));

        let y = effective_apply(&mut tape, x, layer, mask, Mode::for_ratio(1.5)).unwrap();
        assert_eq!(tape.value(y), &Matrix::from_rows(&[[3.0, 2.0, 0.0, 0.0]]));

        // kept rank 1: e1 -> 3 e1, e2 -> 0
        let y = effective_apply(&mut tape, x, layer, mask, Mode::LowRank).unwrap();
        assert!(tape.value(y).sub(&Matrix::from_rows(&[[3.0, 0.0, 0.0, 0.0]])).unwrap().max_abs() < 1e-12);
        let w = effective_weight(&mut tape, layer, mask, Mode::LowRank).unwrap();
        assert!(tape.value(w).sub(&Matrix::diag(&[3.0, 0.0, 0.0, 0.0])).unwrap().max_abs() < 1e-12);

        let ones = tape.constant(Matrix::row_vector(&[1.0; 4]));
        let y = effective_apply(&mut tape, x, layer, ones, Mode::LowRank).unwrap();
        let direct = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0]]).matmul_nt(&pair.product()).unwrap();
        assert!(tape.value(y).sub(&direct).unwrap().max_abs() < 1e-12);
    }
}
