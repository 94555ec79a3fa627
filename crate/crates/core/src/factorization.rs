//! Activation-whitened SVD of a linear layer.
//!
//! With calibration inputs `X` (features x samples) and Gram `H = X X^T`, the
//! layer weight `W` (out x in) is multiplied by the Cholesky factor `S` of the
//! damped Gram before decomposition, so that dropping singular values of
//! `W S` removes exactly the corresponding share of `||W X||_F`.

use serde::{Deserialize, Serialize};

use crate::error::{AraError, Result};
use crate::linalg::{self, DEFAULT_DAMPING};
use crate::tensor::Matrix;

/// `X X^T` for `X` of shape features x samples.
pub fn gram(x: &Matrix) -> Result<Matrix> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(AraError::input("gram of empty activation matrix"));
    }
    let mut h = x.matmul_nt(x)?;
    symmetrize(&mut h);
    Ok(h)
}

/// `A^T A` for row-major samples `A` (samples x features); equals `gram(A^T)`.
pub fn gram_of_rows(a: &Matrix) -> Result<Matrix> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(AraError::input("gram of empty activation matrix"));
    }
    let mut h = a.matmul_tn(a)?;
    symmetrize(&mut h);
    Ok(h)
}

fn symmetrize(h: &mut Matrix) {
    let n = h.rows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
}

pub use linalg::cholesky_damped;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WhitenedFactorization {
    /// Output dimension of the layer.
    pub m: usize,
    /// Input dimension of the layer.
    pub n: usize,
    /// m x k, k = min(m, n).
    pub u: Matrix,
    /// Non-increasing, length k.
    pub sigma: Vec<f64>,
    /// n x k.
    pub v: Matrix,
    /// n x n lower-triangular Cholesky factor of the (possibly damped) Gram.
    pub s: Matrix,
    pub s_inv: Matrix,
    /// `tail[r] = sum_{i >= r} sigma_i^2`, length k + 1.
    tail_energy: Vec<f64>,
}

/// Low-rank factors with `W ~= wu * wv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    /// m x r
    pub wu: Matrix,
    /// r x n
    pub wv: Matrix,
    pub rank: usize,
}

impl FactorPair {
    pub fn param_count(&self) -> usize {
        self.wu.len() + self.wv.len()
    }

    pub fn product(&self) -> Matrix {
        self.wu.matmul(&self.wv).expect("factor shapes agree")
    }
}

/// Whitened decomposition using calibration inputs `x` (n x d).
pub fn whiten_and_decompose(w: &Matrix, x: &Matrix) -> Result<WhitenedFactorization> {
    if x.rows() != w.cols() {
        return Err(AraError::dim(format!(
            "weight {:?} does not accept activations {:?}",
            w.shape(),
            x.shape()
        )));
    }
    whiten_with_gram(w, &gram(x)?, DEFAULT_DAMPING)
}

/// Whitened decomposition from a precomputed Gram `h` (n x n); `damping` is
/// applied only when `h` is not numerically positive definite.
pub fn whiten_with_gram(w: &Matrix, h: &Matrix, damping: f64) -> Result<WhitenedFactorization> {
    let (m, n) = w.shape();
    if h.shape() != (n, n) {
        return Err(AraError::dim(format!(
            "gram {:?} does not match weight {:?}",
            h.shape(),
            w.shape()
        )));
    }
    if m == 0 || n == 0 {
        return Err(AraError::input("empty weight matrix"));
    }
    let (s, _) = linalg::cholesky_adaptive(h, damping)?;
    let s_inv = linalg::lower_triangular_inverse(&s)?;
    let ws = w.matmul(&s)?;
    let dec = linalg::svd(&ws)?;
    let tail_energy = tail_sums(&dec.sigma);
    Ok(WhitenedFactorization {
        m,
        n,
        u: dec.u,
        sigma: dec.sigma,
        v: dec.v,
        s,
        s_inv,
        tail_energy,
    })
}

fn tail_sums(sigma: &[f64]) -> Vec<f64> {
    let mut tail = vec![0.0; sigma.len() + 1];
    for i in (0..sigma.len()).rev() {
        tail[i] = tail[i + 1] + sigma[i] * sigma[i];
    }
    tail
}

impl WhitenedFactorization {
    /// Number of singular values, `min(m, n)`.
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    pub fn dense_params(&self) -> usize {
        self.m * self.n
    }

    /// Rank at which the factored form costs as much as the dense matrix,
    /// `mn / (m + n)` (real-valued).
    pub fn break_even_rank(&self) -> f64 {
        break_even_rank(self.m, self.n)
    }

    /// Rank-`r` factor pair `U_r sqrt(S_r)`, `sqrt(S_r) V_r^T S^-1`.
    pub fn truncate(&self, r: usize) -> Result<FactorPair> {
        let k = self.rank_capacity();
        if r == 0 || r > k {
            return Err(AraError::input(format!("rank {r} outside 1..={k}")));
        }
        let root: Vec<f64> = self.sigma[..r].iter().map(|s| s.sqrt()).collect();
        let wu = self.u.first_cols(r).scale_cols(&root);
        let vr_t = self.v.first_cols(r).transpose().scale_rows(&root);
        let wv = vr_t.matmul(&self.s_inv)?;
        Ok(FactorPair { wu, wv, rank: r })
    }

    /// Factors at full rank k, the carrier for mask training.
    pub fn full_factors(&self) -> FactorPair {
        self.truncate(self.rank_capacity())
            .expect("full rank is always in range")
    }

    /// `sqrt(sum_{i > r} sigma_i^2)`.
    pub fn truncation_loss(&self, r: usize) -> Result<f64> {
        let k = self.rank_capacity();
        if r > k {
            return Err(AraError::input(format!("rank {r} outside 0..={k}")));
        }
        Ok(self.tail_energy[r].max(0.0).sqrt())
    }

    /// `L_0 = ||W S||_F`.
    pub fn total_norm(&self) -> f64 {
        self.tail_energy[0].sqrt()
    }
}

/// `mn / (m + n)`.
pub fn break_even_rank(m: usize, n: usize) -> f64 {
    (m * n) as f64 / (m + n) as f64
}
