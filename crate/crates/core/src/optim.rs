//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{AraError, Result};
use crate::tensor::Matrix;

/// A trainable tensor together with the gradient of the most recent backward pass.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Matrix,
    pub grad: Option<Matrix>,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        Param { value, grad: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamWState {
    /// Allocates moment buffers shaped like `params`.
    pub fn new(config: AdamWConfig, params: &[Param]) -> Self {
        let zeros = |p: &Param| Matrix::zeros(p.value.rows(), p.value.cols());
        AdamWState {
            config,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }

    /// One update of every parameter; gradients are cleared afterwards.
    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(AraError::Usage(format!(
                "optimizer tracks {} tensors, got {}",
                self.first.len(),
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(AraError::Usage(format!("parameter {i} has no gradient")));
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.take().expect("checked above");
            p.value.expect_same_shape(&grad, "adamw gradient")?;
            let values = p.value.as_mut_slice();
            for (((x, g), m), v) in values
                .iter_mut()
                .zip(grad.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *x -= lr * weight_decay * *x;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
