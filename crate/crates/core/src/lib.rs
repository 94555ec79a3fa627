//! Adaptive rank allocation for whitened-SVD compression of the linear layers
//! of small language models.

pub mod allocator;
pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod error;
pub mod factorization;
pub mod guidance;
pub mod linalg;
pub mod mask;
pub mod optim;
pub mod tensor;
pub mod zoo;

pub use error::{AraError, Result};
pub use tensor::Matrix;
