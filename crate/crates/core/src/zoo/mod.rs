//! Desk-scale compressible language models, corpora and calibration.

pub mod calibrate;
pub mod corpus;
pub mod eval;
pub mod io;
pub mod model;
pub mod pretrain;
pub mod toy;

pub use calibrate::{capture_calibration, CalibrationSet};
pub use corpus::{synthetic_text, Corpus, BYTE_VOCAB};
pub use eval::{evaluate_ce, EvalResult};
pub use model::{Batch, CompressibleNet, Linear, LinearWeights, Model, ModelConfig};
pub use pretrain::{pretrain, PretrainConfig};
