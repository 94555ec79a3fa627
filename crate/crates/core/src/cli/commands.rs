//! Subcommand implementations, callable without the argument parser.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::{factorize, materialize, run_method, TrainRun};
use crate::error::{AraError, Result};
use crate::zoo::io::{self, write_atomic};
use crate::zoo::{capture_calibration, evaluate_ce, pretrain, synthetic_text, Corpus, Model, ModelConfig, PretrainConfig};

use super::artifacts::{
    ratios_csv, require_artifacts, steps_csv, unix_now, AllocationFile, InputRecord, Manifest, ALLOCATION_FILE,
    MANIFEST_FILE, RATIOS_FILE, STEPS_FILE, VERSION,
};
use super::config::CompressSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub corpus: PathBuf,
    pub model_out: PathBuf,
    pub config: ModelConfig,
    pub train: PretrainConfig,
    pub heldout: f64,
    pub eval_window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_ce: f64,
    pub final_train_loss: f64,
    pub heldout_ce: f64,
    pub params: usize,
}

pub fn cmd_pretrain(spec: &PretrainSpec) -> Result<PretrainReport> {
    let corpus = Corpus::load(&spec.corpus)?;
    let (train, heldout) = corpus.split(spec.heldout);
    let heldout = if heldout.len() >= 2 { heldout } else { train };
    let mut model = Model::with_config(spec.config, spec.train.seed)?;
    let initial = evaluate_ce(&model, heldout, spec.eval_window)?;
    let losses = pretrain(&mut model, train, &spec.train)?;
    let fin = evaluate_ce(&model, heldout, spec.eval_window)?;
    io::save(&model, &spec.model_out)?;
    Ok(PretrainReport {
        initial_ce: initial.ce,
        final_train_loss: losses.last().copied().unwrap_or(f64::NAN),
        heldout_ce: fin.ce,
        params: model.total_params(),
    })
}

#[derive(Clone, Debug)]
pub struct CompressOutcome {
    pub run: TrainRun,
    pub allocation: AllocationFile,
    pub model_path: PathBuf,
    pub out_dir: PathBuf,
}

/// Calibrates, trains the allocation, rescales, materializes the compressed
/// model and writes `model.bin`, `allocation.json`, `steps.csv` and
/// `manifest.json`.
pub fn cmd_compress(spec: &CompressSpec) -> Result<CompressOutcome> {
    let started = unix_now();
    let model = io::load(&spec.model_in)?;
    if model.layers.iter().any(|l| l.dense().is_none()) {
        return Err(AraError::input(format!(
            "{} is already compressed; compress a dense model",
            spec.model_in.display()
        )));
    }
    let corpus = Corpus::load(&spec.corpus)?;
    let (train_tokens, _) = corpus.split(spec.heldout);
    let cfg = &spec.train;
    let calib = capture_calibration(&model, train_tokens, cfg.samples, cfg.seq_len, cfg.seed)?;
    let factors = factorize(&model, &calib)?;
    let run = run_method(spec.method, &model, &factors, &calib, cfg)?;
    let compressed = materialize(&model, &factors, &run)?;

    std::fs::create_dir_all(&spec.out_dir).map_err(|e| AraError::io(&spec.out_dir, e))?;
    let model_path = spec.model_out_path();
    let alloc_path = spec.out_dir.join(ALLOCATION_FILE);
    let steps_path = spec.out_dir.join(STEPS_FILE);
    let manifest_path = spec.out_dir.join(MANIFEST_FILE);
    let allocation = AllocationFile::from_run(&run, cfg.target_ratio);
    io::save(&compressed, &model_path)?;
    write_atomic(&alloc_path, allocation.to_json()?.as_bytes())?;
    write_atomic(&steps_path, steps_csv(&run.steps).as_bytes())?;
    Manifest {
        version: VERSION.into(),
        command: "compress".into(),
        seed: cfg.seed,
        config: spec.to_flat(),
        model_in: InputRecord::of(&spec.model_in)?,
        corpus: InputRecord::of(&spec.corpus)?,
        outputs: vec![model_path.clone(), alloc_path, steps_path, manifest_path.clone()],
        started_unix: started,
        finished_unix: unix_now(),
    }
    .save(&manifest_path)?;
    Ok(CompressOutcome {
        run,
        allocation,
        model_path,
        out_dir: spec.out_dir.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: PathBuf,
    pub ce: f64,
    pub perplexity: f64,
    pub tokens: usize,
    /// Parameters actually stored.
    pub params: usize,
    /// Parameters of the same model with every layer dense.
    pub dense_equivalent_params: usize,
    pub layer_dense_params: usize,
    pub layer_stored_params: usize,
    /// Stored over dense parameters of the compressible layers.
    pub compression_ratio: f64,
}

pub fn cmd_evaluate(model_path: &Path, corpus_path: &Path, heldout: f64, window: usize) -> Result<EvalReport> {
    if !(heldout > 0.0 && heldout <= 1.0) {
        return Err(AraError::config("heldout", "must lie in (0, 1]"));
    }
    if window == 0 {
        return Err(AraError::config("window", "must be positive"));
    }
    let model = io::load(model_path)?;
    let corpus = Corpus::load(corpus_path)?;
    let (_, held) = corpus.split(heldout);
    let r = evaluate_ce(&model, held, window)?;
    let dense = model.dense_layer_params();
    let stored = model.stored_layer_params();
    Ok(EvalReport {
        model: model_path.to_path_buf(),
        ce: r.ce,
        perplexity: r.perplexity,
        tokens: r.tokens,
        params: model.total_params(),
        dense_equivalent_params: model.config.param_count(),
        layer_dense_params: dense,
        layer_stored_params: stored,
        compression_ratio: stored as f64 / dense as f64,
    })
}

/// Writes the per-layer ratio table of a run directory; returns its path.
pub fn cmd_report(run_dir: &Path, out: Option<&Path>) -> Result<PathBuf> {
    require_artifacts(run_dir, &[ALLOCATION_FILE, STEPS_FILE, MANIFEST_FILE])?;
    let alloc = AllocationFile::load(&run_dir.join(ALLOCATION_FILE))?;
    Manifest::load(&run_dir.join(MANIFEST_FILE))?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join(RATIOS_FILE));
    write_atomic(&path, ratios_csv(&alloc).as_bytes())?;
    Ok(path)
}

/// Writes a seeded synthetic byte corpus of at least `bytes` bytes.
pub fn cmd_corpus(out: &Path, bytes: usize, seed: u64) -> Result<usize> {
    if bytes == 0 {
        return Err(AraError::config("bytes", "must be positive"));
    }
    let text = synthetic_text(bytes, seed);
    write_atomic(out, text.as_bytes())?;
    Ok(text.len())
}
