//! Run artifacts: allocation JSON, step CSV, ratio CSV and the manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::allocator::{LayerAllocation, Method, StepRecord, TrainRun};
use crate::error::{AraError, Result};
use crate::guidance::Mode;
use crate::zoo::io::write_atomic;

use super::config::FlatConfig;

pub const MODEL_FILE: &str = "model.bin";
pub const ALLOCATION_FILE: &str = "allocation.json";
pub const STEPS_FILE: &str = "steps.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RATIOS_FILE: &str = "ratios.csv";

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationFile {
    pub method: Method,
    pub target_ratio: f64,
    pub realized_ratio: f64,
    pub scale: f64,
    pub compressible_params: usize,
    pub stored_params: usize,
    pub dense_layers: usize,
    pub clamped_steps: Vec<String>,
    pub clamped_ranks: Vec<String>,
    pub layers: Vec<LayerAllocation>,
}

impl AllocationFile {
    pub fn from_run(run: &TrainRun, target_ratio: f64) -> Self {
        AllocationFile {
            method: run.method,
            target_ratio,
            realized_ratio: run.realized_ratio,
            scale: run.scale,
            compressible_params: run.compressible_params,
            stored_params: run.stored_params,
            dense_layers: run.allocation.iter().filter(|l| l.mode == Mode::Dense).count(),
            clamped_steps: run.clamped_steps.clone(),
            clamped_ranks: run.clamped_ranks.clone(),
            layers: run.allocation.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| AraError::input(format!("cannot serialize allocation: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AraError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AraError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

pub fn steps_csv(steps: &[StepRecord]) -> String {
    let mut out = String::from("step,epoch,L_m,L_g,L_c,total,realized_ratio,dense_layers\n");
    for s in steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.step, s.epoch, s.lm, s.lg, s.lc, s.total, s.realized_ratio, s.dense_layers
        );
    }
    out
}

pub fn ratios_csv(alloc: &AllocationFile) -> String {
    let mut out = String::from("index,name,m,n,mode,rank,R,G_R,trained_R\n");
    for (i, l) in alloc.layers.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{},{},{}",
            l.name,
            l.m,
            l.n,
            l.mode,
            l.rank.map(|r| r.to_string()).unwrap_or_default(),
            l.ratio,
            l.capacity,
            l.trained_ratio.map(|r| r.to_string()).unwrap_or_default()
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputRecord {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| AraError::io(path, e))?;
        Ok(InputRecord {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Effective flat configuration; `compress --manifest` replays it.
    pub config: FlatConfig,
    pub model_in: InputRecord,
    pub corpus: InputRecord,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AraError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AraError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| AraError::input(format!("cannot serialize manifest: {e}")))?;
        write_atomic(path, (text + "\n").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Fails listing every missing artifact of a run directory.
pub fn require_artifacts(dir: &Path, names: &[&str]) -> Result<()> {
    let missing: Vec<String> = names
        .iter()
        .map(|n| dir.join(n))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(AraError::input(format!("missing run artifacts: {}", missing.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn missing_artifacts_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(STEPS_FILE), "").unwrap();
        let err = require_artifacts(dir.path(), &[ALLOCATION_FILE, STEPS_FILE, MANIFEST_FILE])
            .unwrap_err()
            .to_string();
        assert!(err.contains(ALLOCATION_FILE) && err.contains(MANIFEST_FILE));
        assert!(!err.contains(STEPS_FILE));
    }
}
