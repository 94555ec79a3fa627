//! Versioned model container.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | content |
//! |---|---|---|
//! | 0 | 8 | magic `ARAMODEL` |
//! | 8 | 4 | format version (`u32`, currently 1) |
//! | 12 | 4 | header length `H` (`u32`) |
//! | 16 | H | UTF-8 JSON header |
//! | 16+H | 8 * T | tensor data, `f64`, row-major, in header order |
//! | end-32 | 32 | SHA-256 of every preceding byte |

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AraError, Result};
use crate::guidance::Mode;
use crate::tensor::Matrix;

use super::model::{Linear, LinearWeights, Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"ARAMODEL";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerHeader {
    pub name: String,
    pub out_dim: usize,
    pub in_dim: usize,
    pub mode: Mode,
    /// Present for low-rank layers.
    pub rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub layers: Vec<LayerHeader>,
    pub tensors: Vec<TensorHeader>,
}

fn tensors_of(model: &Model) -> Vec<(String, &Matrix)> {
    let mut out = Vec::new();
    for (k, e) in model.embeddings.iter().enumerate() {
        out.push((format!("embeddings.{k}"), e));
    }
    for l in &model.layers {
        match &l.weights {
            LinearWeights::Dense(w) => out.push((format!("{}.weight", l.name), w)),
            LinearWeights::LowRank { wu, wv } => {
                out.push((format!("{}.wu", l.name), wu));
                out.push((format!("{}.wv", l.name), wv));
            }
        }
    }
    out.push(("head".to_string(), &model.head));
    out
}

pub fn encode(model: &Model) -> Vec<u8> {
    let tensors = tensors_of(model);
    let header = Header {
        config: model.config,
        layers: model
            .layers
            .iter()
            .map(|l| LayerHeader {
                name: l.name.clone(),
                out_dim: l.out_dim,
                in_dim: l.in_dim,
                mode: l.mode(),
                rank: l.rank(),
            })
            .collect(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorHeader {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + json.len() + model.total_params() * 8 + CHECKSUM_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &tensors {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(digest.as_slice());
    buf
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let fail = |reason: String| AraError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 + CHECKSUM_LEN || &bytes[..8] != MAGIC {
        return Err(fail("bad magic".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(fail("checksum mismatch".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| fail("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&body[16..header_end])
        .map_err(|e| fail(format!("header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| fail(format!("header config: {e}")))?;

    let mut data = &body[header_end..];
    let mut tensors = std::collections::HashMap::new();
    for t in &header.tensors {
        let count = t.rows * t.cols;
        if data.len() < count * 8 {
            return Err(fail(format!("tensor {} truncated", t.name)));
        }
        let values = data[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[count * 8..];
        tensors.insert(t.name.clone(), Matrix::from_vec(t.rows, t.cols, values)?);
    }
    if !data.is_empty() {
        return Err(fail(format!("{} trailing bytes", data.len())));
    }

    let mut take = |name: String, rows: usize, cols: usize| -> Result<Matrix> {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| fail(format!("missing tensor {name}")))?;
        if t.shape() != (rows, cols) {
            return Err(fail(format!(
                "tensor {name} is {}x{}, expected {rows}x{cols}",
                t.rows(),
                t.cols()
            )));
        }
        Ok(t)
    };
    let cfg = header.config;
    let embeddings = (0..cfg.context)
        .map(|k| take(format!("embeddings.{k}"), cfg.vocab, cfg.width))
        .collect::<Result<Vec<_>>>()?;
    if header.layers.len() != 3 * cfg.depth {
        return Err(fail(format!(
            "{} layers listed for depth {}",
            header.layers.len(),
            cfg.depth
        )));
    }
    let mut layers = Vec::with_capacity(header.layers.len());
    for l in &header.layers {
        let weights = match (l.mode, l.rank) {
            (Mode::Dense, _) => LinearWeights::Dense(take(format!("{}.weight", l.name), l.out_dim, l.in_dim)?),
            (Mode::LowRank, Some(r)) => LinearWeights::LowRank {
                wu: take(format!("{}.wu", l.name), l.out_dim, r)?,
                wv: take(format!("{}.wv", l.name), r, l.in_dim)?,
            },
            (Mode::LowRank, None) => return Err(fail(format!("layer {} lacks a rank", l.name))),
        };
        layers.push(Linear {
            name: l.name.clone(),
            out_dim: l.out_dim,
            in_dim: l.in_dim,
            weights,
        });
    }
    let head = take("head".into(), cfg.vocab, cfg.width)?;
    Ok(Model {
        config: cfg,
        embeddings,
        layers,
        head,
    })
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| AraError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| AraError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| AraError::io(path, e))?;
    tmp.persist(path).map_err(|e| AraError::io(path, e.error))?;
    Ok(())
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| AraError::io(path, e))?;
    decode(&bytes, path)
}
