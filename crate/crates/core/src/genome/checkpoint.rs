//! Versioned binary container for a trained individual.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (genome, ids, fitness, epoch tag, tensor shapes), then every tensor
//! of the weight store as little-endian `f32`, in [`WeightStore::all_tensors`]
//! order.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::weights::BlockWeights;
use super::{Genome, Individual, WeightStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LMKCKPT\0";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    genome: Genome,
    in_channels: usize,
    fitness: Option<f64>,
    id: u64,
    parent_id: Option<u64>,
    cumulative_epochs: u64,
    shapes: Vec<Vec<usize>>,
}

/// A snapshot of an individual tagged with the run's cumulative epoch count.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub individual: Individual,
    pub in_channels: usize,
    pub cumulative_epochs: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let ind = &self.individual;
        let tensors = ind.weights.all_tensors();
        let header = Header {
            genome: ind.genome.clone(),
            in_channels: self.in_channels,
            fitness: ind.fitness,
            id: ind.id,
            parent_id: ind.parent_id,
            cumulative_epochs: self.cumulative_epochs,
            shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = tensors.iter().map(|t| t.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < header_len {
            return Err(CheckpointError::Corrupt("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let mut payload = body[header_len..].chunks_exact(4);
        let expected: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if payload.len() != expected || !payload.remainder().is_empty() {
            return Err(CheckpointError::Corrupt(format!(
                "expected {expected} tensor values, found {} bytes",
                body.len() - header_len
            )));
        }
        let mut tensors = Vec::with_capacity(header.shapes.len());
        for shape in &header.shapes {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = payload
                .by_ref()
                .take(n)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.push(
                Tensor::new(shape.clone(), data)
                    .map_err(|e| CheckpointError::Corrupt(e.to_string()))?,
            );
        }
        let weights = assemble(&header.genome, tensors)?;
        weights
            .check_consistency(&header.genome, header.in_channels)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        Ok(Self {
            individual: Individual {
                genome: header.genome,
                weights,
                fitness: header.fitness,
                id: header.id,
                parent_id: header.parent_id,
            },
            in_channels: header.in_channels,
            cumulative_epochs: header.cumulative_epochs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn assemble(genome: &Genome, tensors: Vec<Tensor>) -> Result<WeightStore, CheckpointError> {
    if tensors.len() != genome.len() * 5 + 2 {
        return Err(CheckpointError::Corrupt(format!(
            "{} tensors for a {}-block genome",
            tensors.len(),
            genome.len()
        )));
    }
    let mut it = tensors.into_iter();
    let mut blocks = Vec::with_capacity(genome.len());
    for _ in 0..genome.len() {
        let mut next = || it.next().expect("count checked");
        blocks.push(BlockWeights {
            kernel: next(),
            gamma: next(),
            beta: next(),
            running_mean: next(),
            running_var: next(),
        });
    }
    let head_weights = it.next().expect("count checked");
    let head_bias = it.next().expect("count checked");
    Ok(WeightStore {
        blocks,
        head_weights,
        head_bias,
    })
}
