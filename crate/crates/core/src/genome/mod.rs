//! Architecture genotype: an ordered list of conv/BN/ReLU blocks followed by a
//! fixed global-average-pool and dense head.

mod checkpoint;
mod network;
mod weights;

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evolution::EAConfig;
use crate::tensor::EngineError;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use network::{backward, forward, forward_infer, forward_train, predict, Gradients, Tape};
pub use weights::{BlockWeights, WeightStore};
pub(crate) use weights::init_head;

pub const DEFAULT_FILTERS: [usize; 7] = [16, 32, 64, 96, 128, 192, 256];
pub const DEFAULT_KERNELS: [usize; 3] = [1, 3, 5];
pub const DEFAULT_STRIDES: [usize; 2] = [1, 2];

#[derive(Debug, Error)]
pub enum GenomeError {
    #[error("weight store inconsistent with genome: {0}")]
    InconsistentWeights(String),
    #[error("input has {got} channels, network expects {expected}")]
    InputChannels { expected: usize, got: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// The hyperparameter sets every gene draws from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub filters: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    /// Upper bound on the number of stride-2 blocks.
    pub max_stride2: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            filters: DEFAULT_FILTERS.to_vec(),
            kernel_sizes: DEFAULT_KERNELS.to_vec(),
            strides: DEFAULT_STRIDES.to_vec(),
            max_stride2: 3,
        }
    }
}

impl SearchSpace {
    /// Sets must be non-empty, strictly ascending and positive.
    pub fn check(&self) -> Result<(), String> {
        for (name, set) in [
            ("filters", &self.filters),
            ("kernel_sizes", &self.kernel_sizes),
            ("strides", &self.strides),
        ] {
            if set.is_empty() {
                return Err(format!("{name} must not be empty"));
            }
            if set[0] == 0 || set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("{name} must be positive and strictly ascending"));
            }
        }
        Ok(())
    }

    pub fn next_filters(&self, current: usize) -> Option<usize> {
        self.filters.iter().copied().find(|&f| f > current)
    }

    pub fn prev_filters(&self, current: usize) -> Option<usize> {
        self.filters.iter().rev().copied().find(|&f| f < current)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvBlockGene {
    pub filters: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

impl ConvBlockGene {
    pub fn new(filters: usize, kernel_size: usize, stride: usize) -> Self {
        Self {
            filters,
            kernel_size,
            stride,
        }
    }

    /// Uniform filters and kernel size, stride one.
    pub fn random<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Self {
        let filters = *space.filters.choose(rng).expect("non-empty filter set");
        let kernel_size = *space.kernel_sizes.choose(rng).expect("non-empty kernel set");
        Self::new(filters, kernel_size, 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genome {
    blocks: Vec<ConvBlockGene>,
    num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NoBlocks,
    NoClasses,
    FiltersNotInSet { block: usize, filters: usize },
    KernelNotInSet { block: usize, kernel_size: usize },
    StrideNotInSet { block: usize, stride: usize },
    TooManyStride2 { count: usize, max: usize },
    InputTooSmall { min_side: usize, reduction: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NoBlocks => write!(f, "genome has no blocks"),
            Self::NoClasses => write!(f, "num_classes must be positive"),
            Self::FiltersNotInSet { block, filters } => {
                write!(f, "filters ∉ F (block {block}: {filters})")
            }
            Self::KernelNotInSet { block, kernel_size } => {
                write!(f, "kernel size ∉ K (block {block}: {kernel_size})")
            }
            Self::StrideNotInSet { block, stride } => {
                write!(f, "stride ∉ S (block {block}: {stride})")
            }
            Self::TooManyStride2 { count, max } => {
                write!(f, "stride-2 count > {max} (got {count})")
            }
            Self::InputTooSmall { min_side, reduction } => write!(
                f,
                "input side {min_side} cannot absorb a total stride reduction of {reduction}"
            ),
        }
    }
}

impl Genome {
    pub fn new(blocks: Vec<ConvBlockGene>, num_classes: usize) -> Self {
        Self {
            blocks,
            num_classes,
        }
    }

    pub fn blocks(&self) -> &[ConvBlockGene] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut Vec<ConvBlockGene> {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn stride2_count(&self) -> usize {
        self.blocks.iter().filter(|b| b.stride == 2).count()
    }

    /// Input channel count block `index` expects (image channels for block 0).
    pub fn input_channels(&self, index: usize, image_channels: usize) -> usize {
        if index == 0 {
            image_channels
        } else {
            self.blocks[index - 1].filters
        }
    }

    /// Width of the pooled feature vector feeding the dense head.
    pub fn head_inputs(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.filters)
    }

    /// Spatial size after every block, for an input of `h x w`.
    pub fn feature_map_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut sizes = Vec::with_capacity(self.blocks.len());
        let (mut h, mut w) = (h, w);
        for b in &self.blocks {
            h = h.div_ceil(b.stride);
            w = w.div_ceil(b.stride);
            sizes.push((h, w));
        }
        sizes
    }

    /// Architecture-only identity used by the novelty history.
    pub fn canonical_hash(&self) -> GenomeDigest {
        let mut hasher = Sha256::new();
        hasher.update(format!("classes={};", self.num_classes).as_bytes());
        for b in &self.blocks {
            hasher.update(format!("{},{},{};", b.filters, b.kernel_size, b.stride).as_bytes());
        }
        GenomeDigest(hasher.finalize().into())
    }

    pub fn validate(&self, cfg: &EAConfig) -> Result<(), Vec<Violation>> {
        self.validate_in(&cfg.space, cfg.image)
    }

    /// Every violated invariant, or `Ok` if there are none.
    pub fn validate_in(&self, space: &SearchSpace, image: ImageDims) -> Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        if self.blocks.is_empty() {
            v.push(Violation::NoBlocks);
        }
        if self.num_classes == 0 {
            v.push(Violation::NoClasses);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if !space.filters.contains(&b.filters) {
                v.push(Violation::FiltersNotInSet {
                    block: i,
                    filters: b.filters,
                });
            }
            if !space.kernel_sizes.contains(&b.kernel_size) {
                v.push(Violation::KernelNotInSet {
                    block: i,
                    kernel_size: b.kernel_size,
                });
            }
            if !space.strides.contains(&b.stride) {
                v.push(Violation::StrideNotInSet {
                    block: i,
                    stride: b.stride,
                });
            }
        }
        let count = self.stride2_count();
        if count > space.max_stride2 {
            v.push(Violation::TooManyStride2 {
                count,
                max: space.max_stride2,
            });
        }
        let reduction: usize = self.blocks.iter().map(|b| b.stride.max(1)).product();
        let min_side = image.height.min(image.width);
        if reduction > min_side {
            v.push(Violation::InputTooSmall {
                min_side,
                reduction,
            });
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }
}

impl fmt::Display for Genome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .blocks
            .iter()
            .map(|b| format!("{}x{}/{}", b.filters, b.kernel_size, b.stride))
            .collect();
        write!(f, "[{}] -> {}", parts.join(" "), self.num_classes)
    }
}

/// SHA-256 over the canonical block list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GenomeDigest(pub [u8; 32]);

impl fmt::Display for GenomeDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl FromStr for GenomeDigest {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || !s.is_ascii() {
            return Err(format!("expected 64 hex characters, got {s:?}"));
        }
        let mut out = [0u8; 32];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|e| e.to_string())?;
        }
        Ok(Self(out))
    }
}

impl Serialize for GenomeDigest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GenomeDigest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A genome with its weights and, once trained, its fitness.
#[derive(Clone, Debug)]
pub struct Individual {
    pub genome: Genome,
    pub weights: WeightStore,
    pub fitness: Option<f64>,
    pub id: u64,
    pub parent_id: Option<u64>,
}

impl Individual {
    pub fn digest(&self) -> GenomeDigest {
        self.genome.canonical_hash()
    }

    pub fn fitness_or_min(&self) -> f64 {
        self.fitness.unwrap_or(0.0)
    }
}

/// A one-block network with random filters and kernel size and stride one.
///
/// Genome draws come from `genome_rng`, weight draws from `weight_rng`.
pub fn random_initial_genome<G: Rng + ?Sized, W: Rng + ?Sized>(
    cfg: &EAConfig,
    id: u64,
    genome_rng: &mut G,
    weight_rng: &mut W,
) -> Individual {
    let genome = Genome::new(
        vec![ConvBlockGene::random(&cfg.space, genome_rng)],
        cfg.num_classes,
    );
    let weights = WeightStore::init(&genome, cfg.image.channels, weight_rng);
    Individual {
        genome,
        weights,
        fitness: None,
        id,
        parent_id: None,
    }
}
