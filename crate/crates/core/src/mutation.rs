//! Mutation operators, Lamarckian weight inheritance and novelty forcing.
//!
//! Genome edits draw only from the genome stream; weight (re)initialization
//! draws only from the weight stream. With a fixed seed the sequence of
//! proposed genomes is therefore identical whether or not weights are
//! inherited.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evolution::EAConfig;
use crate::genome::{
    BlockWeights, ConvBlockGene, Genome, GenomeDigest, Individual, SearchSpace, WeightStore,
};

/// Upper bound on proposals per [`mutate_until_novel`] call.
pub const MAX_PROPOSALS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationKind {
    AddBlock,
    RemoveBlock,
    AddFilters,
    RemoveFilters,
    ChangeKernelSize,
    ChangeStride,
}

impl MutationKind {
    pub const ALL: [Self; 6] = [
        Self::AddBlock,
        Self::RemoveBlock,
        Self::AddFilters,
        Self::RemoveFilters,
        Self::ChangeKernelSize,
        Self::ChangeStride,
    ];

    pub const fn relative_frequency(self) -> u32 {
        match self {
            Self::AddBlock | Self::RemoveBlock => 3,
            Self::AddFilters | Self::RemoveFilters | Self::ChangeKernelSize => 2,
            Self::ChangeStride => 1,
        }
    }

    pub fn probability(self) -> f64 {
        let total: u32 = Self::ALL.iter().map(|k| k.relative_frequency()).sum();
        f64::from(self.relative_frequency()) / f64::from(total)
    }

    pub const fn name(self) -> &'static str {
        match self {
            Self::AddBlock => "add_block",
            Self::RemoveBlock => "remove_block",
            Self::AddFilters => "add_filters",
            Self::RemoveFilters => "remove_filters",
            Self::ChangeKernelSize => "change_kernel_size",
            Self::ChangeStride => "change_stride",
        }
    }
}

impl fmt::Display for MutationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MutationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown mutation kind {s:?}"))
    }
}

/// Draws a mutation kind with probabilities proportional to 3:3:2:2:2:1.
pub fn sample_mutation<R: Rng + ?Sized>(rng: &mut R) -> MutationKind {
    let total: u32 = MutationKind::ALL.iter().map(|k| k.relative_frequency()).sum();
    let mut draw = rng.random_range(0..total);
    for kind in MutationKind::ALL {
        let w = kind.relative_frequency();
        if draw < w {
            return kind;
        }
        draw -= w;
    }
    unreachable!("draw is below the total weight")
}

/// Where an operator changed the genome. Indices refer to the child for
/// `AddBlock` and to the parent for `RemoveBlock`; the other edits keep
/// positions fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edit {
    AddBlock { index: usize },
    RemoveBlock { index: usize },
    AddFilters { index: usize },
    RemoveFilters { index: usize },
    ChangeKernelSize { index: usize },
    ChangeStride { index: usize },
}

impl Edit {
    pub fn kind(self) -> MutationKind {
        match self {
            Self::AddBlock { .. } => MutationKind::AddBlock,
            Self::RemoveBlock { .. } => MutationKind::RemoveBlock,
            Self::AddFilters { .. } => MutationKind::AddFilters,
            Self::RemoveFilters { .. } => MutationKind::RemoveFilters,
            Self::ChangeKernelSize { .. } => MutationKind::ChangeKernelSize,
            Self::ChangeStride { .. } => MutationKind::ChangeStride,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Self::AddBlock { index }
            | Self::RemoveBlock { index }
            | Self::AddFilters { index }
            | Self::RemoveFilters { index }
            | Self::ChangeKernelSize { index }
            | Self::ChangeStride { index } => index,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MutationError {
    #[error("{kind} is not applicable: {reason}")]
    Inapplicable {
        kind: MutationKind,
        reason: &'static str,
    },
    #[error("edit does not describe the parent/child pair: {0}")]
    InvalidEdit(String),
    #[error("no novel, valid child found in {0} proposals")]
    SearchExhausted(usize),
}

/// Applies one operator to a genome, without touching weights.
pub fn propose<R: Rng + ?Sized>(
    kind: MutationKind,
    genome: &Genome,
    space: &SearchSpace,
    rng: &mut R,
) -> Result<(Genome, Edit), MutationError> {
    let mut child = genome.clone();
    let len = genome.len();
    let inapplicable = |reason| MutationError::Inapplicable { kind, reason };
    if len == 0 {
        return Err(inapplicable("genome has no blocks"));
    }
    let edit = match kind {
        MutationKind::AddBlock => {
            let index = rng.random_range(0..=len);
            let gene = ConvBlockGene::random(space, rng);
            child.blocks_mut().insert(index, gene);
            Edit::AddBlock { index }
        }
        MutationKind::RemoveBlock => {
            if len == 1 {
                return Err(inapplicable("cannot remove the only block"));
            }
            let index = rng.random_range(0..len);
            child.blocks_mut().remove(index);
            Edit::RemoveBlock { index }
        }
        MutationKind::AddFilters => {
            let index = rng.random_range(0..len);
            let block = &mut child.blocks_mut()[index];
            block.filters = space
                .next_filters(block.filters)
                .ok_or_else(|| inapplicable("filter count already at the maximum"))?;
            Edit::AddFilters { index }
        }
        MutationKind::RemoveFilters => {
            let index = rng.random_range(0..len);
            let block = &mut child.blocks_mut()[index];
            block.filters = space
                .prev_filters(block.filters)
                .ok_or_else(|| inapplicable("filter count already at the minimum"))?;
            Edit::RemoveFilters { index }
        }
        MutationKind::ChangeKernelSize => {
            let index = rng.random_range(0..len);
            child.blocks_mut()[index].kernel_size =
                *space.kernel_sizes.choose(rng).expect("non-empty kernel set");
            Edit::ChangeKernelSize { index }
        }
        MutationKind::ChangeStride => {
            let index = rng.random_range(0..len);
            child.blocks_mut()[index].stride = *space.strides.choose(rng).expect("non-empty stride set");
            Edit::ChangeStride { index }
        }
    };
    Ok((child, edit))
}

fn check_edit(parent: &Genome, child: &Genome, edit: Edit) -> Result<(), MutationError> {
    let bad = |msg: String| Err(MutationError::InvalidEdit(msg));
    if parent.num_classes() != child.num_classes() {
        return bad("class count changed".into());
    }
    let (p, c) = (parent.blocks(), child.blocks());
    let i = edit.index();
    match edit {
        Edit::AddBlock { index } => {
            if c.len() != p.len() + 1 || index >= c.len() {
                return bad(format!("add at {index}: {} -> {} blocks", p.len(), c.len()));
            }
            if c[..index] != p[..index] || c[index + 1..] != p[index..] {
                return bad(format!("add at {index}: other blocks differ"));
            }
        }
        Edit::RemoveBlock { index } => {
            if p.len() != c.len() + 1 || index >= p.len() {
                return bad(format!("remove at {index}: {} -> {} blocks", p.len(), c.len()));
            }
            if p[..index] != c[..index] || p[index + 1..] != c[index..] {
                return bad(format!("remove at {index}: other blocks differ"));
            }
        }
        _ => {
            if p.len() != c.len() || i >= p.len() {
                return bad(format!("edit at {i}: {} -> {} blocks", p.len(), c.len()));
            }
            if p.iter().zip(c).enumerate().any(|(j, (a, b))| j != i && a != b) {
                return bad(format!("edit at {i}: other blocks differ"));
            }
            let (a, b) = (p[i], c[i]);
            let ok = match edit {
                Edit::AddFilters { .. } => b.filters > a.filters && a.with_filters(b.filters) == b,
                Edit::RemoveFilters { .. } => b.filters < a.filters && a.with_filters(b.filters) == b,
                Edit::ChangeKernelSize { .. } => a.filters == b.filters && a.stride == b.stride,
                Edit::ChangeStride { .. } => a.filters == b.filters && a.kernel_size == b.kernel_size,
                _ => unreachable!(),
            };
            if !ok {
                return bad(format!("block {i} change {a:?} -> {b:?} does not match {edit:?}"));
            }
        }
    }
    Ok(())
}

impl ConvBlockGene {
    fn with_filters(self, filters: usize) -> Self {
        Self { filters, ..self }
    }
}

/// Carries the parent's learned tensors into the child wherever shapes allow.
///
/// * `ChangeStride`: everything is kept.
/// * `ChangeKernelSize`: only the mutated block is reinitialized.
/// * block and filter edits: the new or mutated block is (re)initialized, and
///   the following block (or the dense head after the last block) is
///   reinitialized iff its input channel count changed.
///
/// Batch-norm running statistics travel with their block.
pub fn inherit_weights<R: Rng + ?Sized>(
    parent_genome: &Genome,
    parent_weights: &WeightStore,
    child_genome: &Genome,
    edit: Edit,
    in_channels: usize,
    rng: &mut R,
) -> Result<WeightStore, MutationError> {
    check_edit(parent_genome, child_genome, edit)?;
    parent_weights
        .check_consistency(parent_genome, in_channels)
        .map_err(|e| MutationError::InvalidEdit(e.to_string()))?;

    let mut store = parent_weights.clone();
    let fresh = |j: usize, rng: &mut R| {
        BlockWeights::init(
            &child_genome.blocks()[j],
            child_genome.input_channels(j, in_channels),
            rng,
        )
    };
    let following = match edit {
        Edit::ChangeStride { .. } => None,
        Edit::ChangeKernelSize { index } => {
            store.blocks[index] = fresh(index, rng);
            None
        }
        Edit::AddFilters { index } | Edit::RemoveFilters { index } => {
            store.blocks[index] = fresh(index, rng);
            Some(index + 1)
        }
        Edit::AddBlock { index } => {
            let block = fresh(index, rng);
            store.blocks.insert(index, block);
            Some(index + 1)
        }
        Edit::RemoveBlock { index } => {
            store.blocks.remove(index);
            Some(index)
        }
    };
    if let Some(j) = following {
        if j < child_genome.len() {
            if store.blocks[j].in_channels() != child_genome.input_channels(j, in_channels) {
                store.blocks[j] = fresh(j, rng);
            }
        } else if store.head_weights.shape()[0] != child_genome.head_inputs() {
            let (w, b) = crate::genome::init_head(child_genome.head_inputs(), child_genome.num_classes(), rng);
            store.head_weights = w;
            store.head_bias = b;
        }
    }
    debug_assert!(store.check_consistency(child_genome, in_channels).is_ok());
    Ok(store)
}

/// Digests of every genome evaluated so far in one run. Append-only.
#[derive(Clone, Debug, Default)]
pub struct History {
    seen: HashSet<GenomeDigest>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `false` if the digest was already present.
    pub fn insert(&mut self, digest: GenomeDigest) -> bool {
        self.seen.insert(digest)
    }

    pub fn contains(&self, digest: &GenomeDigest) -> bool {
        self.seen.contains(digest)
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    /// Digests in sorted order, for deterministic serialization.
    pub fn sorted(&self) -> Vec<GenomeDigest> {
        let mut v: Vec<_> = self.seen.iter().copied().collect();
        v.sort();
        v
    }
}

impl FromIterator<GenomeDigest> for History {
    fn from_iter<I: IntoIterator<Item = GenomeDigest>>(iter: I) -> Self {
        Self {
            seen: iter.into_iter().collect(),
        }
    }
}

/// A freshly mutated, not yet evaluated child.
#[derive(Clone, Debug)]
pub struct Offspring {
    pub child: Individual,
    pub edit: Edit,
    /// Proposals drawn, including rejected ones.
    pub proposals: usize,
}

/// Builds the child's weights for an accepted genome edit: inherited when
/// `cfg.inheritance` is on, freshly initialized otherwise.
fn child_weights<W: Rng + ?Sized>(
    parent: &Individual,
    genome: &Genome,
    edit: Edit,
    cfg: &EAConfig,
    weight_rng: &mut W,
) -> Result<WeightStore, MutationError> {
    if cfg.inheritance {
        inherit_weights(
            &parent.genome,
            &parent.weights,
            genome,
            edit,
            cfg.image.channels,
            weight_rng,
        )
    } else {
        Ok(WeightStore::init(genome, cfg.image.channels, weight_rng))
    }
}

/// Applies one operator of the given kind to `parent`.
pub fn apply_mutation<G: Rng + ?Sized, W: Rng + ?Sized>(
    kind: MutationKind,
    parent: &Individual,
    cfg: &EAConfig,
    child_id: u64,
    genome_rng: &mut G,
    weight_rng: &mut W,
) -> Result<(Individual, Edit), MutationError> {
    let (genome, edit) = propose(kind, &parent.genome, &cfg.space, genome_rng)?;
    let weights = child_weights(parent, &genome, edit, cfg, weight_rng)?;
    Ok((
        Individual {
            genome,
            weights,
            fitness: None,
            id: child_id,
            parent_id: Some(parent.id),
        },
        edit,
    ))
}

/// Mutates `parent` until the child is valid and absent from `history`.
///
/// Inapplicable operators, invalid genomes and already-evaluated genomes are
/// all resampled; weights are built only for the accepted proposal.
pub fn mutate_until_novel<G: Rng + ?Sized, W: Rng + ?Sized>(
    parent: &Individual,
    history: &History,
    cfg: &EAConfig,
    child_id: u64,
    genome_rng: &mut G,
    weight_rng: &mut W,
) -> Result<Offspring, MutationError> {
    for proposals in 1..=MAX_PROPOSALS {
        let kind = sample_mutation(genome_rng);
        let (genome, edit) = match propose(kind, &parent.genome, &cfg.space, genome_rng) {
            Ok(p) => p,
            Err(MutationError::Inapplicable { .. }) => continue,
            Err(e) => return Err(e),
        };
        if genome.validate(cfg).is_err() || history.contains(&genome.canonical_hash()) {
            continue;
        }
        let weights = child_weights(parent, &genome, edit, cfg, weight_rng)?;
        return Ok(Offspring {
            child: Individual {
                genome,
                weights,
                fitness: None,
                id: child_id,
                parent_id: Some(parent.id),
            },
            edit,
            proposals,
        });
    }
    Err(MutationError::SearchExhausted(MAX_PROPOSALS))
}
