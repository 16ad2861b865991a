//! The (1+1)-EA with probabilistic niching under a total-epoch budget.

use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::experiments::flops_estimate;
use crate::fitness::{self, evaluation_rng, FitnessError, TrainProtocol};
use crate::genome::{random_initial_genome, Checkpoint, GenomeDigest, ImageDims, Individual, SearchSpace};
use crate::mutation::{mutate_until_novel, History, MutationError, MutationKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EAConfig {
    /// Niching probability.
    pub eta: f64,
    /// Niching iterations.
    pub k: usize,
    /// Training epochs per fitness evaluation.
    pub epochs_per_eval: usize,
    /// Total training-epoch budget.
    pub epoch_budget: usize,
    pub space: SearchSpace,
    pub inheritance: bool,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub num_classes: usize,
    pub image: ImageDims,
}

impl Default for EAConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            k: 5,
            epochs_per_eval: 4,
            epoch_budget: 512,
            space: SearchSpace::default(),
            inheritance: true,
            batch_size: 512,
            learning_rate: 1e-3,
            checkpoint_interval: 128,
            seed: 0,
            num_classes: 10,
            image: ImageDims {
                height: 32,
                width: 32,
                channels: 3,
            },
        }
    }
}

impl EAConfig {
    pub fn check(&self) -> Result<(), EvolutionError> {
        let bad = |msg: String| Err(EvolutionError::Config(msg));
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta {} outside [0, 1]", self.eta));
        }
        if self.k == 0 || self.epochs_per_eval == 0 || self.epoch_budget == 0 {
            return bad("k, epochs_per_eval and epoch_budget must be positive".into());
        }
        if self.epochs_per_eval > self.epoch_budget {
            return bad("epochs_per_eval exceeds epoch_budget".into());
        }
        if !self.epoch_budget.is_multiple_of(self.epochs_per_eval) {
            return bad("epoch_budget must be a multiple of epochs_per_eval".into());
        }
        if self.batch_size == 0 || self.checkpoint_interval == 0 {
            return bad("batch_size and checkpoint_interval must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if self.num_classes == 0 || self.image.height == 0 || self.image.width == 0 || self.image.channels == 0 {
            return bad("num_classes and image dims must be positive".into());
        }
        self.space.check().map_err(EvolutionError::Config)
    }

    pub fn protocol(&self) -> TrainProtocol {
        TrainProtocol {
            epochs: self.epochs_per_eval,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid EA configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mutation(#[from] MutationError),
    #[error(transparent)]
    Fitness(#[from] FitnessError),
}

/// Produces fitness values. Implementations train the individual in place.
pub trait FitnessEvaluator {
    fn evaluate(&mut self, individual: &mut Individual, cfg: &EAConfig) -> Result<f64, FitnessError>;

    /// Training-set size, used for the per-evaluation FLOPS estimate.
    fn train_size(&self) -> usize {
        0
    }
}

/// Real training on a dataset.
pub struct TrainingEvaluator<'a> {
    pub data: &'a Dataset,
}

impl FitnessEvaluator for TrainingEvaluator<'_> {
    fn evaluate(&mut self, individual: &mut Individual, cfg: &EAConfig) -> Result<f64, FitnessError> {
        let mut rng = evaluation_rng(cfg.seed, individual.id);
        Ok(fitness::evaluate(individual, self.data, &cfg.protocol(), &mut rng)?.0)
    }

    fn train_size(&self) -> usize {
        self.data.train.len()
    }
}

/// Fitness from a closure; weights are left untouched.
pub struct FnEvaluator<F>(pub F);

impl<F: FnMut(&Individual) -> f64> FitnessEvaluator for FnEvaluator<F> {
    fn evaluate(&mut self, individual: &mut Individual, _cfg: &EAConfig) -> Result<f64, FitnessError> {
        let f = (self.0)(individual);
        individual.fitness = Some(f);
        Ok(f)
    }
}

/// The genome stream (mutations and niching draws) and the weight stream.
pub fn run_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut genome = ChaCha8Rng::seed_from_u64(seed);
    genome.set_stream(u64::MAX);
    let mut weight = ChaCha8Rng::seed_from_u64(seed);
    weight.set_stream(u64::MAX - 1);
    (genome, weight)
}

/// One evaluated network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub eval_index: u64,
    pub cumulative_epochs: u64,
    /// `None` for the initial network.
    pub mutation_kind: Option<MutationKind>,
    /// 0 in the main loop, 1 inside a niche.
    pub niche_depth: u8,
    pub parent_fitness: Option<f64>,
    pub child_fitness: f64,
    /// Child replaced its (main or niche) parent.
    pub accepted: bool,
    pub block_count: usize,
    pub flops_estimate: f64,
    pub genome_digest: GenomeDigest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NicheTrace {
    pub children: Vec<u64>,
    pub best_id: u64,
    pub best_fitness: f64,
    pub accepted: bool,
}

/// One main-loop iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub child_id: u64,
    pub child_fitness: f64,
    pub accepted: bool,
    pub niche: Option<NicheTrace>,
    pub parent_id_after: u64,
    pub parent_fitness_after: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EvalRecord>,
    pub steps: Vec<Step>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    eval_index: u64,
    cumulative_epochs: u64,
    mutation_kind: String,
    niche_depth: u8,
    parent_fitness: Option<f64>,
    child_fitness: f64,
    accepted: bool,
    block_count: usize,
    flops_estimate: f64,
    genome_digest: GenomeDigest,
}

pub const INITIAL_KIND: &str = "initial";

impl RunLog {
    pub fn final_epochs(&self) -> u64 {
        self.records.last().map_or(0, |r| r.cumulative_epochs)
    }

    pub fn total_flops(&self) -> f64 {
        self.records.iter().map(|r| r.flops_estimate).sum()
    }

    pub fn write_csv<W: io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(CsvRow {
                eval_index: r.eval_index,
                cumulative_epochs: r.cumulative_epochs,
                mutation_kind: r.mutation_kind.map_or(INITIAL_KIND.to_string(), |k| k.to_string()),
                niche_depth: r.niche_depth,
                parent_fitness: r.parent_fitness,
                child_fitness: r.child_fitness,
                accepted: r.accepted,
                block_count: r.block_count,
                flops_estimate: r.flops_estimate,
                genome_digest: r.genome_digest,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the evaluation records back; the step trace is not stored in CSV.
    pub fn read_csv<R: io::Read>(input: R) -> Result<Self, csv::Error> {
        let mut records = Vec::new();
        for row in csv::Reader::from_reader(input).deserialize() {
            let row: CsvRow = row?;
            let mutation_kind = if row.mutation_kind == INITIAL_KIND {
                None
            } else {
                Some(row.mutation_kind.parse().map_err(|e: String| {
                    csv::Error::from(io::Error::new(io::ErrorKind::InvalidData, e))
                })?)
            };
            records.push(EvalRecord {
                eval_index: row.eval_index,
                cumulative_epochs: row.cumulative_epochs,
                mutation_kind,
                niche_depth: row.niche_depth,
                parent_fitness: row.parent_fitness,
                child_fitness: row.child_fitness,
                accepted: row.accepted,
                block_count: row.block_count,
                flops_estimate: row.flops_estimate,
                genome_digest: row.genome_digest,
            });
        }
        Ok(Self {
            records,
            steps: Vec::new(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// The final parent.
    pub best: Individual,
    pub log: RunLog,
    pub checkpoints: Vec<Checkpoint>,
    /// Checkpoint writes that failed; the run carried on.
    pub checkpoint_errors: Vec<String>,
}

/// Where checkpoint `tag` of a run is written.
pub fn checkpoint_path(dir: &Path, tag: u64) -> PathBuf {
    dir.join(format!("checkpoint_{tag:06}.lmk"))
}

struct Driver<'a, E: ?Sized> {
    cfg: &'a EAConfig,
    evaluator: &'a mut E,
    genome_rng: ChaCha8Rng,
    weight_rng: ChaCha8Rng,
    history: History,
    log: RunLog,
    cumulative: u64,
    next_id: u64,
    next_tag: u64,
    checkpoint_dir: Option<&'a Path>,
    checkpoints: Vec<Checkpoint>,
    checkpoint_errors: Vec<String>,
    batches_per_epoch: usize,
}

impl<E: FitnessEvaluator + ?Sized> Driver<'_, E> {
    fn evaluate(
        &mut self,
        ind: &mut Individual,
        kind: Option<MutationKind>,
        parent_fitness: Option<f64>,
        niche_depth: u8,
    ) -> Result<f64, EvolutionError> {
        let fitness = match self.evaluator.evaluate(ind, self.cfg) {
            Ok(f) => f,
            Err(FitnessError::Diverged { epoch }) => {
                log::warn!("individual {} diverged in epoch {epoch}; fitness set to 0", ind.id);
                0.0
            }
            Err(e) => return Err(e.into()),
        };
        ind.fitness = Some(fitness);
        self.cumulative += self.cfg.epochs_per_eval as u64;
        self.history.insert(ind.digest());
        let accepted = parent_fitness.is_none_or(|p| fitness > p);
        self.log.records.push(EvalRecord {
            eval_index: ind.id,
            cumulative_epochs: self.cumulative,
            mutation_kind: kind,
            niche_depth,
            parent_fitness,
            child_fitness: fitness,
            accepted,
            block_count: ind.genome.len(),
            flops_estimate: flops_estimate(
                &ind.genome,
                self.cfg.image,
                self.cfg.epochs_per_eval,
                self.batches_per_epoch,
                self.cfg.batch_size,
            ),
            genome_digest: ind.digest(),
        });
        log::info!(
            "eval {} epochs {} depth {niche_depth} fitness {fitness:.4} blocks {} {}",
            ind.id,
            self.cumulative,
            ind.genome.len(),
            if accepted { "accepted" } else { "rejected" }
        );
        Ok(fitness)
    }

    fn mutate(&mut self, parent: &Individual) -> Result<(Individual, MutationKind), EvolutionError> {
        let id = self.next_id;
        self.next_id += 1;
        let off = mutate_until_novel(
            parent,
            &self.history,
            self.cfg,
            id,
            &mut self.genome_rng,
            &mut self.weight_rng,
        )?;
        Ok((off.child, off.edit.kind()))
    }

    fn save_checkpoint(&mut self, parent: &Individual, tag: u64) {
        let ckpt = Checkpoint {
            individual: parent.clone(),
            in_channels: self.cfg.image.channels,
            cumulative_epochs: tag,
        };
        if let Some(dir) = self.checkpoint_dir {
            let path = checkpoint_path(dir, tag);
            if let Err(e) = ckpt.save(&path) {
                log::error!("checkpoint {} failed: {e}", path.display());
                self.checkpoint_errors.push(format!("{}: {e}", path.display()));
            }
        }
        self.checkpoints.push(ckpt);
    }

    /// Saves `parent` for every interval multiple reached since the last call.
    fn maybe_checkpoint(&mut self, parent: &Individual) {
        while self.cumulative >= self.next_tag {
            let tag = self.next_tag;
            self.save_checkpoint(parent, tag);
            self.next_tag += self.cfg.checkpoint_interval as u64;
        }
    }

    /// `k` greedy mutate-evaluate-select iterations starting from `seed`,
    /// without further niching. Returns the best individual encountered.
    fn niche(&mut self, seed: Individual, main_parent: &Individual) -> Result<(Individual, Vec<u64>), EvolutionError> {
        let mut parent = seed;
        let mut children = Vec::with_capacity(self.cfg.k);
        for _ in 0..self.cfg.k {
            let pf = parent.fitness_or_min();
            let (mut child, kind) = self.mutate(&parent)?;
            let cf = self.evaluate(&mut child, Some(kind), Some(pf), 1)?;
            children.push(child.id);
            if cf > pf {
                parent = child;
            } else {
                // The niching draw precedes the "not yet niching" test, so a
                // rejection still consumes it; its value is irrelevant here.
                let _: f64 = self.genome_rng.random();
            }
            self.maybe_checkpoint(main_parent);
        }
        Ok((parent, children))
    }

    fn run(mut self) -> Result<RunOutcome, EvolutionError> {
        let mut a = random_initial_genome(self.cfg, 0, &mut self.genome_rng, &mut self.weight_rng);
        self.next_id = 1;
        self.evaluate(&mut a, None, None, 0)?;
        self.maybe_checkpoint(&a);
        let budget = self.cfg.epoch_budget as u64;
        while self.cumulative < budget {
            let fa = a.fitness_or_min();
            let (mut b, kind) = self.mutate(&a)?;
            let fb = self.evaluate(&mut b, Some(kind), Some(fa), 0)?;
            let child_id = b.id;
            let mut niche = None;
            let accepted = fb > fa;
            if accepted {
                a = b;
            } else if self.genome_rng.random::<f64>() < self.cfg.eta {
                // The niche's evaluations may cross checkpoint tags; those
                // checkpoints hold the main parent, not the niche parent.
                self.maybe_checkpoint(&a);
                let (c, children) = self.niche(b, &a)?;
                let fc = c.fitness_or_min();
                let niche_accepted = fc > fa;
                niche = Some(NicheTrace {
                    children,
                    best_id: c.id,
                    best_fitness: fc,
                    accepted: niche_accepted,
                });
                if niche_accepted {
                    a = c;
                }
            }
            self.log.steps.push(Step {
                child_id,
                child_fitness: fb,
                accepted,
                niche,
                parent_id_after: a.id,
                parent_fitness_after: a.fitness_or_min(),
            });
            self.maybe_checkpoint(&a);
        }
        if self.checkpoints.last().is_none_or(|c| c.cumulative_epochs < budget) {
            let tag = self.cumulative;
            self.save_checkpoint(&a, tag);
        }
        Ok(RunOutcome {
            best: a,
            log: self.log,
            checkpoints: self.checkpoints,
            checkpoint_errors: self.checkpoint_errors,
        })
    }
}

/// Runs the EA until the cumulative epoch count reaches the budget.
///
/// A niche excursion started under budget runs to completion, so the final
/// count lies in `[n, n + k*e]`. Checkpoints of the current parent are taken
/// at every multiple of the checkpoint interval, plus one at termination if
/// no tag reached the budget. With `checkpoint_dir` they are also written to
/// disk; write failures are logged and reported, not fatal.
pub fn run_ea<E: FitnessEvaluator + ?Sized>(
    cfg: &EAConfig,
    evaluator: &mut E,
    checkpoint_dir: Option<&Path>,
) -> Result<RunOutcome, EvolutionError> {
    cfg.check()?;
    let (genome_rng, weight_rng) = run_rngs(cfg.seed);
    let train = evaluator.train_size();
    let batches_per_epoch = if train == 0 { 1 } else { train.div_ceil(cfg.batch_size) };
    Driver {
        cfg,
        evaluator,
        genome_rng,
        weight_rng,
        history: History::new(),
        log: RunLog::default(),
        cumulative: 0,
        next_id: 0,
        next_tag: cfg.checkpoint_interval as u64,
        checkpoint_dir,
        checkpoints: Vec::new(),
        checkpoint_errors: Vec::new(),
        batches_per_epoch,
    }
    .run()
}
