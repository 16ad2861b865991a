//! Training for a fixed number of epochs and validation-accuracy fitness.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, Split};
use crate::genome::{backward, forward_train, predict, Genome, GenomeError, Individual, WeightStore};
use crate::tensor::{softmax_xent, AdamConfig, AdamState, EngineError};

#[derive(Debug, Error)]
pub enum FitnessError {
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Model(#[from] GenomeError),
}

impl From<EngineError> for FitnessError {
    fn from(e: EngineError) -> Self {
        Self::Model(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProtocol {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainProtocol {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 512,
            learning_rate: 1e-3,
        }
    }
}

impl TrainProtocol {
    fn check(&self) -> Result<(), FitnessError> {
        if self.batch_size == 0 {
            return Err(FitnessError::Protocol("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FitnessError::Protocol("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: `(last_epoch, lr)` stages, 1-based epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSchedule {
    pub stages: Vec<(usize, f64)>,
}

impl Default for FinetuneSchedule {
    fn default() -> Self {
        Self {
            stages: vec![(10, 1e-3), (20, 1e-4), (30, 1e-5)],
        }
    }
}

impl FinetuneSchedule {
    pub fn total_epochs(&self) -> usize {
        self.stages.last().map_or(0, |s| s.0)
    }

    /// Learning rate for 1-based `epoch`, or `None` past the last stage.
    pub fn lr_at(&self, epoch: usize) -> Option<f64> {
        self.stages.iter().find(|s| epoch <= s.0).map(|s| s.1)
    }
}

/// Per-evaluation shuffle stream derived from the run seed and the
/// individual's id.
pub fn evaluation_rng(run_seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(id.wrapping_add(1));
    rng
}

/// One epoch's minibatches of example indices. The trailing partial batch is
/// kept.
pub fn shuffle_and_batch<R: Rng + ?Sized>(len: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Trains in place for `epochs` epochs with a fresh Adam state; `lr_for`
/// maps the 1-based epoch to its learning rate.
pub fn train<R: Rng + ?Sized>(
    genome: &Genome,
    weights: &mut WeightStore,
    split: &Split,
    epochs: usize,
    batch_size: usize,
    lr_for: impl Fn(usize) -> f64,
    rng: &mut R,
) -> Result<(), FitnessError> {
    if epochs == 0 {
        return Ok(());
    }
    if split.is_empty() {
        return Err(FitnessError::EmptySplit("train"));
    }
    let shapes = weights.trainable_shapes();
    let mut adam: AdamState<f32> = AdamState::new(shapes.iter().map(Vec::as_slice), AdamConfig::with_lr(lr_for(1)));
    for epoch in 1..=epochs {
        adam.set_lr(lr_for(epoch));
        let mut batches = shuffle_and_batch(split.len(), batch_size, rng);
        // A lone trailing example can leave batch norm with a single value
        // per channel; fold it into the previous batch.
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let tail = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(tail);
        }
        for rows in batches {
            let images = split.images().gather_outer(&rows);
            let labels: Vec<usize> = rows.iter().map(|&i| split.labels()[i]).collect();
            let (logits, tape) = forward_train(genome, weights, &images)?;
            let (loss, d_logits) = softmax_xent(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(FitnessError::Diverged { epoch });
            }
            let grads = backward(genome, weights, tape, &d_logits)?;
            adam.step(&mut weights.trainable_mut(), &grads.refs()).map_err(|e| match e {
                EngineError::NonFinite { .. } => FitnessError::Diverged { epoch },
                other => other.into(),
            })?;
        }
    }
    if weights.all_tensors().iter().any(|t| t.check_finite("train").is_err()) {
        return Err(FitnessError::Diverged { epoch: epochs });
    }
    Ok(())
}

/// Infer-mode accuracy on `split`, in chunks of `chunk` examples.
pub fn accuracy(genome: &Genome, weights: &WeightStore, split: &Split, chunk: usize) -> Result<f64, FitnessError> {
    if split.is_empty() {
        return Err(FitnessError::EmptySplit("evaluation"));
    }
    let predicted = predict(genome, weights, split.images(), chunk)?;
    let correct = predicted.iter().zip(split.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / split.len() as f64)
}

/// Trains `individual` for `proto.epochs` epochs on the training split and
/// sets its fitness to the validation accuracy. Returns
/// `(fitness, epochs_consumed)`.
pub fn evaluate<R: Rng + ?Sized>(
    individual: &mut Individual,
    data: &Dataset,
    proto: &TrainProtocol,
    rng: &mut R,
) -> Result<(f64, usize), FitnessError> {
    proto.check()?;
    train(
        &individual.genome,
        &mut individual.weights,
        &data.train,
        proto.epochs,
        proto.batch_size,
        |_| proto.learning_rate,
        rng,
    )?;
    let fitness = accuracy(&individual.genome, &individual.weights, &data.val, proto.batch_size)?;
    individual.fitness = Some(fitness);
    Ok((fitness, proto.epochs))
}

/// Trains under the fine-tuning schedule and returns test accuracy.
pub fn train_to_completion<R: Rng + ?Sized>(
    individual: &mut Individual,
    data: &Dataset,
    schedule: &FinetuneSchedule,
    batch_size: usize,
    rng: &mut R,
) -> Result<f64, FitnessError> {
    if batch_size == 0 {
        return Err(FitnessError::Protocol("batch_size must be positive".into()));
    }
    let lr = |epoch| schedule.lr_at(epoch).expect("epoch within schedule");
    train(
        &individual.genome,
        &mut individual.weights,
        &data.train,
        schedule.total_epochs(),
        batch_size,
        lr,
        rng,
    )?;
    accuracy(&individual.genome, &individual.weights, &data.test, batch_size)
}
