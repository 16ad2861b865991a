use rand::Rng;

use super::{ConvBlockGene, Genome, GenomeError};
use crate::tensor::{glorot_uniform, Tensor};

/// Conv kernel plus batch-norm parameters and running statistics of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    /// `[k, k, Cin, F]`
    pub kernel: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BlockWeights {
    /// Glorot kernel (fan_in = k*k*Cin, fan_out = k*k*F) and identity batch norm.
    pub fn init<R: Rng + ?Sized>(gene: &ConvBlockGene, in_channels: usize, rng: &mut R) -> Self {
        let k = gene.kernel_size;
        let f = gene.filters;
        let kernel = glorot_uniform(&[k, k, in_channels, f], k * k * in_channels, k * k * f, rng)
            .expect("gene dimensions are positive");
        Self {
            kernel,
            gamma: Tensor::full(&[f], 1.0),
            beta: Tensor::zeros(&[f]),
            running_mean: Tensor::zeros(&[f]),
            running_var: Tensor::full(&[f], 1.0),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [
            &self.kernel,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.kernel,
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    fn expected_shape(gene: &ConvBlockGene, in_channels: usize) -> [usize; 4] {
        [gene.kernel_size, gene.kernel_size, in_channels, gene.filters]
    }
}

/// Learned parameters of a whole network, keyed by block position.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightStore {
    pub blocks: Vec<BlockWeights>,
    /// `[F_last, classes]`
    pub head_weights: Tensor,
    pub head_bias: Tensor,
}

impl WeightStore {
    pub fn init<R: Rng + ?Sized>(genome: &Genome, in_channels: usize, rng: &mut R) -> Self {
        let blocks = genome
            .blocks()
            .iter()
            .enumerate()
            .map(|(i, gene)| BlockWeights::init(gene, genome.input_channels(i, in_channels), rng))
            .collect();
        let (head_weights, head_bias) = init_head(genome.head_inputs(), genome.num_classes(), rng);
        Self {
            blocks,
            head_weights,
            head_bias,
        }
    }

    /// Every tensor shape must be exactly what the genome implies.
    pub fn check_consistency(&self, genome: &Genome, in_channels: usize) -> Result<(), GenomeError> {
        if self.blocks.len() != genome.len() {
            return Err(GenomeError::InconsistentWeights(format!(
                "{} weight blocks for {} genes",
                self.blocks.len(),
                genome.len()
            )));
        }
        for (i, (w, gene)) in self.blocks.iter().zip(genome.blocks()).enumerate() {
            let want = BlockWeights::expected_shape(gene, genome.input_channels(i, in_channels));
            if w.kernel.shape() != want {
                return Err(GenomeError::InconsistentWeights(format!(
                    "block {i} kernel {:?}, expected {want:?}",
                    w.kernel.shape()
                )));
            }
            for t in &w.tensors()[1..] {
                if t.shape() != [gene.filters] {
                    return Err(GenomeError::InconsistentWeights(format!(
                        "block {i} batch-norm tensor {:?}, expected [{}]",
                        t.shape(),
                        gene.filters
                    )));
                }
            }
        }
        let head = [genome.head_inputs(), genome.num_classes()];
        if self.head_weights.shape() != head || self.head_bias.shape() != [genome.num_classes()] {
            return Err(GenomeError::InconsistentWeights(format!(
                "head {:?}/{:?}, expected {head:?}",
                self.head_weights.shape(),
                self.head_bias.shape()
            )));
        }
        Ok(())
    }

    /// Trainable tensors in optimizer order: per block kernel, gamma, beta;
    /// then head weights and bias.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.blocks.len() * 3 + 2);
        for b in &mut self.blocks {
            out.push(&mut b.kernel);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out.push(&mut self.head_weights);
        out.push(&mut self.head_bias);
        out
    }

    pub fn trainable_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.blocks.len() * 3 + 2);
        for b in &self.blocks {
            out.push(b.kernel.shape().to_vec());
            out.push(b.gamma.shape().to_vec());
            out.push(b.beta.shape().to_vec());
        }
        out.push(self.head_weights.shape().to_vec());
        out.push(self.head_bias.shape().to_vec());
        out
    }

    /// All tensors (including running statistics) in serialization order.
    pub fn all_tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.blocks.iter().flat_map(|b| b.tensors()).collect();
        out.push(&self.head_weights);
        out.push(&self.head_bias);
        out
    }

    pub fn all_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> =
            self.blocks.iter_mut().flat_map(|b| b.tensors_mut()).collect();
        out.push(&mut self.head_weights);
        out.push(&mut self.head_bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.all_tensors().iter().map(|t| t.len()).sum()
    }
}

/// Glorot head weights (fan_in = F_last, fan_out = classes) and zero bias.
pub(crate) fn init_head<R: Rng + ?Sized>(inputs: usize, classes: usize, rng: &mut R) -> (Tensor, Tensor) {
    let w = if inputs == 0 || classes == 0 {
        Tensor::zeros(&[inputs, classes])
    } else {
        glorot_uniform(&[inputs, classes], inputs, classes, rng).expect("positive head dims")
    };
    (w, Tensor::zeros(&[classes]))
}
