use super::{Genome, GenomeError, Individual, WeightStore};
use crate::tensor::{
    batchnorm, batchnorm_grad, batchnorm_train_inplace, conv2d, conv2d_grad,
    conv2d_grad_kernel_only, dense, dense_grad, gap, gap_grad, relu_inplace, BatchNormCache,
    Mode, Tensor,
};

struct BlockTape {
    cache: BatchNormCache<f32>,
    /// Post-ReLU activation, which is also the next block's input.
    output: Tensor,
}

/// Activations recorded by [`forward_train`] for [`backward`].
pub struct Tape {
    input: Tensor,
    blocks: Vec<BlockTape>,
    pooled: Tensor,
}

/// Gradients of the trainable tensors, in the same order as
/// [`WeightStore::trainable_mut`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn refs(&self) -> Vec<&Tensor> {
        self.tensors.iter().collect()
    }
}

fn check(genome: &Genome, weights: &WeightStore, batch: &Tensor) -> Result<(), GenomeError> {
    let [_, _, _, c] = batch.dims4("forward")?;
    if let Some(first) = weights.blocks.first() {
        if first.in_channels() != c {
            return Err(GenomeError::InputChannels {
                expected: first.in_channels(),
                got: c,
            });
        }
    }
    weights.check_consistency(genome, c)
}

/// Train-mode forward pass; updates batch-norm running statistics.
pub fn forward_train(
    genome: &Genome,
    weights: &mut WeightStore,
    batch: &Tensor,
) -> Result<(Tensor, Tape), GenomeError> {
    check(genome, weights, batch)?;
    let mut blocks: Vec<BlockTape> = Vec::with_capacity(genome.len());
    for (gene, w) in genome.blocks().iter().zip(weights.blocks.iter_mut()) {
        let input = blocks.last().map_or(batch, |b| &b.output);
        let z = conv2d(input, &w.kernel, gene.stride)?;
        let (mut y, cache) =
            batchnorm_train_inplace(z, &w.gamma, &w.beta, &mut w.running_mean, &mut w.running_var)?;
        relu_inplace(&mut y);
        blocks.push(BlockTape { cache, output: y });
    }
    let last = blocks.last().map_or(batch, |b| &b.output);
    let pooled = gap(last)?;
    let logits = dense(&pooled, &weights.head_weights, &weights.head_bias)?;
    Ok((
        logits,
        Tape {
            input: batch.clone(),
            blocks,
            pooled,
        },
    ))
}

/// Infer-mode forward pass using running statistics; does not touch weights.
pub fn forward_infer(genome: &Genome, weights: &WeightStore, batch: &Tensor) -> Result<Tensor, GenomeError> {
    check(genome, weights, batch)?;
    let mut x: Option<Tensor> = None;
    for (gene, w) in genome.blocks().iter().zip(&weights.blocks) {
        let z = conv2d(x.as_ref().unwrap_or(batch), &w.kernel, gene.stride)?;
        // Infer mode never writes the running statistics; these are throwaway copies.
        let (mut rm, mut rv) = (w.running_mean.clone(), w.running_var.clone());
        let (mut y, _) = batchnorm(&z, &w.gamma, &w.beta, &mut rm, &mut rv, Mode::Infer)?;
        relu_inplace(&mut y);
        x = Some(y);
    }
    let pooled = gap(x.as_ref().unwrap_or(batch))?;
    Ok(dense(&pooled, &weights.head_weights, &weights.head_bias)?)
}

/// Runs an individual's network on `batch` and returns raw logits.
pub fn forward(individual: &mut Individual, batch: &Tensor, mode: Mode) -> Result<Tensor, GenomeError> {
    match mode {
        Mode::Train => Ok(forward_train(&individual.genome, &mut individual.weights, batch)?.0),
        Mode::Infer => forward_infer(&individual.genome, &individual.weights, batch),
    }
}

/// Backpropagates `d_logits` through the recorded tape.
pub fn backward(
    genome: &Genome,
    weights: &WeightStore,
    tape: Tape,
    d_logits: &Tensor,
) -> Result<Gradients, GenomeError> {
    let Tape {
        input,
        mut blocks,
        pooled,
    } = tape;
    let (d_pooled, d_head_w, d_head_b) = dense_grad(d_logits, &pooled, &weights.head_weights)?;
    let (h, w) = match blocks.last() {
        Some(b) => {
            let [_, h, w, _] = b.output.dims4("backward")?;
            (h, w)
        }
        None => {
            let [_, h, w, _] = input.dims4("backward")?;
            (h, w)
        }
    };
    let mut d = gap_grad(&d_pooled, h, w)?;
    let mut per_block: Vec<[Tensor; 3]> = Vec::with_capacity(blocks.len());
    for i in (0..blocks.len()).rev() {
        let tape_i = blocks.pop().expect("one tape entry per block");
        for (g, &y) in d.data_mut().iter_mut().zip(tape_i.output.data()) {
            if y <= 0.0 {
                *g = 0.0;
            }
        }
        drop(tape_i.output);
        let wb = &weights.blocks[i];
        let (d_z, d_gamma, d_beta) = batchnorm_grad(&d, &tape_i.cache, &wb.gamma)?;
        drop(tape_i.cache);
        let stride = genome.blocks()[i].stride;
        let block_input = blocks.last().map_or(&input, |b| &b.output);
        let d_kernel = if i == 0 {
            conv2d_grad_kernel_only(&d_z, block_input, &wb.kernel, stride)?
        } else {
            let (d_in, d_k) = conv2d_grad(&d_z, block_input, &wb.kernel, stride)?;
            d = d_in;
            d_k
        };
        per_block.push([d_kernel, d_gamma, d_beta]);
    }
    let mut tensors: Vec<Tensor> = per_block.into_iter().rev().flatten().collect();
    tensors.push(d_head_w);
    tensors.push(d_head_b);
    Ok(Gradients { tensors })
}

/// Infer-mode class predictions in chunks of `chunk` examples.
///
/// Ties resolve to the lowest class index.
pub fn predict(
    genome: &Genome,
    weights: &WeightStore,
    images: &Tensor,
    chunk: usize,
) -> Result<Vec<usize>, GenomeError> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let logits = forward_infer(genome, weights, &images.slice_outer(start, end))?;
        let classes = genome.num_classes();
        for row in logits.data().chunks_exact(classes) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        start = end;
    }
    Ok(out)
}
