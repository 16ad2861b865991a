use crate::genome::{Genome, ImageDims};

/// Per-example forward-pass operation counts by layer type.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlopsBreakdown {
    pub conv: f64,
    pub batchnorm: f64,
    pub relu: f64,
    pub pool: f64,
    pub dense: f64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> f64 {
        self.conv + self.batchnorm + self.relu + self.pool + self.dense
    }
}

/// Conv: `2*k*k*Cin*F*Hout*Wout`; batch norm: 4 per output element; ReLU: 1
/// per element; pooling: 1 per input element; dense: `2*Cin*classes`.
pub fn per_example_flops(genome: &Genome, image: ImageDims) -> FlopsBreakdown {
    let mut f = FlopsBreakdown::default();
    let sizes = genome.feature_map_sizes(image.height, image.width);
    for (i, (b, &(h, w))) in genome.blocks().iter().zip(&sizes).enumerate() {
        let cin = genome.input_channels(i, image.channels) as f64;
        let out = (b.filters * h * w) as f64;
        f.conv += 2.0 * (b.kernel_size * b.kernel_size) as f64 * cin * out;
        f.batchnorm += 4.0 * out;
        f.relu += out;
    }
    let (h, w) = sizes.last().copied().unwrap_or((image.height, image.width));
    f.pool = (genome.head_inputs() * h * w) as f64;
    f.dense = 2.0 * genome.head_inputs() as f64 * genome.num_classes() as f64;
    f
}

/// Training-cost estimate of one evaluation: per-example FLOPS times
/// epochs, batches per epoch and batch size.
pub fn flops_estimate(
    genome: &Genome,
    image: ImageDims,
    epochs: usize,
    batches_per_epoch: usize,
    batch_size: usize,
) -> f64 {
    per_example_flops(genome, image).total() * epochs as f64 * batches_per_epoch as f64 * batch_size as f64
}
