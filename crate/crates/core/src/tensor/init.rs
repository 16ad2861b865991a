use rand::distr::{Distribution, Uniform};
use rand::Rng;

use super::{shape_err, Real, Result, Tensor};

/// Glorot/Xavier uniform: values in `[-L, L]`, `L = sqrt(6 / (fan_in + fan_out))`.
///
/// Samples are drawn in f64 and rounded to `T`, so the bound holds exactly.
pub fn glorot_uniform<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(shape_err("glorot_uniform", "fan_in and fan_out must be positive"));
    }
    if shape.contains(&0) {
        return Err(shape_err("glorot_uniform", format!("degenerate shape {shape:?}")));
    }
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Ok(Tensor::from_fn(shape, |_| T::of(dist.sample(rng))))
}
