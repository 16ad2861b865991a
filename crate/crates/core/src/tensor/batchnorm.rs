use super::{shape_err, Real, Result, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// What the backward pass needs from a train-mode forward.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn check_params<T: Real>(channels: usize, params: [&Tensor<T>; 4]) -> Result<()> {
    for p in params {
        if p.shape() != [channels] {
            return Err(shape_err(
                "batchnorm",
                format!("parameter shape {:?} does not match {channels} channels", p.shape()),
            ));
        }
    }
    Ok(())
}

/// Train-mode batch norm that reuses `input`'s buffer for the output.
///
/// Returns `(output, cache)`; running statistics are updated as
/// `running = momentum * running + (1 - momentum) * batch`, with the unbiased
/// batch variance feeding the running variance.
pub fn batchnorm_train_inplace<T: Real>(
    mut input: Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let [n, h, w, c] = input.dims4("batchnorm")?;
    check_params(c, [gamma, beta, running_mean, running_var])?;
    let m = n * h * w;
    if m < 2 {
        return Err(shape_err("batchnorm", "train mode needs at least two values per channel"));
    }
    let mf = T::of(m as f64);
    let mut mean = vec![T::zero(); c];
    for row in input.data().chunks_exact(c) {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    mean.iter_mut().for_each(|v| *v = *v / mf);
    let mut var = vec![T::zero(); c];
    for row in input.data().chunks_exact(c) {
        for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - mu;
            *acc = *acc + d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = *v / mf);

    let eps = T::of(BN_EPSILON);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = input.clone();
    for (hat_row, out_row) in x_hat
        .data_mut()
        .chunks_exact_mut(c)
        .zip(input.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            let xh = (hat_row[ch] - mean[ch]) * inv_std[ch];
            hat_row[ch] = xh;
            out_row[ch] = gamma.data()[ch] * xh + beta.data()[ch];
        }
    }

    let momentum = T::of(BN_MOMENTUM);
    let unbias = mf / T::of((m - 1) as f64);
    for ch in 0..c {
        let rm = &mut running_mean.data_mut()[ch];
        *rm = momentum * *rm + (T::one() - momentum) * mean[ch];
        let rv = &mut running_var.data_mut()[ch];
        *rv = momentum * *rv + (T::one() - momentum) * var[ch] * unbias;
    }
    input.check_finite("batchnorm")?;
    Ok((input, BatchNormCache { x_hat, inv_std }))
}

fn batchnorm_infer_inplace<T: Real>(
    mut input: Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [_, _, _, c] = input.dims4("batchnorm")?;
    check_params(c, [gamma, beta, running_mean, running_var])?;
    let eps = T::of(BN_EPSILON);
    let (scale, shift): (Vec<T>, Vec<T>) = (0..c)
        .map(|ch| {
            let s = gamma.data()[ch] / (running_var.data()[ch] + eps).sqrt();
            (s, beta.data()[ch] - running_mean.data()[ch] * s)
        })
        .unzip();
    for row in input.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            row[ch] = row[ch] * scale[ch] + shift[ch];
        }
    }
    input.check_finite("batchnorm")?;
    Ok(input)
}

/// Per-channel batch normalization over the N, H, W axes.
///
/// Train mode normalizes with batch statistics and updates the running
/// statistics; infer mode uses the running statistics and leaves them as is.
pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    match mode {
        Mode::Train => {
            let (out, cache) =
                batchnorm_train_inplace(input.clone(), gamma, beta, running_mean, running_var)?;
            Ok((out, Some(cache)))
        }
        Mode::Infer => Ok((
            batchnorm_infer_inplace(input.clone(), gamma, beta, running_mean, running_var)?,
            None,
        )),
    }
}

/// Train-mode gradients `(d_input, d_gamma, d_beta)`.
pub fn batchnorm_grad<T: Real>(
    upstream: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if upstream.shape() != cache.x_hat.shape() {
        return Err(shape_err(
            "batchnorm_grad",
            format!("upstream {:?} vs forward {:?}", upstream.shape(), cache.x_hat.shape()),
        ));
    }
    let [n, h, w, c] = upstream.dims4("batchnorm_grad")?;
    if gamma.shape() != [c] {
        return Err(shape_err("batchnorm_grad", "gamma does not match channels"));
    }
    let m = T::of((n * h * w) as f64);
    let mut d_beta = vec![T::zero(); c];
    let mut d_gamma = vec![T::zero(); c];
    for (dy, xh) in upstream
        .data()
        .chunks_exact(c)
        .zip(cache.x_hat.data().chunks_exact(c))
    {
        for ch in 0..c {
            d_beta[ch] = d_beta[ch] + dy[ch];
            d_gamma[ch] = d_gamma[ch] + dy[ch] * xh[ch];
        }
    }
    // dx = gamma * inv_std / m * (m * dy - sum(dy) - x_hat * sum(dy * x_hat))
    let coef: Vec<T> = (0..c)
        .map(|ch| gamma.data()[ch] * cache.inv_std[ch] / m)
        .collect();
    let mut d_input = upstream.clone();
    for (dx, xh) in d_input
        .data_mut()
        .chunks_exact_mut(c)
        .zip(cache.x_hat.data().chunks_exact(c))
    {
        for ch in 0..c {
            dx[ch] = coef[ch] * (m * dx[ch] - d_beta[ch] - xh[ch] * d_gamma[ch]);
        }
    }
    d_input.check_finite("batchnorm_grad")?;
    Ok((
        d_input,
        Tensor::new(vec![c], d_gamma)?,
        Tensor::new(vec![c], d_beta)?,
    ))
}
