use super::{gemm, shape_err, EngineError, Real, Result, Tensor};

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

pub fn relu_inplace<T: Real>(t: &mut Tensor<T>) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Passes `upstream` through wherever the forward output was positive.
pub fn relu_grad<T: Real>(upstream: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.shape() != output.shape() {
        return Err(shape_err("relu_grad", "upstream and output shapes differ"));
    }
    let mut d = upstream.clone();
    for (g, &y) in d.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(d)
}

/// Global average pooling `[N,H,W,C] -> [N,C]`.
pub fn gap<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = input.dims4("gap")?;
    let area = h * w;
    if area == 0 {
        return Err(shape_err("gap", "empty spatial extent"));
    }
    let scale = T::one() / T::of(area as f64);
    let mut out = vec![T::zero(); n * c];
    for (b, img) in input.data().chunks_exact(area * c).enumerate() {
        let acc = &mut out[b * c..(b + 1) * c];
        for px in img.chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a = *a + v;
            }
        }
        acc.iter_mut().for_each(|a| *a = *a * scale);
    }
    Tensor::new(vec![n, c], out)
}

pub fn gap_grad<T: Real>(upstream: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, c] = upstream.dims2("gap_grad")?;
    let scale = T::one() / T::of((h * w) as f64);
    let mut out = Vec::with_capacity(n * h * w * c);
    for row in upstream.data().chunks_exact(c) {
        for _ in 0..h * w {
            out.extend(row.iter().map(|&g| g * scale));
        }
    }
    Tensor::new(vec![n, h, w, c], out)
}

/// `input[N,C] * weights[C,K] + bias[K]`.
pub fn dense<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c] = input.dims2("dense")?;
    let [wc, k] = weights.dims2("dense")?;
    if wc != c || bias.shape() != [k] {
        return Err(shape_err(
            "dense",
            format!(
                "input {:?}, weights {:?}, bias {:?}",
                input.shape(),
                weights.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out: Vec<T> = bias.data().iter().copied().cycle().take(n * k).collect();
    gemm(n, c, k, input.data(), false, weights.data(), false, &mut out, true);
    let out = Tensor::new(vec![n, k], out)?;
    out.check_finite("dense")?;
    Ok(out)
}

/// `(d_input, d_weights, d_bias)` for [`dense`].
pub fn dense_grad<T: Real>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c] = input.dims2("dense_grad")?;
    let [_, k] = weights.dims2("dense_grad")?;
    if upstream.shape() != [n, k] || weights.shape() != [c, k] {
        return Err(shape_err("dense_grad", "upstream/input/weights disagree"));
    }
    let mut d_input = vec![T::zero(); n * c];
    gemm(n, k, c, upstream.data(), false, weights.data(), true, &mut d_input, false);
    let mut d_weights = vec![T::zero(); c * k];
    gemm(c, n, k, input.data(), true, upstream.data(), false, &mut d_weights, false);
    let mut d_bias = vec![T::zero(); k];
    for row in upstream.data().chunks_exact(k) {
        for (b, &g) in d_bias.iter_mut().zip(row) {
            *b = *b + g;
        }
    }
    Ok((
        Tensor::new(vec![n, c], d_input)?,
        Tensor::new(vec![c, k], d_weights)?,
        Tensor::new(vec![k], d_bias)?,
    ))
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, k] = logits.dims2("softmax")?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / sum);
    }
    out.check_finite("softmax")?;
    Ok(out)
}

/// Mean cross-entropy over the batch and its exact gradient w.r.t. the logits.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let [n, k] = logits.dims2("softmax_xent")?;
    if labels.len() != n {
        return Err(shape_err(
            "softmax_xent",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(EngineError::InvalidLabel { label, classes: k });
    }
    let mut grad = softmax(logits)?;
    let scale = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    for ((row, logit_row), &label) in grad
        .data_mut()
        .chunks_exact_mut(k)
        .zip(logits.data().chunks_exact(k))
        .zip(labels)
    {
        // log p_label computed from logits directly to avoid log(0).
        let max = logit_row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = logit_row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
        loss = loss + (lse - logit_row[label]);
        row[label] = row[label] - T::one();
        row.iter_mut().for_each(|g| *g = *g * scale);
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(EngineError::NonFinite { op: "softmax_xent" });
    }
    Ok((loss, grad))
}
