//! Analytic layer gradients against central finite differences in f64.

use lamarck::tensor::{
    batchnorm_grad, batchnorm_train_inplace, conv2d, conv2d_grad, dense, dense_grad, gap, gap_grad, relu,
    relu_grad, softmax_xent, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: usize = 20;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central differences of `loss` w.r.t. every element of `x`.
fn numeric(x: &Tensor<f64>, mut loss: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + H;
        let up = loss(&probe);
        probe.data_mut()[i] = orig - H;
        let down = loss(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * H);
    }
    grad
}

/// `max|a - n| / max(max|a|, max|n|)`.
fn rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

struct Worst(f64);

impl Worst {
    fn check(&mut self, layer: &str, what: &str, a: &Tensor<f64>, n: &Tensor<f64>) -> Result<(), String> {
        let e = rel_error(a, n);
        self.0 = self.0.max(e);
        ensure!(e <= TOL, "{layer} d/d{what}: relative error {e:.3e}");
        Ok(())
    }
}

fn conv(rng: &mut ChaCha8Rng, worst: &mut Worst) -> Result<(), String> {
    for i in 0..INSTANCES {
        let k = [1, 3, 5][i % 3];
        let stride = 1 + (i / 3) % 2;
        let n = rng.random_range(1..=2);
        let h = rng.random_range(3..=7);
        let w = rng.random_range(3..=7);
        let cin = rng.random_range(1..=3);
        let f = rng.random_range(1..=3);
        let x = random(&[n, h, w, cin], rng);
        let kern = random(&[k, k, cin, f], rng);
        let out = conv2d(&x, &kern, stride).unwrap();
        let r = random(out.shape(), rng);
        let (dx, dk) = conv2d_grad(&r, &x, &kern, stride).unwrap();
        let nx = numeric(&x, |x| dot(&conv2d(x, &kern, stride).unwrap(), &r));
        let nk = numeric(&kern, |kern| dot(&conv2d(&x, kern, stride).unwrap(), &r));
        worst.check("conv", "input", &dx, &nx)?;
        worst.check("conv", "kernel", &dk, &nk)?;
    }
    Ok(())
}

fn batchnorm(rng: &mut ChaCha8Rng, worst: &mut Worst) -> Result<(), String> {
    for _ in 0..INSTANCES {
        let shape = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(2..=3), rng.random_range(1..=3)];
        let c = shape[3];
        let x = random(&shape, rng);
        let gamma = Tensor::from_fn(&[c], |_| rng.random_range(0.5..1.5));
        let beta = random(&[c], rng);
        let forward = |x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| {
            let mut rm = Tensor::zeros(&[c]);
            let mut rv = Tensor::full(&[c], 1.0);
            batchnorm_train_inplace(x.clone(), gamma, beta, &mut rm, &mut rv).unwrap()
        };
        let (out, cache) = forward(&x, &gamma, &beta);
        let r = random(out.shape(), rng);
        let (dx, dg, db) = batchnorm_grad(&r, &cache, &gamma).unwrap();
        let nx = numeric(&x, |x| dot(&forward(x, &gamma, &beta).0, &r));
        let ng = numeric(&gamma, |g| dot(&forward(&x, g, &beta).0, &r));
        let nb = numeric(&beta, |b| dot(&forward(&x, &gamma, b).0, &r));
        worst.check("batchnorm", "input", &dx, &nx)?;
        worst.check("batchnorm", "gamma", &dg, &ng)?;
        worst.check("batchnorm", "beta", &db, &nb)?;
    }
    Ok(())
}

fn relu_layer(rng: &mut ChaCha8Rng, worst: &mut Worst) -> Result<(), String> {
    for _ in 0..INSTANCES {
        let shape = [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=3)];
        // Keep inputs away from the kink, where the derivative is undefined.
        let x = Tensor::from_fn(&shape, |_| {
            let v: f64 = rng.random_range(0.01..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        });
        let out = relu(&x);
        let r = random(out.shape(), rng);
        let dx = relu_grad(&r, &out).unwrap();
        let nx = numeric(&x, |x| dot(&relu(x), &r));
        worst.check("relu", "input", &dx, &nx)?;
    }
    Ok(())
}

fn gap_layer(rng: &mut ChaCha8Rng, worst: &mut Worst) -> Result<(), String> {
    for _ in 0..INSTANCES {
        let shape = [rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=4)];
        let x = random(&shape, rng);
        let out = gap(&x).unwrap();
        let r = random(out.shape(), rng);
        let dx = gap_grad(&r, shape[1], shape[2]).unwrap();
        let nx = numeric(&x, |x| dot(&gap(x).unwrap(), &r));
        worst.check("gap", "input", &dx, &nx)?;
    }
    Ok(())
}

fn dense_layer(rng: &mut ChaCha8Rng, worst: &mut Worst) -> Result<(), String> {
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..=4);
        let c = rng.random_range(1..=6);
        let k = rng.random_range(1..=5);
        let x = random(&[n, c], rng);
        let w = random(&[c, k], rng);
        let b = random(&[k], rng);
        let r = random(&[n, k], rng);
        let (dx, dw, db) = dense_grad(&r, &x, &w).unwrap();
        let nx = numeric(&x, |x| dot(&dense(x, &w, &b).unwrap(), &r));
        let nw = numeric(&w, |w| dot(&dense(&x, w, &b).unwrap(), &r));
        let nb = numeric(&b, |b| dot(&dense(&x, &w, b).unwrap(), &r));
        worst.check("dense", "input", &dx, &nx)?;
        worst.check("dense", "weights", &dw, &nw)?;
        worst.check("dense", "bias", &db, &nb)?;
    }
    Ok(())
}

fn softmax_cross_entropy(rng: &mut ChaCha8Rng, worst: &mut Worst) -> Result<(), String> {
    for _ in 0..INSTANCES {
        let n = rng.random_range(1..=5);
        let k = rng.random_range(2..=6);
        let logits = Tensor::from_fn(&[n, k], |_| rng.random_range(-3.0..3.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let (_, d) = softmax_xent(&logits, &labels).unwrap();
        let nd = numeric(&logits, |l| softmax_xent(l, &labels).unwrap().0);
        worst.check("softmax_xent", "logits", &d, &nd)?;
    }
    Ok(())
}

pub fn run() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = Worst(0.0);
    conv(&mut rng, &mut worst)?;
    batchnorm(&mut rng, &mut worst)?;
    relu_layer(&mut rng, &mut worst)?;
    gap_layer(&mut rng, &mut worst)?;
    dense_layer(&mut rng, &mut worst)?;
    softmax_cross_entropy(&mut rng, &mut worst)?;
    Ok(format!(
        "6 layers x {INSTANCES} instances, worst relative error {:.2e} (limit {TOL:.0e})",
        worst.0
    ))
}
