use lamarck::mutation::{sample_mutation, MutationKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::{ensure, Outcome};

const SAMPLES: usize = 130_000;

pub fn run() -> Outcome {
    let expected: [(MutationKind, f64); 6] = [
        (MutationKind::AddBlock, 3.0 / 13.0),
        (MutationKind::RemoveBlock, 3.0 / 13.0),
        (MutationKind::AddFilters, 2.0 / 13.0),
        (MutationKind::RemoveFilters, 2.0 / 13.0),
        (MutationKind::ChangeKernelSize, 2.0 / 13.0),
        (MutationKind::ChangeStride, 1.0 / 13.0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut counts = [0usize; 6];
    for _ in 0..SAMPLES {
        let kind = sample_mutation(&mut rng);
        let slot = expected.iter().position(|(k, _)| *k == kind).unwrap();
        counts[slot] += 1;
    }
    let n = SAMPLES as f64;
    let mut chi2 = 0.0;
    let mut worst_sigma: f64 = 0.0;
    for ((kind, p), &c) in expected.iter().zip(&counts) {
        let freq = c as f64 / n;
        let sigma = (p * (1.0 - p) / n).sqrt();
        let z = (freq - p).abs() / sigma;
        worst_sigma = worst_sigma.max(z);
        ensure!(z <= 3.0, "{kind}: frequency {freq:.5} vs {p:.5} is {z:.2} sigma off");
        chi2 += (c as f64 - n * p).powi(2) / (n * p);
    }
    let p_value = ChiSquared::new(5.0).unwrap().sf(chi2);
    ensure!(p_value > 0.001, "chi-square {chi2:.2}, p = {p_value:.2e}");
    Ok(format!(
        "{SAMPLES} draws, worst deviation {worst_sigma:.2} sigma, chi-square {chi2:.2} (p = {p_value:.3})"
    ))
}
