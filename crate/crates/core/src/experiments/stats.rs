use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Largest sample size handled by the exact distribution.
pub const EXACT_MAX_N: usize = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("both samples must be non-empty")]
    EmptySample,
    #[error("samples must not contain NaN")]
    NaN,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UMethod {
    Exact,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UTest {
    /// Pairs with `a > b`, ties counting one half.
    pub u: f64,
    /// P(U >= u) under the null hypothesis.
    pub p: f64,
    pub method: UMethod,
}

/// Number of orderings of `n` a-values and `m` b-values, for each count `u`
/// of (a, b) pairs with a above b. Index `u` runs over `0..=n*m`.
pub fn u_distribution(n: usize, m: usize) -> Vec<u64> {
    // table[i][j] is the distribution for i a-values and j b-values. The
    // largest value is either an a (above all j b-values) or a b.
    let mut table: Vec<Vec<Vec<u64>>> = vec![vec![Vec::new(); m + 1]; n + 1];
    for i in 0..=n {
        for j in 0..=m {
            let mut dist = vec![0u64; i * j + 1];
            if i == 0 || j == 0 {
                dist[0] = 1;
            } else {
                for (u, slot) in dist.iter_mut().enumerate() {
                    let from_a = if u >= j { table[i - 1][j].get(u - j).copied().unwrap_or(0) } else { 0 };
                    let from_b = table[i][j - 1].get(u).copied().unwrap_or(0);
                    *slot = from_a + from_b;
                }
            }
            table[i][j] = dist;
        }
    }
    table.swap_remove(n).swap_remove(m)
}

fn u_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for &x in a {
        for &y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// Midranks of the pooled sample, returned with the tie-group sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && pooled[order[end]] == pooled[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks, ties)
}

/// One-sided Mann-Whitney U test of "a tends to be greater than b".
///
/// Exact when both samples have at most [`EXACT_MAX_N`] values and there are
/// no ties; otherwise a normal approximation with midranks, tie-corrected
/// variance and continuity correction.
pub fn mann_whitney_u_one_sided(a: &[f64], b: &[f64]) -> Result<UTest, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(StatsError::NaN);
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let (n, m) = (a.len(), b.len());
    let has_ties = ties.iter().any(|&t| t > 1);
    if n.max(m) <= EXACT_MAX_N && !has_ties {
        let u = u_statistic(a, b);
        let dist = u_distribution(n, m);
        let total: u64 = dist.iter().sum();
        let tail: u64 = dist[u as usize..].iter().sum();
        return Ok(UTest {
            u,
            p: tail as f64 / total as f64,
            method: UMethod::Exact,
        });
    }
    Ok(normal_approximation(a, b, &ranks, &ties))
}

/// Normal approximation of the one-sided U test, used for large or tied
/// samples. Exposed for comparison with the exact distribution.
pub fn mann_whitney_normal(a: &[f64], b: &[f64]) -> Result<UTest, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(StatsError::NaN);
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    Ok(normal_approximation(a, b, &ranks, &ties))
}

fn normal_approximation(a: &[f64], b: &[f64], ranks: &[f64], ties: &[usize]) -> UTest {
    let (n, m) = (a.len(), b.len());
    let (nf, mf) = (n as f64, m as f64);
    let rank_sum: f64 = ranks[..n].iter().sum();
    let u = rank_sum - nf * (nf + 1.0) / 2.0;
    let total = nf + mf;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (total * (total - 1.0));
    let var = nf * mf / 12.0 * ((total + 1.0) - tie_term);
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = (u - nf * mf / 2.0 - 0.5) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        normal.sf(z).clamp(f64::MIN_POSITIVE, 1.0)
    };
    UTest {
        u,
        p,
        method: UMethod::Normal,
    }
}

/// Minimum, mean, sample standard deviation and maximum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(Summary {
        count: values.len(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        mean,
        std,
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}
