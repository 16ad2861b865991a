use std::io::{self, Write};

use crate::evolution::RunLog;

/// Values of several runs on a shared epoch grid, plus their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub epochs: Vec<u64>,
    /// One column per run.
    pub runs: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

/// `start, start + step, ...` up to and including `end`.
pub fn epoch_grid(start: u64, step: u64, end: u64) -> Vec<u64> {
    (start..=end).step_by(step.max(1) as usize).collect()
}

fn curve(logs: &[RunLog], grid: &[u64], at: impl Fn(&RunLog, u64) -> f64) -> Curve {
    let runs: Vec<Vec<f64>> = logs.iter().map(|l| grid.iter().map(|&t| at(l, t)).collect()).collect();
    let mean = (0..grid.len())
        .map(|i| runs.iter().map(|r| r[i]).sum::<f64>() / runs.len().max(1) as f64)
        .collect();
    Curve {
        epochs: grid.to_vec(),
        runs,
        mean,
    }
}

/// Highest fitness evaluated at or before each grid epoch (NaN before the
/// first evaluation).
pub fn best_so_far_curve(logs: &[RunLog], grid: &[u64]) -> Curve {
    curve(logs, grid, |log, t| {
        log.records
            .iter()
            .take_while(|r| r.cumulative_epochs <= t)
            .map(|r| r.child_fitness)
            .fold(f64::NAN, f64::max)
    })
}

/// Block count of the most recently evaluated network at each grid epoch;
/// the initial network's count before its evaluation completes.
pub fn block_count_curve(logs: &[RunLog], grid: &[u64]) -> Curve {
    curve(logs, grid, |log, t| {
        let first = log.records.first().map_or(f64::NAN, |r| r.block_count as f64);
        log.records
            .iter()
            .take_while(|r| r.cumulative_epochs <= t)
            .last()
            .map_or(first, |r| r.block_count as f64)
    })
}

/// Writes a `#` comment line, a header and one row per grid epoch.
pub fn write_curve<W: Write>(mut out: W, comment: &str, labels: &[String], c: &Curve) -> io::Result<()> {
    writeln!(out, "# {comment}")?;
    write!(out, "cumulative_epochs")?;
    for l in labels {
        write!(out, ",{l}")?;
    }
    writeln!(out, ",mean")?;
    for (i, t) in c.epochs.iter().enumerate() {
        write!(out, "{t}")?;
        for r in &c.runs {
            write!(out, ",{}", r[i])?;
        }
        writeln!(out, ",{}", c.mean[i])?;
    }
    Ok(())
}
