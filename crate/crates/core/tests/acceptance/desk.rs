//! Fashion-MNIST desk run: inheritance against baseline I at equal epochs.
//!
//! Runs `configs/fashion_desk.toml` into `results/fashion_desk` with resume,
//! so runs completed earlier (for example by `lamarck run --resume` with the
//! same config) are reused. Overrides:
//! `LAMARCK_DESK_OUT` (output directory), `LAMARCK_JOBS` (parallel runs).

use std::path::{Path, PathBuf};

use lamarck::experiments::{load_dataset, mann_whitney_u_one_sided, run_experiment, ExperimentConfig, OutputLayout, RunOptions};

use crate::{ensure, Outcome};

const TREATMENT: &str = "inheritance";
const CONTROL: &str = "baseline_i";
const DOMINANCE_SHARE: f64 = 0.7;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn jobs() -> usize {
    std::env::var("LAMARCK_JOBS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn run() -> Outcome {
    let root = workspace();
    let config_path = root.join("configs/fashion_desk.toml");
    let cfg = ExperimentConfig::load(&config_path).map_err(|e| e.to_string())?;
    let data = load_dataset(&cfg.dataset, config_path.parent().unwrap()).map_err(|e| {
        format!("{e} (fetch the data with scripts/fetch_fashion_mnist.py)")
    })?;
    let out_dir = std::env::var_os("LAMARCK_DESK_OUT").map_or_else(|| root.join("results/fashion_desk"), PathBuf::from);
    let out = OutputLayout::new(out_dir);
    let opts = RunOptions {
        resume: true,
        jobs: jobs(),
        ..RunOptions::default()
    };
    let report = run_experiment(&cfg, &data, &out, &opts).map_err(|e| e.to_string())?;

    let arm_values = |arm: &str| -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = report
            .results
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| (r.repetition, r.best_at_budget))
            .collect();
        v.sort_by_key(|p| p.0);
        v
    };
    let failed: Vec<String> = report
        .results
        .iter()
        .filter(|r| !r.ok)
        .map(|r| format!("{}/{}", r.arm, r.repetition))
        .collect();
    ensure!(failed.is_empty(), "failed runs: {failed:?}");
    let treat = arm_values(TREATMENT);
    let control = arm_values(CONTROL);
    ensure!(
        treat.len() == cfg.repetitions && control.len() == cfg.repetitions,
        "expected {} runs per arm",
        cfg.repetitions
    );
    // Repetition r of both arms shares seed r, so differences are paired.
    let diffs: Vec<f64> = treat.iter().zip(&control).map(|(t, c)| t.1 - c.1).collect();
    let mean_diff = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let t_mean = treat.iter().map(|p| p.1).sum::<f64>() / treat.len() as f64;
    let c_mean = control.iter().map(|p| p.1).sum::<f64>() / control.len() as f64;
    let t_vals: Vec<f64> = treat.iter().map(|p| p.1).collect();
    let c_vals: Vec<f64> = control.iter().map(|p| p.1).collect();
    let u = mann_whitney_u_one_sided(&t_vals, &c_vals).map_err(|e| e.to_string())?;

    let curve = |arm: &str| {
        report
            .curves
            .iter()
            .find(|c| c.arm == arm)
            .map(|c| c.best_so_far.clone())
            .ok_or(format!("no curve for {arm}"))
    };
    let (tc, cc) = (curve(TREATMENT)?, curve(CONTROL)?);
    ensure!(tc.epochs == cc.epochs, "arms were logged on different grids");
    let dominated = tc.mean.iter().zip(&cc.mean).filter(|(t, c)| t >= c).count();
    let share = dominated as f64 / tc.epochs.len() as f64;

    let detail = format!(
        "best at budget: {TREATMENT} {t_mean:.4} vs {CONTROL} {c_mean:.4} (paired mean diff {mean_diff:+.4}, wins {}/{}), U = {} p = {:.4} ({:?}); best-so-far dominance {dominated}/{} = {:.0}%; results in {}",
        diffs.iter().filter(|&&d| d > 0.0).count(),
        diffs.len(),
        u.u,
        u.p,
        u.method,
        tc.epochs.len(),
        100.0 * share,
        out.root.display()
    );
    ensure!(mean_diff >= 0.0, "{TREATMENT} mean below {CONTROL}: {detail}");
    ensure!(share >= DOMINANCE_SHARE, "dominance below {:.0}%: {detail}", 100.0 * DOMINANCE_SHARE);
    Ok(detail)
}
