//! Two complete single-job experiments with the same config must write the
//! same run logs, byte for byte.

use std::fs;
use std::path::Path;

use lamarck::experiments::{load_dataset, run_experiment, ExperimentConfig, OutputLayout, RunOptions};

use crate::{ensure, Outcome};

const CONFIG: &str = r#"
schema_version = 1
name = "determinism"
repetitions = 2
base_seed = 42
finetune_epochs = [8]
finetune_schedule = { stages = [[1, 1e-3], [2, 1e-4]] }

[dataset]
kind = "synthetic"
train = 0
val = 0
synthetic = { num_classes = 3, height = 8, width = 8, channels = 1, n_per_class = 24, difficulty = 1.0 }

[ea]
eta = 0.5
k = 2
epochs_per_eval = 1
epoch_budget = 8
checkpoint_interval = 4
batch_size = 16
filters = [16, 32]

[[arms]]
name = "inheritance"
inheritance = true

[[arms]]
name = "baseline_i"
inheritance = false
"#;

pub fn run() -> Outcome {
    let cfg = ExperimentConfig::from_toml(CONFIG).map_err(|e| e.to_string())?;
    let data = load_dataset(&cfg.dataset, Path::new(".")).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = RunOptions {
        jobs: 1,
        ..RunOptions::default()
    };
    let outs: Vec<OutputLayout> = ["first", "second"].iter().map(|n| OutputLayout::new(dir.path().join(n))).collect();
    for out in &outs {
        run_experiment(&cfg, &data, out, &opts).map_err(|e| e.to_string())?;
    }
    let mut bytes = 0;
    for arm in &cfg.arms {
        for rep in 0..cfg.repetitions {
            let a = fs::read(outs[0].runlog(&arm.name, rep)).map_err(|e| e.to_string())?;
            let b = fs::read(outs[1].runlog(&arm.name, rep)).map_err(|e| e.to_string())?;
            ensure!(a == b, "{}/rep_{rep:03}: run logs differ", arm.name);
            ensure!(a.iter().filter(|&&c| c == b'\n').count() > 8, "{}/rep_{rep:03}: log too short", arm.name);
            bytes += a.len();
        }
    }
    for file in [outs[0].runs_csv(), outs[0].finetune_csv()] {
        let name = file.file_name().unwrap().to_owned();
        let other = outs[1].root.join(&name);
        ensure!(
            fs::read(&file).map_err(|e| e.to_string())? == fs::read(&other).map_err(|e| e.to_string())?,
            "{name:?} differs"
        );
    }
    Ok(format!(
        "2 arms x {} repetitions: run logs identical ({bytes} bytes in total), runs.csv and finetune.csv identical",
        cfg.repetitions
    ))
}
