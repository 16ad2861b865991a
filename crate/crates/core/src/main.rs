use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lamarck::data::Dataset;
use lamarck::experiments::{
    emit_plot_data, finetune_checkpoints, load_dataset, run_experiment, write_stats, write_summaries,
    ExperimentConfig, ExperimentError, OutputLayout, RunOptions,
};

#[derive(Parser)]
#[command(name = "lamarck", version, about = "Evolve CNN architectures with weight inheritance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every arm and repetition of an experiment config.
    Run {
        #[command(flatten)]
        common: Common,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Reuse completed runs in the output directory.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run only this arm (repeatable).
        #[arg(long = "arm")]
        arms: Vec<String>,
    },
    /// Train stored checkpoints to completion and test them.
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// One-sided U tests between arms of a finished experiment.
    Stats {
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild curve files from stored run logs.
    Plotdata {
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and check a config file.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: results/<name>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, OutputLayout), ExperimentError> {
        let cfg = ExperimentConfig::load(&self.config)?;
        let out = self.out.clone().unwrap_or_else(|| Path::new("results").join(&cfg.name));
        Ok((cfg, OutputLayout::new(out)))
    }

    fn dataset(&self, cfg: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
        let base = self.config.parent().unwrap_or(Path::new("."));
        Ok(load_dataset(&cfg.dataset, base)?)
    }
}

fn stored_config(out: &OutputLayout) -> Result<ExperimentConfig, ExperimentError> {
    ExperimentConfig::load(&out.config())
}

fn execute(command: Command) -> Result<(), ExperimentError> {
    match command {
        Command::Run {
            common,
            force,
            resume,
            seed,
            arms,
        } => {
            let (mut cfg, out) = common.load()?;
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            let data = common.dataset(&cfg)?;
            let opts = RunOptions {
                force,
                resume,
                arms: (!arms.is_empty()).then_some(arms),
                jobs: common.jobs,
            };
            let report = run_experiment(&cfg, &data, &out, &opts)?;
            for f in &report.fitness_summary {
                println!(
                    "{}: best fitness at budget mean {:.4} (min {:.4}, max {:.4}, runs {})",
                    f.arm, f.mean, f.min, f.max, f.runs
                );
            }
            println!("results in {}", out.root.display());
        }
        Command::Finetune { common } => {
            let (cfg, out) = common.load()?;
            let data = common.dataset(&cfg)?;
            finetune_checkpoints(&cfg, &data, &out, common.jobs)?;
            for s in write_summaries(&out)?.0 {
                println!(
                    "{} @{}: test accuracy {:.4} ± {:.4} (min {:.4}, max {:.4})",
                    s.arm, s.checkpoint_epochs, s.mean, s.std, s.min, s.max
                );
            }
        }
        Command::Stats { out } => {
            let out = OutputLayout::new(out);
            write_summaries(&out)?;
            for r in write_stats(&out)? {
                println!(
                    "{}: {} > {}  U={} p={:.4} ({:?})",
                    r.metric, r.arm_a, r.arm_b, r.u, r.p, r.method
                );
            }
        }
        Command::Plotdata { out } => {
            let out = OutputLayout::new(out);
            let cfg = stored_config(&out)?;
            let curves = emit_plot_data(&cfg, &out)?;
            println!("{} arm(s) written to {}", curves.len(), out.curves().display());
        }
        Command::ValidateConfig { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!(
                "{}: {} arm(s) x {} repetition(s), schema {}",
                cfg.name,
                cfg.arms.len(),
                cfg.repetitions,
                cfg.schema_version
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
