//! Experiment harness: configuration, seeded repetitions of several arms,
//! fine-tuning of checkpoints, statistics and plot data.

mod flops;
mod plot;
mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, CifarVariant, DataError, Dataset, SplitSizes, SynthSpec};
use crate::evolution::{checkpoint_path, run_ea, EAConfig, RunLog, TrainingEvaluator};
use crate::fitness::{train_to_completion, FinetuneSchedule};
use crate::genome::{Checkpoint, ImageDims, SearchSpace};

pub use flops::{flops_estimate, per_example_flops, FlopsBreakdown};
pub use plot::{best_so_far_curve, block_count_curve, epoch_grid, write_curve, Curve};
pub use stats::{mann_whitney_normal, mann_whitney_u_one_sided, summarize, u_distribution, StatsError, Summary, UMethod, UTest, EXACT_MAX_N};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("run failure: {0}")]
    Run(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

impl ExperimentError {
    /// Process exit code for the command-line interface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Data(_) => 2,
            Self::Run(_) | Self::Io { .. } | Self::Csv { .. } => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the dataset files, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub train: usize,
    pub val: usize,
    #[serde(default)]
    pub test: usize,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthSpec>,
}

/// EA settings shared by every arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EaSection {
    pub eta: f64,
    pub k: usize,
    pub epochs_per_eval: usize,
    pub epoch_budget: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub checkpoint_interval: usize,
    pub filters: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub strides: Vec<usize>,
    pub max_stride2: usize,
}

impl Default for EaSection {
    fn default() -> Self {
        let d = EAConfig::default();
        Self {
            eta: d.eta,
            k: d.k,
            epochs_per_eval: d.epochs_per_eval,
            epoch_budget: d.epoch_budget,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            checkpoint_interval: d.checkpoint_interval,
            filters: d.space.filters,
            kernel_sizes: d.space.kernel_sizes,
            strides: d.space.strides,
            max_stride2: d.space.max_stride2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub name: String,
    pub inheritance: bool,
    /// Overrides the shared epochs per evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs_per_eval: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub repetitions: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Checkpoint tags (cumulative epochs) to fine-tune and test.
    #[serde(default)]
    pub finetune_epochs: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_schedule: Option<FinetuneSchedule>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub ea: EaSection,
    pub arms: Vec<ArmConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<(), ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if self.arms.is_empty() {
            return bad("at least one arm is required".into());
        }
        let mut names = BTreeSet::new();
        for arm in &self.arms {
            let safe = !arm.name.is_empty()
                && arm.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !safe {
                return bad(format!("arm name {:?} must be non-empty [A-Za-z0-9_-]", arm.name));
            }
            if !names.insert(arm.name.as_str()) {
                return bad(format!("duplicate arm name {:?}", arm.name));
            }
        }
        if self.dataset.kind == DatasetKind::Synthetic && self.dataset.synthetic.is_none() {
            return bad("synthetic dataset needs a [dataset.synthetic] table".into());
        }
        if self.dataset.kind != DatasetKind::Synthetic && self.dataset.path.is_none() {
            return bad("dataset.path is required".into());
        }
        if let Some(s) = &self.finetune_schedule {
            if s.stages.is_empty() || s.stages.windows(2).any(|w| w[0].0 >= w[1].0 || w[1].1 > w[0].1) {
                return bad("finetune_schedule stages must be ascending with non-increasing rates".into());
            }
        }
        let probe = ImageDims {
            height: 1 << 16,
            width: 1 << 16,
            channels: 1,
        };
        for arm in &self.arms {
            self.ea_config(arm, 0, probe, 1)
                .check()
                .map_err(|e| ExperimentError::Config(format!("arm {}: {e}", arm.name)))?;
        }
        Ok(())
    }

    pub fn arm(&self, name: &str) -> Option<&ArmConfig> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn ea_config(&self, arm: &ArmConfig, seed: u64, image: ImageDims, num_classes: usize) -> EAConfig {
        let ea = &self.ea;
        EAConfig {
            eta: ea.eta,
            k: ea.k,
            epochs_per_eval: arm.epochs_per_eval.unwrap_or(ea.epochs_per_eval),
            epoch_budget: ea.epoch_budget,
            space: SearchSpace {
                filters: ea.filters.clone(),
                kernel_sizes: ea.kernel_sizes.clone(),
                strides: ea.strides.clone(),
                max_stride2: ea.max_stride2,
            },
            inheritance: arm.inheritance,
            batch_size: ea.batch_size,
            learning_rate: ea.learning_rate,
            checkpoint_interval: ea.checkpoint_interval,
            seed,
            num_classes,
            image,
        }
    }

    pub fn seed_for(&self, repetition: usize) -> u64 {
        self.base_seed.wrapping_add(repetition as u64)
    }

    pub fn schedule(&self) -> FinetuneSchedule {
        self.finetune_schedule.clone().unwrap_or_default()
    }
}

/// Loads and splits the configured dataset. Relative paths resolve against
/// `base_dir`.
pub fn load_dataset(cfg: &DatasetConfig, base_dir: &Path) -> Result<Dataset, DataError> {
    let sizes = SplitSizes {
        train: cfg.train,
        val: cfg.val,
        test: cfg.test,
    };
    let dir = || base_dir.join(cfg.path.as_deref().unwrap_or(Path::new(".")));
    let (pool, name) = match cfg.kind {
        DatasetKind::Synthetic => {
            let spec = cfg.synthetic.as_ref().ok_or_else(|| DataError::Size("missing synthetic spec".into()))?;
            return Ok(data::synth_dataset(spec, cfg.split_seed));
        }
        DatasetKind::Mnist => (data::load_idx_dir(&dir(), 10)?, "mnist"),
        DatasetKind::FashionMnist => (data::load_idx_dir(&dir(), 10)?, "fashion-mnist"),
        DatasetKind::Cifar10 => (data::load_cifar(&dir(), CifarVariant::Cifar10)?, "cifar10"),
        DatasetKind::Cifar100 => (data::load_cifar(&dir(), CifarVariant::Cifar100)?, "cifar100"),
    };
    data::split(&pool, sizes, cfg.split_seed, name)
}

/// Outcome of one (arm, repetition) run, stored as `result.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: String,
    pub repetition: usize,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
    pub evaluations: usize,
    pub final_epochs: u64,
    /// Fitness of the final parent.
    pub best_fitness: f64,
    /// Best fitness evaluated by the time the budget was reached.
    pub best_at_budget: f64,
    pub total_flops: f64,
}

impl RunResult {
    fn failed(arm: &str, repetition: usize, seed: u64, error: String) -> Self {
        Self {
            arm: arm.to_string(),
            repetition,
            seed,
            ok: false,
            error: Some(error),
            evaluations: 0,
            final_epochs: 0,
            best_fitness: f64::NAN,
            best_at_budget: f64::NAN,
            total_flops: 0.0,
        }
    }
}

/// Layout of an experiment output directory.
#[derive(Clone, Debug)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn run_dir(&self, arm: &str, repetition: usize) -> PathBuf {
        self.root.join("runs").join(arm).join(format!("rep_{repetition:03}"))
    }

    pub fn runlog(&self, arm: &str, repetition: usize) -> PathBuf {
        self.run_dir(arm, repetition).join("runlog.csv")
    }

    pub fn result(&self, arm: &str, repetition: usize) -> PathBuf {
        self.run_dir(arm, repetition).join("result.json")
    }

    pub fn checkpoints(&self, arm: &str, repetition: usize) -> PathBuf {
        self.run_dir(arm, repetition).join("checkpoints")
    }

    pub fn runs_csv(&self) -> PathBuf {
        self.root.join("runs.csv")
    }

    pub fn finetune_csv(&self) -> PathBuf {
        self.root.join("finetune.csv")
    }

    pub fn summary_csv(&self) -> PathBuf {
        self.root.join("summary.csv")
    }

    pub fn fitness_summary_csv(&self) -> PathBuf {
        self.root.join("fitness_summary.csv")
    }

    pub fn stats_csv(&self) -> PathBuf {
        self.root.join("stats.csv")
    }

    pub fn curves(&self) -> PathBuf {
        self.root.join("curves")
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overwrite a non-empty output directory.
    pub force: bool,
    /// Reuse completed runs found in the output directory; the stored
    /// configuration must match.
    pub resume: bool,
    /// Restrict to these arms.
    pub arms: Option<Vec<String>>,
    /// Parallel runs; 1 is sequential.
    pub jobs: usize,
}

fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn selected_arms<'a>(cfg: &'a ExperimentConfig, only: Option<&[String]>) -> Result<Vec<&'a ArmConfig>, ExperimentError> {
    match only {
        None => Ok(cfg.arms.iter().collect()),
        Some(names) => names
            .iter()
            .map(|n| cfg.arm(n).ok_or_else(|| ExperimentError::Config(format!("unknown arm {n:?}"))))
            .collect(),
    }
}

fn prepare_output(cfg: &ExperimentConfig, out: &OutputLayout, opts: &RunOptions) -> Result<(), ExperimentError> {
    let root = &out.root;
    let non_empty = root.exists() && fs::read_dir(root).map_err(io_err(root))?.next().is_some();
    if non_empty && opts.resume {
        let stored = fs::read_to_string(out.config()).map_err(io_err(&out.config()))?;
        let stored = ExperimentConfig::from_toml(&stored)?;
        if stored != *cfg {
            return Err(ExperimentError::Config(format!(
                "{} holds a different configuration; cannot resume",
                root.display()
            )));
        }
    } else if non_empty && !opts.force {
        return Err(ExperimentError::Config(format!(
            "output directory {} is not empty (use --force to overwrite)",
            root.display()
        )));
    }
    write_text(&out.config(), &cfg.to_toml())
}

fn execute_run(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out: &OutputLayout,
    arm: &ArmConfig,
    repetition: usize,
    opts: &RunOptions,
) -> Result<RunResult, ExperimentError> {
    let seed = cfg.seed_for(repetition);
    let result_path = out.result(&arm.name, repetition);
    if opts.resume && result_path.exists() {
        let text = fs::read_to_string(&result_path).map_err(io_err(&result_path))?;
        if let Ok(prev) = serde_json::from_str::<RunResult>(&text) {
            if prev.ok {
                log::info!("reusing {}/rep_{repetition:03}", arm.name);
                return Ok(prev);
            }
        }
    }
    let dir = out.run_dir(&arm.name, repetition);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let ea = cfg.ea_config(arm, seed, data.dims(), data.num_classes);
    log::info!("run {} rep {repetition} seed {seed}", arm.name);
    let ckpt_dir = out.checkpoints(&arm.name, repetition);
    let result = match run_ea(&ea, &mut TrainingEvaluator { data }, Some(&ckpt_dir)) {
        Ok(outcome) => {
            let path = out.runlog(&arm.name, repetition);
            let file = fs::File::create(&path).map_err(io_err(&path))?;
            outcome.log.write_csv(file).map_err(csv_err(&path))?;
            let budget = ea.epoch_budget as u64;
            let best_at_budget = best_so_far_curve(std::slice::from_ref(&outcome.log), &[budget]).mean[0];
            RunResult {
                arm: arm.name.clone(),
                repetition,
                seed,
                ok: true,
                error: None,
                evaluations: outcome.log.records.len(),
                final_epochs: outcome.log.final_epochs(),
                best_fitness: outcome.best.fitness_or_min(),
                best_at_budget,
                total_flops: outcome.log.total_flops(),
            }
        }
        Err(e) => {
            log::error!("run {} rep {repetition} failed: {e}", arm.name);
            RunResult::failed(&arm.name, repetition, seed, e.to_string())
        }
    };
    write_text(&result_path, &serde_json::to_string_pretty(&result).expect("serializable"))?;
    Ok(result)
}

#[derive(Serialize, Deserialize)]
struct RunRow {
    arm: String,
    repetition: usize,
    seed: u64,
    ok: bool,
    evaluations: usize,
    final_epochs: u64,
    best_fitness: f64,
    best_at_budget: f64,
    total_flops: f64,
    error: String,
}

fn write_runs_csv(path: &Path, results: &[RunResult]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in results {
        w.serialize(RunRow {
            arm: r.arm.clone(),
            repetition: r.repetition,
            seed: r.seed,
            ok: r.ok,
            evaluations: r.evaluations,
            final_epochs: r.final_epochs,
            best_fitness: r.best_fitness,
            best_at_budget: r.best_at_budget,
            total_flops: r.total_flops,
            error: r.error.clone().unwrap_or_default(),
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Per-run results as stored in `runs.csv`.
pub fn read_runs_csv(path: &Path) -> Result<Vec<RunResult>, ExperimentError> {
    let mut out = Vec::new();
    for row in csv::Reader::from_path(path).map_err(csv_err(path))?.deserialize() {
        let r: RunRow = row.map_err(csv_err(path))?;
        out.push(RunResult {
            arm: r.arm,
            repetition: r.repetition,
            seed: r.seed,
            ok: r.ok,
            error: (!r.error.is_empty()).then_some(r.error),
            evaluations: r.evaluations,
            final_epochs: r.final_epochs,
            best_fitness: r.best_fitness,
            best_at_budget: r.best_at_budget,
            total_flops: r.total_flops,
        });
    }
    Ok(out)
}

/// Test accuracy of one fine-tuned checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRow {
    pub arm: String,
    pub repetition: usize,
    pub checkpoint_epochs: u64,
    pub test_accuracy: f64,
}

fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ExperimentError> {
    csv::Reader::from_path(path)
        .map_err(csv_err(path))?
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(csv_err(path))
}

fn write_csv_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), ExperimentError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn finetune_seed(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag | (1 << 62));
    rng
}

/// Trains every requested checkpoint of every successful run to completion
/// and writes `finetune.csv`.
pub fn finetune_checkpoints(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out: &OutputLayout,
    jobs: usize,
) -> Result<Vec<FinetuneRow>, ExperimentError> {
    let results = read_runs_csv(&out.runs_csv())?;
    let schedule = cfg.schedule();
    let tasks: Vec<(String, usize, u64, u64)> = results
        .iter()
        .filter(|r| r.ok)
        .flat_map(|r| cfg.finetune_epochs.iter().map(move |&t| (r.arm.clone(), r.repetition, r.seed, t)))
        .collect();
    let run = |(arm, rep, seed, tag): &(String, usize, u64, u64)| -> Result<Option<FinetuneRow>, ExperimentError> {
        let path = checkpoint_path(&out.checkpoints(arm, *rep), *tag);
        let mut ckpt = match Checkpoint::load(&path) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                return Ok(None);
            }
        };
        let acc = train_to_completion(&mut ckpt.individual, data, &schedule, cfg.ea.batch_size, &mut finetune_seed(*seed, *tag))
            .unwrap_or_else(|e| {
                log::warn!("fine-tuning {} failed: {e}; accuracy recorded as 0", path.display());
                0.0
            });
        log::info!("finetuned {arm} rep {rep} @{tag}: test accuracy {acc:.4}");
        Ok(Some(FinetuneRow {
            arm: arm.clone(),
            repetition: *rep,
            checkpoint_epochs: *tag,
            test_accuracy: acc,
        }))
    };
    let rows: Vec<Option<FinetuneRow>> = with_pool(jobs, || tasks.par_iter().map(run).collect::<Result<_, _>>())?;
    let rows: Vec<FinetuneRow> = rows.into_iter().flatten().collect();
    write_csv_rows(
        &out.finetune_csv(),
        &["arm", "repetition", "checkpoint_epochs", "test_accuracy"],
        &rows,
    )?;
    Ok(rows)
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool")
        .install(f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub checkpoint_epochs: u64,
    pub runs: usize,
    pub min: f64,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessSummaryRow {
    pub arm: String,
    pub runs: usize,
    pub min: f64,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    pub mean_total_flops: f64,
}

/// Rebuilds `summary.csv` and `fitness_summary.csv` from the per-run CSVs.
pub fn write_summaries(out: &OutputLayout) -> Result<(Vec<SummaryRow>, Vec<FitnessSummaryRow>), ExperimentError> {
    let results = read_runs_csv(&out.runs_csv())?;
    let mut by_arm: BTreeMap<&str, Vec<&RunResult>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.ok) {
        by_arm.entry(&r.arm).or_default().push(r);
    }
    let fitness: Vec<FitnessSummaryRow> = by_arm
        .iter()
        .filter_map(|(arm, runs)| {
            let values: Vec<f64> = runs.iter().map(|r| r.best_at_budget).collect();
            summarize(&values).map(|s| FitnessSummaryRow {
                arm: arm.to_string(),
                runs: s.count,
                min: s.min,
                mean: s.mean,
                std: s.std,
                max: s.max,
                mean_total_flops: runs.iter().map(|r| r.total_flops).sum::<f64>() / runs.len() as f64,
            })
        })
        .collect();
    write_csv_rows(
        &out.fitness_summary_csv(),
        &["arm", "runs", "min", "mean", "std", "max", "mean_total_flops"],
        &fitness,
    )?;

    let tests: Vec<FinetuneRow> = if out.finetune_csv().exists() {
        read_csv_rows(&out.finetune_csv())?
    } else {
        Vec::new()
    };
    let mut groups: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for t in &tests {
        groups.entry((t.arm.clone(), t.checkpoint_epochs)).or_default().push(t.test_accuracy);
    }
    let summary: Vec<SummaryRow> = groups
        .into_iter()
        .filter_map(|((arm, tag), v)| {
            summarize(&v).map(|s| SummaryRow {
                arm,
                checkpoint_epochs: tag,
                runs: s.count,
                min: s.min,
                mean: s.mean,
                std: s.std,
                max: s.max,
            })
        })
        .collect();
    write_csv_rows(
        &out.summary_csv(),
        &["arm", "checkpoint_epochs", "runs", "min", "mean", "std", "max"],
        &summary,
    )?;
    Ok((summary, fitness))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub metric: String,
    pub arm_a: String,
    pub arm_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub u: f64,
    pub p: f64,
    pub method: UMethod,
}

/// One-sided U tests ("a greater than b") for every ordered pair of arms,
/// on best fitness at budget and on each fine-tuned checkpoint's test
/// accuracy. Writes `stats.csv`.
pub fn write_stats(out: &OutputLayout) -> Result<Vec<StatsRow>, ExperimentError> {
    let results = read_runs_csv(&out.runs_csv())?;
    let mut metrics: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.ok) {
        metrics
            .entry("best_at_budget".into())
            .or_default()
            .entry(r.arm.clone())
            .or_default()
            .push(r.best_at_budget);
    }
    if out.finetune_csv().exists() {
        for t in read_csv_rows::<FinetuneRow>(&out.finetune_csv())? {
            metrics
                .entry(format!("test_accuracy@{}", t.checkpoint_epochs))
                .or_default()
                .entry(t.arm)
                .or_default()
                .push(t.test_accuracy);
        }
    }
    let mut rows = Vec::new();
    for (metric, arms) in &metrics {
        for (a, va) in arms {
            for (b, vb) in arms {
                if a == b {
                    continue;
                }
                let t = mann_whitney_u_one_sided(va, vb).map_err(|e| ExperimentError::Run(e.to_string()))?;
                rows.push(StatsRow {
                    metric: metric.clone(),
                    arm_a: a.clone(),
                    arm_b: b.clone(),
                    n_a: va.len(),
                    n_b: vb.len(),
                    mean_a: va.iter().sum::<f64>() / va.len() as f64,
                    mean_b: vb.iter().sum::<f64>() / vb.len() as f64,
                    u: t.u,
                    p: t.p,
                    method: t.method,
                });
            }
        }
    }
    write_csv_rows(
        &out.stats_csv(),
        &["metric", "arm_a", "arm_b", "n_a", "n_b", "mean_a", "mean_b", "u", "p", "method"],
        &rows,
    )?;
    Ok(rows)
}

/// Per-arm curves computed from the stored run logs.
#[derive(Clone, Debug)]
pub struct ArmCurves {
    pub arm: String,
    pub best_so_far: Curve,
    pub block_count: Curve,
}

/// Writes `curves/<arm>_best_so_far.csv` and `curves/<arm>_block_count.csv`
/// from the run logs of successful runs.
pub fn emit_plot_data(cfg: &ExperimentConfig, out: &OutputLayout) -> Result<Vec<ArmCurves>, ExperimentError> {
    let results = read_runs_csv(&out.runs_csv())?;
    let dir = out.curves();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut all = Vec::new();
    for arm in &cfg.arms {
        let runs: Vec<&RunResult> = results.iter().filter(|r| r.ok && r.arm == arm.name).collect();
        if runs.is_empty() {
            continue;
        }
        let mut logs = Vec::new();
        let mut labels = Vec::new();
        for r in &runs {
            let path = out.runlog(&arm.name, r.repetition);
            let file = fs::File::open(&path).map_err(io_err(&path))?;
            logs.push(RunLog::read_csv(file).map_err(csv_err(&path))?);
            labels.push(format!("rep_{:03}", r.repetition));
        }
        let e = arm.epochs_per_eval.unwrap_or(cfg.ea.epochs_per_eval) as u64;
        let n = cfg.ea.epoch_budget as u64;
        let best = best_so_far_curve(&logs, &epoch_grid(e, e, n));
        let blocks = block_count_curve(&logs, &epoch_grid(0, e, n));
        let note = format!(
            "grid every {e} epochs up to the budget {n}; each run contributes its latest evaluation at or before the grid epoch (step interpolation)"
        );
        for (suffix, curve, what) in [
            ("best_so_far", &best, "best fitness so far"),
            ("block_count", &blocks, "block count of the latest evaluated network"),
        ] {
            let path = dir.join(format!("{}_{suffix}.csv", arm.name));
            let mut buf = Vec::new();
            write_curve(&mut buf, &format!("{what}; {note}"), &labels, curve).map_err(io_err(&path))?;
            fs::write(&path, buf).map_err(io_err(&path))?;
        }
        all.push(ArmCurves {
            arm: arm.name.clone(),
            best_so_far: best,
            block_count: blocks,
        });
    }
    Ok(all)
}

/// Everything a finished experiment produced.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub results: Vec<RunResult>,
    pub finetune: Vec<FinetuneRow>,
    pub summary: Vec<SummaryRow>,
    pub fitness_summary: Vec<FitnessSummaryRow>,
    pub stats: Vec<StatsRow>,
    pub curves: Vec<ArmCurves>,
}

/// Runs every (arm, repetition) pair, then fine-tunes, summarizes, tests and
/// emits plot data. A run failure is recorded and skipped; the experiment
/// fails only if every run of some arm failed.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out: &OutputLayout,
    opts: &RunOptions,
) -> Result<ExperimentReport, ExperimentError> {
    cfg.check()?;
    let arms = selected_arms(cfg, opts.arms.as_deref())?;
    prepare_output(cfg, out, opts)?;
    let tasks: Vec<(&ArmConfig, usize)> = arms
        .iter()
        .flat_map(|a| (0..cfg.repetitions).map(move |r| (*a, r)))
        .collect();
    let results: Vec<RunResult> = with_pool(opts.jobs, || {
        tasks
            .par_iter()
            .map(|(arm, r)| execute_run(cfg, data, out, arm, *r, opts))
            .collect::<Result<_, _>>()
    })?;
    write_runs_csv(&out.runs_csv(), &results)?;
    for arm in &arms {
        if results.iter().filter(|r| r.arm == arm.name).all(|r| !r.ok) {
            return Err(ExperimentError::Run(format!("every run of arm {} failed", arm.name)));
        }
    }
    let finetune = if cfg.finetune_epochs.is_empty() {
        Vec::new()
    } else {
        finetune_checkpoints(cfg, data, out, opts.jobs)?
    };
    let (summary, fitness_summary) = write_summaries(out)?;
    let stats = write_stats(out)?;
    let curves = emit_plot_data(cfg, out)?;
    Ok(ExperimentReport {
        results,
        finetune,
        summary,
        fitness_summary,
        stats,
        curves,
    })
}
