//! Experiment configuration, named presets, single runs and seed sweeps.
//!
//! A config file is one JSON document that either names a preset (optionally
//! with a few training overrides) or spells out task, model and training
//! settings. Run seed `s` drives the weight init, the train/test split and the
//! recorded training seed alike.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, SpectralReport};
use crate::checkpoint::{self, CheckpointError};
use crate::model::{AttentionMode, ModelConfig, NormMode};
use crate::tasks::{Task, TaskError};
use crate::training::{train, MetricRow, RunRecord, TrainConfig, TrainError};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const TABLE_FILE: &str = "table.md";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("{0} already exists and is not empty; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl ExperimentError {
    /// Process exit code: 1 for usage or configuration problems, 3 for I/O.
    /// Divergence is not an error; callers map it to 2 from the summary.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Io { .. } | ExperimentError::Checkpoint(CheckpointError::Io(_)) => 3,
            ExperimentError::Train(TrainError::Io(_) | TrainError::Checkpoint(CheckpointError::Io(_))) => 3,
            _ => 1,
        }
    }
}

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Training fields a preset-based config may change.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grok_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halt_at_test_acc: Option<f64>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        *self == Overrides::default()
    }

    fn apply(&self, t: &mut TrainConfig) {
        let Overrides {
            learning_rate,
            weight_decay,
            beta2,
            max_epochs,
            eval_every,
            grok_threshold,
            halt_at_test_acc,
        } = self.clone();
        t.learning_rate = learning_rate.unwrap_or(t.learning_rate);
        t.weight_decay = weight_decay.unwrap_or(t.weight_decay);
        t.beta2 = beta2.unwrap_or(t.beta2);
        t.max_epochs = max_epochs.unwrap_or(t.max_epochs);
        t.eval_every = eval_every.unwrap_or(t.eval_every);
        t.grok_threshold = grok_threshold.unwrap_or(t.grok_threshold);
        t.halt_at_test_acc = halt_at_test_acc.or(t.halt_at_test_acc);
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// The on-disk config document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Overrides::is_empty")]
    pub overrides: Overrides,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ExperimentError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn preset(name: &str) -> Self {
        ExperimentConfig {
            preset: Some(name.to_string()),
            name: None,
            comment: None,
            task: None,
            model: None,
            train: None,
            overrides: Overrides::default(),
            seeds: default_seeds(),
            output_dir: None,
        }
    }

    pub fn resolve(&self) -> Result<Experiment, ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds must list at least one seed".into()));
        }
        let mut exp = match &self.preset {
            Some(p) => {
                if self.task.is_some() || self.model.is_some() || self.train.is_some() {
                    return Err(ExperimentError::Config(
                        "a preset config cannot also set task, model or train; use overrides".into(),
                    ));
                }
                let mut exp = preset(p).ok_or_else(|| ExperimentError::UnknownPreset(p.clone()))?;
                self.overrides.apply(&mut exp.train);
                exp
            }
            None => {
                if !self.overrides.is_empty() {
                    return Err(ExperimentError::Config("overrides apply only to presets".into()));
                }
                let missing = |f: &str| ExperimentError::Config(format!("explicit config needs `{f}`"));
                Experiment {
                    name: self.name.clone().ok_or_else(|| missing("name"))?,
                    comment: String::new(),
                    task: self.task.ok_or_else(|| missing("task"))?,
                    model: self.model.clone().ok_or_else(|| missing("model"))?,
                    train: self.train.clone().ok_or_else(|| missing("train"))?,
                    seeds: Vec::new(),
                    output_dir: None,
                }
            }
        };
        if let Some(n) = &self.name {
            exp.name = n.clone();
        }
        if let Some(c) = &self.comment {
            exp.comment = c.clone();
        }
        exp.seeds = self.seeds.clone();
        exp.output_dir = self.output_dir.clone();
        exp.validate()?;
        Ok(exp)
    }
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub name: String,
    /// Which published result this configuration corresponds to.
    pub comment: String,
    pub task: Task,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Experiment {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.model.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.train.validate()?;
        if self.task.vocab_size() != self.model.vocab_size {
            return Err(ExperimentError::Config(format!(
                "task vocab {} does not match model vocab {}",
                self.task.vocab_size(),
                self.model.vocab_size
            )));
        }
        if self.model.fourier_init && !matches!(self.task, Task::ModAdd { .. }) {
            return Err(ExperimentError::Config("fourier_init applies to modular addition only".into()));
        }
        Ok(())
    }

    /// Explicit config that resolves back to this experiment.
    pub fn to_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            preset: None,
            name: Some(self.name.clone()),
            comment: Some(self.comment.clone()),
            task: Some(self.task),
            model: Some(self.model.clone()),
            train: Some(self.train.clone()),
            overrides: Overrides::default(),
            seeds: self.seeds.clone(),
            output_dir: self.output_dir.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_config()).expect("config serializes") + "\n"
    }

    /// Model and training settings for one run seed.
    pub fn for_seed(&self, seed: u64) -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            init_seed: seed,
            ..self.model.clone()
        };
        let train = TrainConfig {
            train_seed: seed,
            ..self.train.clone()
        };
        (model, train)
    }
}

struct PresetRow {
    name: &'static str,
    comment: &'static str,
    task: Task,
    norm: NormMode,
    fourier: bool,
    attention: AttentionMode,
    lr: f64,
    wd: f64,
    beta2: f64,
    max_epochs: u64,
}

const ZP: Task = Task::ModAdd { p: 113 };
const S5: Task = Task::S5Compose;

#[rustfmt::skip]
const PRESETS: &[PresetRow] = {
    use AttentionMode::{Learned as L, Uniform as U};
    use NormMode::{LayerNorm as Ln, RmsNorm as Rms, Spherical as Sph};
    &[
        PresetRow { name: "zp-baseline-ln-lr1e-4", comment: "grok-epoch table, lr 1e-4: LayerNorm baseline", task: ZP, norm: Ln, fourier: false, attention: L, lr: 1e-4, wd: 1.0, beta2: 0.999, max_epochs: 100_000 },
        PresetRow { name: "zp-baseline-rms-lr1e-4", comment: "grok-epoch table, lr 1e-4: RMSNorm baseline", task: ZP, norm: Rms, fourier: false, attention: L, lr: 1e-4, wd: 1.0, beta2: 0.999, max_epochs: 100_000 },
        PresetRow { name: "zp-sphere-wd1-lr1e-4", comment: "grok-epoch table, lr 1e-4: bounded sphere, weight decay 1.0", task: ZP, norm: Sph, fourier: false, attention: L, lr: 1e-4, wd: 1.0, beta2: 0.999, max_epochs: 15_000 },
        PresetRow { name: "zp-sphere-wd0-lr1e-4", comment: "grok-epoch table, lr 1e-4: bounded sphere, weight decay 0.0", task: ZP, norm: Sph, fourier: false, attention: L, lr: 1e-4, wd: 0.0, beta2: 0.999, max_epochs: 15_000 },
        PresetRow { name: "zp-sphere-fourier-wd1-lr1e-4", comment: "grok-epoch table, lr 1e-4: bounded sphere + Fourier init, weight decay 1.0", task: ZP, norm: Sph, fourier: true, attention: L, lr: 1e-4, wd: 1.0, beta2: 0.999, max_epochs: 15_000 },
        PresetRow { name: "zp-sphere-fourier-wd0-lr1e-4", comment: "grok-epoch table, lr 1e-4: bounded sphere + Fourier init, weight decay 0.0", task: ZP, norm: Sph, fourier: true, attention: L, lr: 1e-4, wd: 0.0, beta2: 0.999, max_epochs: 15_000 },
        PresetRow { name: "zp-baseline-ln-lr6e-4", comment: "grok-epoch table, lr 6e-4: LayerNorm baseline", task: ZP, norm: Ln, fourier: false, attention: L, lr: 6e-4, wd: 1.0, beta2: 0.999, max_epochs: 15_000 },
        PresetRow { name: "zp-baseline-rms-lr6e-4", comment: "grok-epoch table, lr 6e-4: RMSNorm baseline", task: ZP, norm: Rms, fourier: false, attention: L, lr: 6e-4, wd: 1.0, beta2: 0.999, max_epochs: 15_000 },
        PresetRow { name: "zp-sphere-wd1-lr6e-4", comment: "grok-epoch table, lr 6e-4: bounded sphere, weight decay 1.0", task: ZP, norm: Sph, fourier: false, attention: L, lr: 6e-4, wd: 1.0, beta2: 0.999, max_epochs: 15_000 },
        PresetRow { name: "zp-sphere-wd0-lr6e-4", comment: "grok-epoch table, lr 6e-4: bounded sphere, weight decay 0.0", task: ZP, norm: Sph, fourier: false, attention: L, lr: 6e-4, wd: 0.0, beta2: 0.999, max_epochs: 15_000 },
        PresetRow { name: "zp-sphere-fourier-wd1-lr6e-4", comment: "grok-epoch table, lr 6e-4: bounded sphere + Fourier init, weight decay 1.0", task: ZP, norm: Sph, fourier: true, attention: L, lr: 6e-4, wd: 1.0, beta2: 0.999, max_epochs: 15_000 },
        PresetRow { name: "zp-sphere-fourier-wd0-lr6e-4", comment: "grok-epoch table, lr 6e-4: bounded sphere + Fourier init, weight decay 0.0", task: ZP, norm: Sph, fourier: true, attention: L, lr: 6e-4, wd: 0.0, beta2: 0.999, max_epochs: 15_000 },
        PresetRow { name: "zp-uniform-attn-ln", comment: "uniform-attention table: LayerNorm baseline, weight decay 1.0", task: ZP, norm: Ln, fourier: false, attention: U, lr: 6e-4, wd: 1.0, beta2: 0.98, max_epochs: 20_000 },
        PresetRow { name: "zp-uniform-attn-sphere-wd1", comment: "uniform-attention table: bounded sphere, weight decay 1.0", task: ZP, norm: Sph, fourier: false, attention: U, lr: 6e-4, wd: 1.0, beta2: 0.98, max_epochs: 20_000 },
        PresetRow { name: "zp-uniform-attn-sphere-wd0", comment: "uniform-attention table: bounded sphere, weight decay 0.0", task: ZP, norm: Sph, fourier: false, attention: U, lr: 6e-4, wd: 0.0, beta2: 0.98, max_epochs: 20_000 },
        PresetRow { name: "s5-baseline-ln", comment: "S5 table: LayerNorm baseline", task: S5, norm: Ln, fourier: false, attention: L, lr: 1e-3, wd: 1.0, beta2: 0.999, max_epochs: 100_000 },
        PresetRow { name: "s5-baseline-rms", comment: "S5 table: RMSNorm baseline", task: S5, norm: Rms, fourier: false, attention: L, lr: 1e-3, wd: 1.0, beta2: 0.999, max_epochs: 100_000 },
        PresetRow { name: "s5-sphere-wd1", comment: "S5 table: bounded sphere, weight decay 1.0", task: S5, norm: Sph, fourier: false, attention: L, lr: 1e-3, wd: 1.0, beta2: 0.999, max_epochs: 100_000 },
        PresetRow { name: "s5-sphere-wd0", comment: "S5 table: bounded sphere, weight decay 0.0", task: S5, norm: Sph, fourier: false, attention: L, lr: 1e-3, wd: 0.0, beta2: 0.999, max_epochs: 100_000 },
    ]
};

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.name).collect()
}

pub fn preset(name: &str) -> Option<Experiment> {
    let row = PRESETS.iter().find(|p| p.name == name)?;
    let vocab = row.task.vocab_size();
    let base = match row.norm {
        NormMode::Spherical => ModelConfig::spherical(vocab),
        norm => ModelConfig {
            norm_mode: norm,
            ..ModelConfig::standard(vocab)
        },
    };
    Some(Experiment {
        name: row.name.to_string(),
        comment: row.comment.to_string(),
        task: row.task,
        model: ModelConfig {
            fourier_init: row.fourier,
            attention_mode: row.attention,
            ..base
        },
        train: TrainConfig {
            learning_rate: row.lr,
            weight_decay: row.wd,
            beta2: row.beta2,
            max_epochs: row.max_epochs,
            ..TrainConfig::default()
        },
        seeds: default_seeds(),
        output_dir: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub comment: String,
    pub seed: u64,
    pub precision: Precision,
    pub grok_epoch: Option<u64>,
    pub peak_test_acc: f64,
    pub diverged: bool,
    pub wall_time_seconds: f64,
    pub final_metrics: Option<MetricRow>,
    pub config: ExperimentConfig,
}

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<(), ExperimentError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(io_err(dir))?;
        if entries.next().is_some() && !force {
            return Err(ExperimentError::Exists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn record_to_summary(exp: &Experiment, seed: u64, precision: Precision, record: &RunRecord) -> RunSummary {
    let echo = Experiment {
        seeds: vec![seed],
        ..exp.clone()
    };
    RunSummary {
        name: exp.name.clone(),
        comment: exp.comment.clone(),
        seed,
        precision,
        grok_epoch: record.grok_epoch,
        peak_test_acc: record.peak_test_acc,
        diverged: record.diverged,
        wall_time_seconds: record.wall_time_seconds,
        final_metrics: record.final_metrics().cloned(),
        config: echo.to_config(),
    }
}

/// Trains one seed and writes `config.json`, `metrics.csv`, `summary.json`
/// and checkpoints into `dir`.
pub fn run_seed(exp: &Experiment, seed: u64, dir: &Path, precision: Precision, force: bool) -> Result<RunSummary, ExperimentError> {
    prepare_dir(dir, force)?;
    let echo = Experiment {
        seeds: vec![seed],
        ..exp.clone()
    };
    write_file(&dir.join(CONFIG_FILE), echo.to_json().as_bytes())?;
    let dataset = exp.task.generate(seed)?;
    let (model, train_cfg) = exp.for_seed(seed);
    info!("{} seed {seed}: training up to {} epochs", exp.name, train_cfg.max_epochs);
    let record = match precision {
        Precision::F32 => train::<f32>(&model, &dataset, &train_cfg, Some(dir))?.record,
        Precision::F64 => train::<f64>(&model, &dataset, &train_cfg, Some(dir))?.record,
    };
    let mut csv = Vec::new();
    record.write_metrics_csv(&mut csv).map_err(io_err(dir))?;
    write_file(&dir.join(METRICS_FILE), &csv)?;
    let summary = record_to_summary(exp, seed, precision, &record);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write_file(&dir.join(SUMMARY_FILE), json.as_bytes())?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub name: String,
    pub comment: String,
    pub runs: usize,
    /// Seeds that never reached the grok threshold (diverged runs included).
    pub failures: usize,
    /// Grok statistics over successful seeds only; std is the sample standard
    /// deviation, 0 for a single seed.
    pub mean_grok_epoch: Option<f64>,
    pub std_grok_epoch: Option<f64>,
    pub min_grok_epoch: Option<u64>,
    pub max_grok_epoch: Option<u64>,
    pub mean_peak_acc: f64,
    pub max_peak_acc: f64,
    /// Seeds whose peak test accuracy reached exactly 1.
    pub perfect_runs: usize,
}

pub fn aggregate(summaries: &[RunSummary]) -> Aggregate {
    let mut sorted: Vec<&RunSummary> = summaries.iter().collect();
    sorted.sort_by_key(|s| s.seed);
    let epochs: Vec<f64> = sorted.iter().filter_map(|s| s.grok_epoch).map(|e| e as f64).collect();
    let n = epochs.len();
    let mean = (n > 0).then(|| epochs.iter().sum::<f64>() / n as f64);
    let std = mean.map(|m| {
        if n < 2 {
            0.0
        } else {
            (epochs.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        }
    });
    let peaks: Vec<f64> = sorted.iter().map(|s| s.peak_test_acc).collect();
    let first = sorted.first();
    Aggregate {
        name: first.map(|s| s.name.clone()).unwrap_or_default(),
        comment: first.map(|s| s.comment.clone()).unwrap_or_default(),
        runs: sorted.len(),
        failures: sorted.len() - n,
        mean_grok_epoch: mean,
        std_grok_epoch: std,
        min_grok_epoch: sorted.iter().filter_map(|s| s.grok_epoch).min(),
        max_grok_epoch: sorted.iter().filter_map(|s| s.grok_epoch).max(),
        mean_peak_acc: if peaks.is_empty() { 0.0 } else { peaks.iter().sum::<f64>() / peaks.len() as f64 },
        max_peak_acc: peaks.iter().copied().fold(0.0, f64::max),
        perfect_runs: peaks.iter().filter(|&&p| p >= 1.0).count(),
    }
}

impl Aggregate {
    pub fn table_header() -> &'static str {
        "| Architecture | Mean Grok Epoch | Std Dev | Min | Max | Failures | Mean Peak Acc. | Max Peak Acc. | Success Rate (100% Acc) |\n\
         |---|---|---|---|---|---|---|---|---|\n"
    }

    pub fn table_row(&self) -> String {
        let opt_f = |v: Option<f64>| v.map_or("--".to_string(), |x| format!("{x:.0}"));
        let opt_u = |v: Option<u64>| v.map_or("--".to_string(), |x| x.to_string());
        format!(
            "| {} | {} | {} | {} | {} | {} / {} | {:.2}% | {:.2}% | {} / {} |\n",
            self.name,
            opt_f(self.mean_grok_epoch),
            opt_f(self.std_grok_epoch),
            opt_u(self.min_grok_epoch),
            opt_u(self.max_grok_epoch),
            self.failures,
            self.runs,
            100.0 * self.mean_peak_acc,
            100.0 * self.max_peak_acc,
            self.perfect_runs,
            self.runs
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedError {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub aggregate: Aggregate,
    pub summaries: Vec<RunSummary>,
    /// Seeds whose run failed outright (not merely without grokking).
    pub errors: Vec<SeedError>,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Runs every seed on a pool of `jobs` worker threads, one sub-directory per
/// seed, then writes `aggregate.json` and `table.md` into `out`.
pub fn sweep(exp: &Experiment, out: &Path, jobs: usize, precision: Precision, force: bool) -> Result<SweepReport, ExperimentError> {
    if exp.seeds.is_empty() {
        return Err(ExperimentError::Config("sweep needs at least one seed".into()));
    }
    prepare_dir(out, force)?;
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    let workers = jobs.clamp(1, exp.seeds.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = exp.seeds.get(i) else { break };
                let r = run_seed(exp, seed, &seed_dir(out, seed), precision, force);
                if let Err(e) = &r {
                    warn!("seed {seed} failed: {e}");
                }
                results.lock().expect("results lock").push((seed, r));
            });
        }
    });
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(s, _)| *s);
    let mut summaries = Vec::new();
    let mut errors = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(s) => summaries.push(s),
            Err(e) => errors.push(SeedError {
                seed,
                error: e.to_string(),
            }),
        }
    }
    let report = SweepReport {
        aggregate: aggregate(&summaries),
        summaries,
        errors,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_file(&out.join(AGGREGATE_FILE), json.as_bytes())?;
    let table = format!("{}{}", Aggregate::table_header(), report.aggregate.table_row());
    write_file(&out.join(TABLE_FILE), table.as_bytes())?;
    Ok(report)
}

/// Reads every `seed-*/summary.json` under a sweep directory.
pub fn read_summaries(out: &Path) -> Result<Vec<RunSummary>, ExperimentError> {
    let mut summaries = Vec::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)
        .map_err(io_err(out))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SUMMARY_FILE).is_file())
        .collect();
    dirs.sort();
    for d in dirs {
        let path = d.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let s = serde_json::from_str(&text).map_err(|e| ExperimentError::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        summaries.push(s);
    }
    Ok(summaries)
}

/// Spectral report for a checkpoint of the first seed in `exp`.
pub fn analyze_checkpoint(exp: &Experiment, checkpoint_path: &Path, n_top: usize) -> Result<SpectralReport, ExperimentError> {
    if !matches!(exp.task, Task::ModAdd { .. }) {
        return Err(AnalysisError::UnsupportedTask(exp.task).into());
    }
    let seed = exp.seeds[0];
    let (model, train_cfg) = exp.for_seed(seed);
    let params = checkpoint::load::<f64>(checkpoint_path, &model).map_err(|e| match e {
        CheckpointError::Io(source) => ExperimentError::Io {
            path: checkpoint_path.to_path_buf(),
            source,
        },
        other => other.into(),
    })?;
    let dataset = exp.task.generate(seed)?;
    let report = analysis::analyze(&params, &model, &dataset, n_top, train_cfg.grok_threshold)?;
    if !report.grokked {
        warn!(
            "test accuracy {:.4} is below the grok threshold {}; report is flagged as not grokked",
            report.test_accuracy, train_cfg.grok_threshold
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Experiment {
        let cfg = ExperimentConfig::from_json(
            r#"{
                "name": "toy",
                "task": {"kind": "mod_add", "p": 5},
                "model": {"vocab_size": 6, "seq_len": 3, "d_model": 8, "n_heads": 2, "d_head": 4, "d_mlp": 16,
                          "norm_mode": "spherical", "unembed_mode": {"kind": "bounded_cosine", "tau": 10.0},
                          "attention_mode": "learned", "fourier_init": false, "fourier_freqs": [], "init_seed": 0},
                "train": {"learning_rate": 1e-3, "weight_decay": 0.0, "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8,
                          "max_epochs": 4, "eval_every": 2, "grok_threshold": 0.99, "train_seed": 0},
                "seeds": [3, 1]
            }"#,
        )
        .unwrap();
        cfg.resolve().unwrap()
    }

    #[test]
    fn every_preset_round_trips() {
        for name in preset_names() {
            let exp = ExperimentConfig::preset(name).resolve().unwrap();
            assert!(!exp.comment.is_empty());
            let text = exp.to_json();
            let back = ExperimentConfig::from_json(&text).unwrap().resolve().unwrap();
            assert_eq!(back, exp, "{name}");
            assert_eq!(back.to_json(), text, "{name}");
        }
    }

    #[test]
    fn preset_table_covers_the_sweep_grid() {
        let names = preset_names();
        assert_eq!(names.len(), 19);
        let s5 = preset("s5-sphere-wd0").unwrap();
        assert_eq!(s5.model.vocab_size, 121);
        assert_eq!(s5.train.learning_rate, 1e-3);
        let u = preset("zp-uniform-attn-sphere-wd1").unwrap();
        assert_eq!(u.model.attention_mode, AttentionMode::Uniform);
        assert_eq!(u.train.beta2, 0.98);
        let f = preset("zp-sphere-fourier-wd0-lr6e-4").unwrap();
        assert!(f.model.fourier_init);
        assert_eq!(f.train.weight_decay, 0.0);
        assert_eq!(f.model.norm_mode, NormMode::Spherical);
    }

    #[test]
    fn overrides_apply_to_presets_only() {
        let cfg = ExperimentConfig::from_json(
            r#"{"preset": "zp-sphere-wd1-lr1e-4", "overrides": {"max_epochs": 7, "halt_at_test_acc": 1.0}, "seeds": [4]}"#,
        )
        .unwrap();
        let exp = cfg.resolve().unwrap();
        assert_eq!(exp.train.max_epochs, 7);
        assert_eq!(exp.train.halt_at_test_acc, Some(1.0));
        assert_eq!(exp.seeds, vec![4]);
        assert_eq!(exp.train.learning_rate, 1e-4);

        let mut explicit = toy().to_config();
        explicit.overrides.max_epochs = Some(3);
        assert!(matches!(explicit.resolve(), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn schema_errors_name_the_field() {
        let err = ExperimentConfig::from_json(r#"{"preset": "zp-sphere-wd1-lr1e-4", "overrides": {"lr": 1}}"#).unwrap_err();
        match err {
            ExperimentError::Schema { path, message } => {
                assert_eq!(path, "overrides.lr");
                assert!(message.contains("lr"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
        let err = ExperimentConfig::from_json(r#"{"preset": "zp-sphere-wd1-lr1e-4", "seeds": ["a"]}"#).unwrap_err();
        assert!(matches!(err, ExperimentError::Schema { ref path, .. } if path == "seeds[0]"), "{err}");
        assert!(matches!(
            ExperimentConfig::preset("nope").resolve(),
            Err(ExperimentError::UnknownPreset(_))
        ));
        let mut cfg = ExperimentConfig::preset("s5-baseline-ln");
        cfg.seeds.clear();
        assert_eq!(cfg.resolve().unwrap_err().exit_code(), 1);
    }

    #[test]
    fn vocab_mismatch_is_a_config_error() {
        let mut cfg = toy().to_config();
        cfg.task = Some(Task::ModAdd { p: 7 });
        assert!(matches!(cfg.resolve(), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn seed_drives_init_and_train_seed() {
        let (m, t) = toy().for_seed(42);
        assert_eq!((m.init_seed, t.train_seed), (42, 42));
    }

    fn summary(seed: u64, grok: Option<u64>, peak: f64) -> RunSummary {
        RunSummary {
            name: "x".into(),
            comment: "c".into(),
            seed,
            precision: Precision::F32,
            grok_epoch: grok,
            peak_test_acc: peak,
            diverged: false,
            wall_time_seconds: 1.0,
            final_metrics: None,
            config: toy().to_config(),
        }
    }

    #[test]
    fn aggregate_uses_sample_std_and_skips_failures() {
        let runs = [
            summary(2, Some(1000), 1.0),
            summary(0, Some(2000), 1.0),
            summary(1, None, 0.5),
            summary(3, Some(3000), 0.995),
        ];
        let a = aggregate(&runs);
        assert_eq!((a.runs, a.failures, a.perfect_runs), (4, 1, 2));
        assert_eq!(a.mean_grok_epoch, Some(2000.0));
        assert_eq!(a.std_grok_epoch, Some(1000.0));
        assert_eq!((a.min_grok_epoch, a.max_grok_epoch), (Some(1000), Some(3000)));
        assert!((a.mean_peak_acc - 0.873_75).abs() < 1e-12);
        assert_eq!(a.max_peak_acc, 1.0);
        assert!(a.table_row().contains("| 1 / 4 |"));

        let one = aggregate(&runs[..1]);
        assert_eq!(one.std_grok_epoch, Some(0.0));
        let none = aggregate(&runs[2..3]);
        assert_eq!(none.mean_grok_epoch, None);
        assert!(none.table_row().starts_with("| x | -- | -- |"));
    }

    #[test]
    fn run_writes_outputs_and_refuses_reuse() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("run");
        let exp = toy();
        let s = run_seed(&exp, 3, &run_dir, Precision::F64, false).unwrap();
        for f in [CONFIG_FILE, METRICS_FILE, SUMMARY_FILE, crate::training::FINAL_CHECKPOINT] {
            assert!(run_dir.join(f).is_file(), "{f}");
        }
        assert_eq!(s.seed, 3);
        assert_eq!(s.config.seeds, vec![3]);
        assert_eq!(s.final_metrics.as_ref().unwrap().epoch, 4);
        let echo = ExperimentConfig::load(&run_dir.join(CONFIG_FILE)).unwrap().resolve().unwrap();
        assert_eq!(echo.for_seed(3), exp.for_seed(3));

        let err = run_seed(&exp, 3, &run_dir, Precision::F64, false).unwrap_err();
        assert!(matches!(err, ExperimentError::Exists(_)));
        assert_eq!(err.exit_code(), 1);
        run_seed(&exp, 3, &run_dir, Precision::F64, true).unwrap();
    }

    #[test]
    fn zero_epochs_records_initial_metrics_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut exp = toy();
        exp.train.max_epochs = 0;
        let s = run_seed(&exp, 0, dir.path(), Precision::F32, false).unwrap();
        let rows = crate::plot::read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].epoch, 0);
        assert_eq!(s.final_metrics.unwrap(), rows[0]);
    }

    #[test]
    fn sweep_aggregate_matches_summaries_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let report = sweep(&toy(), dir.path(), 2, Precision::F32, false).unwrap();
        assert_eq!(report.summaries.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![1, 3]);
        assert!(report.errors.is_empty());
        let on_disk = read_summaries(dir.path()).unwrap();
        assert_eq!(aggregate(&on_disk), report.aggregate);
        let text = fs::read_to_string(dir.path().join(AGGREGATE_FILE)).unwrap();
        let parsed: SweepReport = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, report);
        let table = fs::read_to_string(dir.path().join(TABLE_FILE)).unwrap();
        assert_eq!(table.lines().count(), 3);
    }

    #[test]
    fn analysis_rejects_s5_and_missing_checkpoints() {
        let s5 = preset("s5-sphere-wd1").unwrap();
        let err = analyze_checkpoint(&s5, Path::new("/nonexistent"), 5).unwrap_err();
        assert!(matches!(err, ExperimentError::Analysis(AnalysisError::UnsupportedTask(_))));
        let err = analyze_checkpoint(&toy(), Path::new("/nonexistent/ckpt.bin"), 1).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
