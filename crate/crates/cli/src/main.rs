use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grokking_core::analysis::SpectralReport;
use grokking_core::experiment::{
    self, io_err, preset_names, Experiment, ExperimentConfig, ExperimentError, Precision, CONFIG_FILE,
};
use grokking_core::plot;
use grokking_core::training::{FINAL_CHECKPOINT, GROK_CHECKPOINT};
use log::info;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_DIVERGED: u8 = 2;
const REPORT_FILE: &str = "spectral_report.json";
const SPECTRUM_FILE: &str = "spectrum.csv";

#[derive(Parser)]
#[command(name = "grok", version, about = "Train, sweep, analyse and plot small grokking transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one seed and write metrics, summary and checkpoints.
    Run(RunArgs),
    /// Train every seed and write per-seed runs plus an aggregate table.
    Sweep(SweepArgs),
    /// Fourier report for a modular-addition checkpoint.
    Analyze(AnalyzeArgs),
    /// Test-accuracy SVGs and a merged CSV from run or sweep directories.
    Plot(PlotArgs),
    /// Write the generated dataset with its train/test split as CSV.
    DumpDataset(DumpArgs),
    /// List the built-in presets.
    Presets,
}

#[derive(Args)]
struct Source {
    /// JSON config file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name, instead of a config file.
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated seeds; replaces the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

impl Source {
    fn load(&self) -> Result<Experiment, ExperimentError> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name),
            (None, None) => unreachable!("clap requires one source"),
        };
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        cfg.resolve()
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    /// Run directory [default: config output_dir, else runs/<name>/seed-<seed>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Train in double precision.
    #[arg(long)]
    f64: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    source: Source,
    /// Sweep directory [default: config output_dir, else runs/<name>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent runs [default: available cores].
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    f64: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run directory holding config.json and checkpoints.
    #[arg(long, required_unless_present = "config")]
    run: Option<PathBuf>,
    /// Config describing the checkpoint's model and dataset (with --checkpoint).
    #[arg(long, requires = "checkpoint", conflicts_with = "run")]
    config: Option<PathBuf>,
    /// Checkpoint file [default: the run's grok checkpoint, else its final one].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seed whose split to evaluate on; replaces the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory [default: the run directory].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of dominant frequencies to keep.
    #[arg(long, default_value_t = 5)]
    top: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Run or sweep directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "plots")]
    out: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    source: Source,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn precision(f64: bool) -> Precision {
    if f64 {
        Precision::F64
    } else {
        Precision::F32
    }
}

fn single_seed(exp: &Experiment) -> Result<u64, ExperimentError> {
    match exp.seeds.as_slice() {
        [s] => Ok(*s),
        many => Err(ExperimentError::Config(format!(
            "this command takes one seed, got {}; pass --seeds or use sweep",
            many.len()
        ))),
    }
}

fn cmd_run(a: RunArgs) -> Result<u8, ExperimentError> {
    let exp = a.source.load()?;
    let seed = single_seed(&exp)?;
    let out = a
        .out
        .or_else(|| exp.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&exp.name).join(format!("seed-{seed}")));
    let s = experiment::run_seed(&exp, seed, &out, precision(a.f64), a.force)?;
    match s.grok_epoch {
        Some(e) => println!("{} seed {seed}: grokked at epoch {e}, peak test acc {:.4}", s.name, s.peak_test_acc),
        None => println!("{} seed {seed}: no grok, peak test acc {:.4}", s.name, s.peak_test_acc),
    }
    println!("wrote {}", out.display());
    if s.diverged {
        eprintln!("error: training diverged; see {}", out.join(experiment::SUMMARY_FILE).display());
        return Ok(EXIT_DIVERGED);
    }
    Ok(0)
}

fn cmd_sweep(a: SweepArgs) -> Result<u8, ExperimentError> {
    let exp = a.source.load()?;
    let out = a
        .out
        .or_else(|| exp.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&exp.name));
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return Err(ExperimentError::Config("--jobs must be at least 1".into()));
    }
    let report = experiment::sweep(&exp, &out, jobs, precision(a.f64), a.force)?;
    print!("{}{}", experiment::Aggregate::table_header(), report.aggregate.table_row());
    for e in &report.errors {
        eprintln!("seed {} failed: {}", e.seed, e.error);
    }
    println!("wrote {}", out.display());
    if report.summaries.iter().any(|s| s.diverged) {
        eprintln!("error: at least one seed diverged");
        return Ok(EXIT_DIVERGED);
    }
    Ok(0)
}

fn write_report(report: &SpectralReport, out: &Path, force: bool) -> Result<(), ExperimentError> {
    let report_path = out.join(REPORT_FILE);
    if report_path.exists() && !force {
        return Err(ExperimentError::Exists(report_path));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    fs::write(&report_path, json).map_err(io_err(&report_path))?;
    let spectrum_path = out.join(SPECTRUM_FILE);
    let mut csv = Vec::new();
    report.write_spectrum_csv(&mut csv).map_err(io_err(&spectrum_path))?;
    fs::write(&spectrum_path, csv).map_err(io_err(&spectrum_path))
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<u8, ExperimentError> {
    let (config_path, checkpoint, default_out) = match (&a.run, &a.config) {
        (Some(run), _) => {
            let ckpt = a.checkpoint.clone().unwrap_or_else(|| {
                let grok = run.join(GROK_CHECKPOINT);
                if grok.is_file() {
                    grok
                } else {
                    run.join(FINAL_CHECKPOINT)
                }
            });
            (run.join(CONFIG_FILE), ckpt, run.clone())
        }
        (None, Some(cfg)) => {
            let ckpt = a.checkpoint.clone().expect("clap requires --checkpoint");
            let dir = ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
            (cfg.clone(), ckpt, dir)
        }
        (None, None) => unreachable!("clap requires --run or --config"),
    };
    let mut cfg = ExperimentConfig::load(&config_path)?;
    if let Some(seeds) = a.seeds {
        cfg.seeds = seeds;
    }
    let mut exp = cfg.resolve()?;
    exp.seeds.truncate(1);
    info!("analysing {} with split seed {}", checkpoint.display(), exp.seeds[0]);
    let report = experiment::analyze_checkpoint(&exp, &checkpoint, a.top)?;
    let out = a.out.unwrap_or(default_out);
    write_report(&report, &out, a.force)?;
    let freqs: Vec<String> = report.top_frequencies.iter().map(|f| f.k.to_string()).collect();
    println!(
        "top frequencies [{}], ablation acc {:.4}, test acc {:.4}{}",
        freqs.join(", "),
        report.ablation_accuracy,
        report.test_accuracy,
        if report.grokked { "" } else { " (not grokked)" }
    );
    println!("wrote {}", out.join(REPORT_FILE).display());
    Ok(0)
}

fn cmd_plot(a: PlotArgs) -> Result<u8, ExperimentError> {
    let series = plot::collect_series(&a.runs)?;
    for path in plot::write_plots(&series, &a.out)? {
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn cmd_dump(a: DumpArgs) -> Result<u8, ExperimentError> {
    let exp = a.source.load()?;
    let seed = single_seed(&exp)?;
    if a.out.exists() && !a.force {
        return Err(ExperimentError::Exists(a.out));
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let dataset = exp.task.generate(seed)?;
    let file = fs::File::create(&a.out).map_err(io_err(&a.out))?;
    let mut w = std::io::BufWriter::new(file);
    dataset.write_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(&a.out))?;
    println!(
        "wrote {} ({} train, {} test)",
        a.out.display(),
        dataset.train_idx.len(),
        dataset.test_idx.len()
    );
    Ok(0)
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
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Plot(a) => cmd_plot(a),
        Command::DumpDataset(a) => cmd_dump(a),
        Command::Presets => {
            for name in preset_names() {
                let exp = experiment::preset(name).expect("listed preset exists");
                println!("{name:<30} {}", exp.comment);
            }
            Ok(0)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
