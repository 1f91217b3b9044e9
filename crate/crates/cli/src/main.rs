//! `dstlab` command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures (missing data, divergence, failed sweep runs, a failing
//! gradient check).

mod analyze;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dstlab::config::{self, ExperimentConfig, SweepSpec, DATA_DIR_ENV};
use dstlab::gradcheck;
use dstlab::presets::Preset;
use dstlab::runner::{self, RunStatus};
use dstlab::DstError;

const DEFAULT_OUTPUT: &str = "runs";
const GRADCHECK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "dstlab", version, about = "Dynamic sparse training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one config and write its run directory.
    Train {
        config: PathBuf,
        /// Output root; defaults to the config's output_dir, then ./runs.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Dataset root; overrides DSTLAB_DATA_DIR.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Run every grid point of a sweep file, skipping completed runs.
    Sweep {
        spec: PathBuf,
        /// Concurrent runs.
        #[arg(long, short, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Post-hoc analyses over run directories.
    #[command(subcommand)]
    Analyze(analyze::AnalyzeCommand),
    /// Compare analytic gradients of a preset with central differences.
    Gradcheck {
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates sampled per weight or bias tensor.
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
    },
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: 1, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl From<DstError> for Failure {
    fn from(e: DstError) -> Self {
        let code = if matches!(e, DstError::Config(_)) { 1 } else { 2 };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

pub fn data_dir(flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

fn config_output_dir(path: &Path) -> CliResult<Option<PathBuf>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    let pairs = config::parse_pairs(&text, &config::KEYS)?;
    Ok(pairs.get("output_dir").map(PathBuf::from))
}

fn train(config: &Path, output: Option<PathBuf>, data_dir: Option<PathBuf>) -> CliResult {
    let cfg = ExperimentConfig::from_file(config)?;
    let output = match output {
        Some(o) => o,
        None => config_output_dir(config)?.unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT)),
    };
    let data = cfg.data.load(data_dir.as_deref())?;
    let (dir, record) = runner::execute_run(&cfg, &data, &output)?;
    println!("run: {}", dir.display());
    println!("test_accuracy: {:.6}", record.test_acc);
    println!("test_loss: {:.6}", record.test_loss);
    println!("final_itop: {:.6}", record.final_itop());
    Ok(())
}

fn sweep(spec_path: &Path, jobs: usize, output: Option<PathBuf>, data_dir: Option<PathBuf>) -> CliResult {
    if jobs == 0 {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    let spec = SweepSpec::from_file(spec_path)?;
    let output = output
        .or_else(|| spec.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
    let report = runner::run_sweep(&spec, &output, jobs, data_dir.as_deref())?;
    for o in &report.outcomes {
        if let RunStatus::Failed(msg) = &o.status {
            eprintln!("run {} failed: {msg}", o.config.run_id());
        }
    }
    let skipped = report.outcomes.len() - report.executed() - report.failed();
    println!(
        "{} runs: {} executed, {} skipped, {} failed; manifest at {}",
        report.outcomes.len(),
        report.executed(),
        skipped,
        report.failed(),
        output.join(runner::MANIFEST_FILE).display()
    );
    if report.failed() > 0 {
        return Err(Failure::runtime(format!("{} runs failed", report.failed())));
    }
    Ok(())
}

fn gradcheck_cmd(preset: &str, seed: u64, samples: usize, batch: usize) -> CliResult {
    let preset: Preset = preset.parse()?;
    if samples == 0 || batch == 0 {
        return Err(Failure::usage("--samples and --batch must be positive"));
    }
    let report = gradcheck::check_preset(&preset, seed, batch, samples)?;
    println!("preset: {preset}");
    println!("checked: {}", report.checked);
    println!("skipped_nonsmooth: {}", report.skipped);
    println!("max_relative_error: {:e}", report.max_rel_error);
    if report.passes(GRADCHECK_TOLERANCE) {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(Failure::runtime(format!(
            "max relative error {:e} at {:?} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error, report.worst
        )))
    }
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train { config, output, data_dir: d } => train(&config, output, data_dir(d)),
        Command::Sweep { spec, jobs, output, data_dir: d } => sweep(&spec, jobs, output, data_dir(d)),
        Command::Analyze(cmd) => analyze::run(cmd),
        Command::Gradcheck { preset, seed, samples, batch } => gradcheck_cmd(&preset, seed, samples, batch),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
