//! `dstlab analyze` subcommands.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::Subcommand;
use dstlab::analysis;
use dstlab::config::{self, ExperimentConfig};
use dstlab::runner;
use dstlab::snapshot::MaskSnapshot;

use crate::{data_dir, CliResult, Failure};

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Overlap of the sets each criterion prunes at the first update.
    SimilarityFirst {
        /// Base config; its criterion and seed are replaced.
        config: PathBuf,
        /// Comma-separated criteria.
        #[arg(long, value_delimiter = ',', required = true)]
        criteria: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        /// Matrix CSV; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Long-format per-layer CSV.
        #[arg(long)]
        per_layer: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Pairwise overlap of final masks, runs grouped by criterion.
    SimilarityEnd {
        /// Run directories, or roots whose completed runs are all used.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        per_layer: Option<PathBuf>,
    },
    /// ITOP ratio after each stored snapshot of one run.
    Itop {
        run: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-setting ranks, average ranks and Nemenyi critical distance.
    Rank {
        /// CSV with `method,setting,value` columns, or a sweep root ranked
        /// by test accuracy.
        input: PathBuf,
        /// Rank table CSV; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Critical-distance report as JSON; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Share of weights every run keeps (or every run removes), per seed.
    AlwaysKept {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn emit(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(p, text)?;
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Expands inputs into completed run directories with their configs.
fn collect_runs(inputs: &[PathBuf]) -> CliResult<Vec<(PathBuf, ExperimentConfig)>> {
    let mut out = Vec::new();
    for p in inputs {
        if runner::is_complete(p) {
            let cfg = ExperimentConfig::from_file(&p.join(runner::CONFIG_FILE))?;
            out.push((p.clone(), cfg));
        } else if p.is_dir() {
            out.extend(runner::completed_runs(p)?);
        } else {
            return Err(Failure::runtime(format!("{}: not a completed run directory", p.display())));
        }
    }
    if out.is_empty() {
        return Err(Failure::runtime("no completed runs found"));
    }
    Ok(out)
}

/// Criterion label, with the growth rule appended when inputs mix several.
fn run_labels(runs: &[(PathBuf, ExperimentConfig)]) -> Vec<String> {
    let growths: BTreeSet<String> = runs.iter().map(|(_, c)| c.train.growth.to_string()).collect();
    runs.iter()
        .map(|(_, c)| {
            if growths.len() > 1 {
                format!("{}/{}", c.train.criterion, c.train.growth)
            } else {
                c.train.criterion.to_string()
            }
        })
        .collect()
}

fn final_snapshot(dir: &Path) -> CliResult<MaskSnapshot> {
    Ok(runner::read_init_and_final(dir)?.1)
}

fn similarity_end(inputs: &[PathBuf], output: Option<&Path>, per_layer: Option<&Path>) -> CliResult {
    let runs = collect_runs(inputs)?;
    let labels = run_labels(&runs);
    let mut groups: Vec<(String, Vec<MaskSnapshot>)> = Vec::new();
    for ((dir, _), label) in runs.iter().zip(labels) {
        let snap = final_snapshot(dir)?;
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, v)) => v.push(snap),
            None => groups.push((label, vec![snap])),
        }
    }
    let m = analysis::end_mask_similarity(&groups)?;
    emit(output, &m.to_csv())?;
    if per_layer.is_some() {
        emit(per_layer, &m.per_layer_csv())?;
    }
    Ok(())
}

fn similarity_first(
    config_path: &Path,
    criteria: &[String],
    seeds: &[u64],
    output: Option<&Path>,
    per_layer: Option<&Path>,
    data_dir: Option<PathBuf>,
) -> CliResult {
    let cfg = ExperimentConfig::from_file(config_path)?;
    let criteria = criteria
        .iter()
        .map(|c| config::parse_criterion(c, dstlab::criteria::DEFAULT_MEST_LAMBDA))
        .collect::<Result<Vec<_>, _>>()?;
    let data = cfg.data.load(data_dir.as_deref())?;
    let report = analysis::first_update_similarity(&cfg.train, &data, &criteria, seeds)?;
    emit(output, &report.matrix.to_csv())?;
    if per_layer.is_some() {
        emit(per_layer, &report.matrix.per_layer_csv())?;
    }
    eprintln!(
        "first update at step {} with fraction {:.4}; random baseline J_r = {:.6}",
        report.step, report.rho, report.random_baseline
    );
    Ok(())
}

fn itop(run: &Path, output: Option<&Path>) -> CliResult {
    let snaps = runner::read_snapshots(run)?;
    let curve = analysis::itop_curve(&snaps)?;
    let mut s = String::from("step,itop\n");
    for (step, r) in curve {
        s.push_str(&format!("{step},{r}\n"));
    }
    emit(output, &s)
}

fn rank_rows_from_csv(path: &Path) -> CliResult<Vec<(String, String, f64)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| Failure::runtime(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Failure::usage(format!("{}: missing column '{name}'", path.display())))
    };
    let (m, s, v) = (col("method")?, col("setting")?, col("value")?);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Failure::runtime(e.to_string()))?;
        let value: f64 = rec[v]
            .trim()
            .parse()
            .map_err(|_| Failure::runtime(format!("{}: row {}: bad value '{}'", path.display(), i + 2, &rec[v])))?;
        rows.push((rec[m].trim().to_string(), rec[s].trim().to_string(), value));
    }
    Ok(rows)
}

/// Sweep results as rank rows: method = criterion (and growth when mixed),
/// setting = architecture, dataset, density and update period.
fn rank_rows_from_runs(root: &Path) -> CliResult<Vec<(String, String, f64)>> {
    let runs = collect_runs(&[root.to_path_buf()])?;
    let labels = run_labels(&runs);
    let mut rows = Vec::new();
    for ((dir, c), method) in runs.iter().zip(labels) {
        let summary = runner::read_summary(dir)?;
        let acc = summary["test_accuracy"]
            .as_f64()
            .ok_or_else(|| Failure::runtime(format!("{}: summary lacks test_accuracy", dir.display())))?;
        let period = if c.train.update_period == u64::MAX { "never".to_string() } else { c.train.update_period.to_string() };
        let setting = format!("{}/{}/D={}/dt={}", c.train.architecture, c.data.kind.name(), c.train.density, period);
        rows.push((method, setting, acc));
    }
    Ok(rows)
}

fn rank(input: &Path, output: Option<&Path>, report: Option<&Path>) -> CliResult {
    let rows = if input.is_dir() { rank_rows_from_runs(input)? } else { rank_rows_from_csv(input)? };
    let table = analysis::average_ranks(&rows)?;
    let cd = analysis::cd_report(&table)?;
    emit(output, &table.to_csv())?;
    let mut json = serde_json::to_string_pretty(&cd).expect("report serializes");
    json.push('\n');
    emit(report, &json)
}

fn always_kept(inputs: &[PathBuf], output: Option<&Path>) -> CliResult {
    let runs = collect_runs(inputs)?;
    let mut by_seed: Vec<(u64, Vec<MaskSnapshot>)> = Vec::new();
    for (dir, c) in &runs {
        let snap = final_snapshot(dir)?;
        match by_seed.iter_mut().find(|(s, _)| *s == c.train.seed) {
            Some((_, v)) => v.push(snap),
            None => by_seed.push((c.train.seed, vec![snap])),
        }
    }
    by_seed.sort_by_key(|(s, _)| *s);
    let mut s = String::from("seed,runs,always_kept,always_removed\n");
    for (seed, snaps) in &by_seed {
        let (kept, removed) = analysis::always_kept_fraction(snaps)?;
        s.push_str(&format!("{seed},{},{kept},{removed}\n", snaps.len()));
    }
    emit(output, &s)
}

pub fn run(cmd: AnalyzeCommand) -> CliResult {
    match cmd {
        AnalyzeCommand::SimilarityFirst { config, criteria, seeds, output, per_layer, data_dir: d } => {
            similarity_first(&config, &criteria, &seeds, output.as_deref(), per_layer.as_deref(), data_dir(d))
        }
        AnalyzeCommand::SimilarityEnd { inputs, output, per_layer } => {
            similarity_end(&inputs, output.as_deref(), per_layer.as_deref())
        }
        AnalyzeCommand::Itop { run, output } => itop(&run, output.as_deref()),
        AnalyzeCommand::Rank { input, output, report } => rank(&input, output.as_deref(), report.as_deref()),
        AnalyzeCommand::AlwaysKept { inputs, output } => always_kept(&inputs, output.as_deref()),
    }
}
