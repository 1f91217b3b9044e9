//! Run directories and the sweep orchestrator.
//!
//! A run directory `<config-hash>-s<seed>` holds:
//!
//! * `config.txt` – canonical config
//! * `record.csv` – per-epoch metrics
//! * `summary.json` – test metrics, ITOP trajectory and config echo
//! * `snapshots/init.mask`, `snapshots/step-NNNNNNNNNN.mask`, `snapshots/final.mask`
//! * `DONE` – written last; its presence marks the run complete
//!
//! Everything in it is a function of the config alone. Timing goes to the
//! sweep manifest instead.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::json;

use crate::config::{DataSpec, ExperimentConfig, SweepSpec};
use crate::data::Splits;
use crate::error::{DstError, Result};
use crate::snapshot::MaskSnapshot;
use crate::trainer::{RunRecord, Trainer};

pub const DONE_MARKER: &str = "DONE";
pub const RECORD_FILE: &str = "record.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const ERROR_FILE: &str = "error.txt";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const MANIFEST_FILE: &str = "manifest.csv";

pub fn run_dir(output: &Path, cfg: &ExperimentConfig) -> PathBuf {
    output.join(cfg.run_id())
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(DONE_MARKER).is_file()
}

fn snapshot_name(s: &MaskSnapshot, is_last: bool, is_first: bool) -> String {
    if is_first {
        "init.mask".into()
    } else if is_last {
        "final.mask".into()
    } else {
        format!("step-{:010}.mask", s.step)
    }
}

fn summary_json(cfg: &ExperimentConfig, record: &RunRecord) -> serde_json::Value {
    json!({
        "run_id": cfg.run_id(),
        "config_hash": cfg.hash(),
        "seed": cfg.train.seed,
        "test_accuracy": record.test_acc,
        "test_loss": record.test_loss,
        "final_itop": record.final_itop(),
        "updates": record.updates,
        "total_iterations": record.total_iterations,
        "epochs": record.epochs.len(),
        "itop_trajectory": record.itop_trajectory,
        "config": cfg.to_json(),
    })
}

/// Writes a finished run into `dir`, DONE last.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, record: &RunRecord, snapshots: &[MaskSnapshot]) -> Result<()> {
    let snap_dir = dir.join(SNAPSHOT_DIR);
    fs::create_dir_all(&snap_dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    fs::write(dir.join(RECORD_FILE), record.to_csv())?;
    let mut summary = serde_json::to_string_pretty(&summary_json(cfg, record)).expect("summary serializes");
    summary.push('\n');
    fs::write(dir.join(SUMMARY_FILE), summary)?;
    let last = snapshots.len().saturating_sub(1);
    for (i, s) in snapshots.iter().enumerate() {
        s.write(&snap_dir.join(snapshot_name(s, i == last, i == 0)))?;
    }
    fs::write(dir.join(DONE_MARKER), "")?;
    Ok(())
}

/// Trains one config on preloaded data and writes its run directory.
pub fn execute_run(cfg: &ExperimentConfig, data: &Splits, output: &Path) -> Result<(PathBuf, RunRecord)> {
    let dir = run_dir(output, cfg);
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let result = Trainer::new(cfg.train.clone(), data).and_then(Trainer::run);
    match result {
        Ok((record, snapshots, _)) => {
            write_run(&dir, cfg, &record, &snapshots)?;
            Ok((dir, record))
        }
        Err(e) => {
            fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
            fs::write(dir.join(ERROR_FILE), format!("{e}\n"))?;
            Err(e)
        }
    }
}

/// Snapshots of a run directory, ordered by step.
pub fn read_snapshots(dir: &Path) -> Result<Vec<MaskSnapshot>> {
    let snap_dir = dir.join(SNAPSHOT_DIR);
    let mut entries: Vec<PathBuf> = fs::read_dir(&snap_dir)
        .map_err(|e| DstError::Analysis(format!("{}: {e}", snap_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mask"))
        .collect();
    entries.sort();
    let mut snaps = entries.iter().map(|p| MaskSnapshot::read(p)).collect::<Result<Vec<_>>>()?;
    // init first and final last; ties in step keep that order
    snaps.sort_by_key(|s| s.step);
    let init = snap_dir.join("init.mask");
    let fin = snap_dir.join("final.mask");
    if !init.is_file() || !fin.is_file() {
        return Err(DstError::Analysis(format!("{}: missing init.mask or final.mask", snap_dir.display())));
    }
    let first = MaskSnapshot::read(&init)?;
    let last = MaskSnapshot::read(&fin)?;
    snaps.retain(|s| s != &first && s != &last);
    snaps.insert(0, first);
    snaps.push(last);
    Ok(snaps)
}

/// Initial and final snapshot of a run directory.
pub fn read_init_and_final(dir: &Path) -> Result<(MaskSnapshot, MaskSnapshot)> {
    let d = dir.join(SNAPSHOT_DIR);
    Ok((MaskSnapshot::read(&d.join("init.mask"))?, MaskSnapshot::read(&d.join("final.mask"))?))
}

pub fn read_summary(dir: &Path) -> Result<serde_json::Value> {
    let p = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&p).map_err(|e| DstError::Analysis(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| DstError::Analysis(format!("{}: {e}", p.display())))
}

/// Completed run directories directly under `root`, sorted by name, with
/// their configs.
pub fn completed_runs(root: &Path) -> Result<Vec<(PathBuf, ExperimentConfig)>> {
    let entries = fs::read_dir(root).map_err(|e| DstError::Analysis(format!("{}: {e}", root.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_complete(p))
        .collect();
    dirs.sort();
    dirs.into_iter()
        .map(|d| {
            let cfg = ExperimentConfig::from_file(&d.join(CONFIG_FILE))?;
            Ok((d, cfg))
        })
        .collect()
}

/// State of one grid point after a sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    /// Already complete before the sweep started.
    Skipped,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub test_accuracy: Option<f64>,
    pub final_itop: Option<f64>,
    pub wall_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub outcomes: Vec<RunOutcome>,
}

impl SweepReport {
    pub fn failed(&self) -> usize {
        self.outcomes.iter().filter(|o| matches!(o.status, RunStatus::Failed(_))).count()
    }

    pub fn executed(&self) -> usize {
        self.outcomes.iter().filter(|o| o.status == RunStatus::Completed).count()
    }

    pub fn manifest_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "run_id",
            "architecture",
            "dataset",
            "density",
            "criterion",
            "growth",
            "update_period",
            "seed",
            "status",
            "test_accuracy",
            "final_itop",
            "wall_seconds",
            "error",
        ])?;
        for o in &self.outcomes {
            let t = &o.config.train;
            let (status, err) = match &o.status {
                RunStatus::Completed => ("completed", String::new()),
                RunStatus::Skipped => ("skipped", String::new()),
                RunStatus::Failed(e) => ("failed", e.clone()),
            };
            let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
            w.write_record([
                o.config.run_id(),
                t.architecture.to_string(),
                o.config.data.kind.name().to_string(),
                t.density.to_string(),
                t.criterion.to_string(),
                t.growth.to_string(),
                if t.update_period == u64::MAX { "never".into() } else { t.update_period.to_string() },
                t.seed.to_string(),
                status.to_string(),
                opt(o.test_accuracy),
                opt(o.final_itop),
                opt(o.wall_seconds),
                err,
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| DstError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Runs every grid point of `spec` under `output`, at most `parallelism` at a
/// time. Complete run directories are skipped; incomplete ones are deleted and
/// rerun. Writes `manifest.csv` in grid order.
pub fn run_sweep(spec: &SweepSpec, output: &Path, parallelism: usize, data_dir: Option<&Path>) -> Result<SweepReport> {
    if parallelism == 0 {
        return Err(DstError::config("parallelism must be >= 1"));
    }
    fs::create_dir_all(output)?;
    let runs = spec.runs();
    let mut data_cache: Vec<(DataSpec, Splits)> = Vec::new();
    let mut data_index = Vec::with_capacity(runs.len());
    let mut outcomes: Vec<Option<RunOutcome>> = vec![None; runs.len()];
    for (i, r) in runs.iter().enumerate() {
        let dir = run_dir(output, r);
        if is_complete(&dir) {
            let summary = read_summary(&dir).ok();
            let get = |k: &str| summary.as_ref().and_then(|s| s[k].as_f64());
            outcomes[i] = Some(RunOutcome {
                config: r.clone(),
                status: RunStatus::Skipped,
                test_accuracy: get("test_accuracy"),
                final_itop: get("final_itop"),
                wall_seconds: None,
            });
            data_index.push(usize::MAX);
            continue;
        }
        let pos = match data_cache.iter().position(|(d, _)| d == &r.data) {
            Some(p) => p,
            None => {
                data_cache.push((r.data.clone(), r.data.load(data_dir)?));
                data_cache.len() - 1
            }
        };
        data_index.push(pos);
    }
    let pending: Vec<usize> = (0..runs.len()).filter(|&i| outcomes[i].is_none()).collect();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(outcomes);
    std::thread::scope(|s| {
        for _ in 0..parallelism.min(pending.len()).max(1) {
            s.spawn(|| loop {
                let n = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(n) else { break };
                let cfg = &runs[i];
                let start = std::time::Instant::now();
                let outcome = match execute_run(cfg, &data_cache[data_index[i]].1, output) {
                    Ok((_, rec)) => RunOutcome {
                        config: cfg.clone(),
                        status: RunStatus::Completed,
                        test_accuracy: Some(rec.test_acc),
                        final_itop: Some(rec.final_itop()),
                        wall_seconds: Some(start.elapsed().as_secs_f64()),
                    },
                    Err(e) => RunOutcome {
                        config: cfg.clone(),
                        status: RunStatus::Failed(e.to_string()),
                        test_accuracy: None,
                        final_itop: None,
                        wall_seconds: Some(start.elapsed().as_secs_f64()),
                    },
                };
                results.lock().expect("no worker panicked")[i] = Some(outcome);
            });
        }
    });
    let report = SweepReport {
        outcomes: results.into_inner().expect("no worker panicked").into_iter().map(|o| o.expect("every run visited")).collect(),
    };
    fs::write(output.join(MANIFEST_FILE), report.manifest_csv()?)?;
    Ok(report)
}
