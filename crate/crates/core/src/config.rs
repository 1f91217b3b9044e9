//! Flat `key=value` experiment configs and sweep specs.
//!
//! Blank lines and lines starting with `#` are ignored. Every key may appear
//! at most once; unknown keys are rejected by name.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::criteria::{GrowthCriterion, PruneCriterion, DEFAULT_MEST_LAMBDA};
use crate::data::{self, Dataset, SplitSpec, Splits};
use crate::error::{DstError, Result};
use crate::schedule::ScheduleKind;
use crate::trainer::{PruningScope, SparseInit, TrainConfig};

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "DSTLAB_DATA_DIR";

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    /// Generated quadrant / checkerboard task.
    SynthTabular,
    /// Numeric CSV with a header row.
    Csv,
    /// IDX files under `<root>/fashion-mnist`.
    FashionMnist,
    /// IDX files under `<root>/mnist`.
    Mnist,
    /// Binary batches under `<root>/cifar-10-batches-bin`.
    Cifar10,
}

impl DatasetKind {
    pub const NAMES: [&'static str; 5] = ["synth-tabular", "csv", "fashion-mnist", "mnist", "cifar10"];

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "synth-tabular" => DatasetKind::SynthTabular,
            "csv" => DatasetKind::Csv,
            "fashion-mnist" => DatasetKind::FashionMnist,
            "mnist" => DatasetKind::Mnist,
            "cifar10" => DatasetKind::Cifar10,
            other => {
                return Err(DstError::config(format!(
                    "unknown dataset '{other}'; valid options: {}",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::SynthTabular => "synth-tabular",
            DatasetKind::Csv => "csv",
            DatasetKind::FashionMnist => "fashion-mnist",
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

/// Dataset description.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub kind: DatasetKind,
    /// CSV file, or a dataset root overriding the environment variable.
    pub path: Option<PathBuf>,
    pub label_column: String,
    pub synth_samples: usize,
    pub synth_features: usize,
    pub synth_classes: usize,
    pub synth_cells: usize,
    /// Train/valid/test fractions for single-source datasets.
    pub split: [f64; 3],
    /// Fraction of the official training set held out for validation on
    /// datasets that ship a separate test set.
    pub valid_fraction: f64,
    /// Use only the first `n` training samples (desk-scale image runs).
    pub train_limit: Option<usize>,
    /// Seed of data generation and splitting; independent of the run seed so
    /// that runs with different seeds share the same data.
    pub data_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            kind: DatasetKind::SynthTabular,
            path: None,
            label_column: "label".into(),
            synth_samples: 20_000,
            synth_features: 24,
            synth_classes: 2,
            synth_cells: 2,
            split: [0.7, 0.15, 0.15],
            valid_fraction: 0.1,
            train_limit: None,
            data_seed: 0,
        }
    }
}

impl DataSpec {
    fn root(&self, data_dir: Option<&Path>) -> Result<PathBuf> {
        self.path
            .clone()
            .or_else(|| data_dir.map(Path::to_path_buf))
            .ok_or_else(|| DstError::Ingestion {
                path: PathBuf::from(format!("${DATA_DIR_ENV}")),
                msg: format!(
                    "dataset '{}' needs data_path or the {DATA_DIR_ENV} environment variable",
                    self.kind.name()
                ),
            })
    }

    fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.split[0],
            valid: self.split[1],
            test: self.split[2],
            seed: self.data_seed,
        }
    }

    /// Loads, splits and standardizes the data. `data_dir` is the dataset
    /// root used when `data_path` is not set.
    pub fn load(&self, data_dir: Option<&Path>) -> Result<Splits> {
        match self.kind {
            DatasetKind::SynthTabular => {
                let d = data::synth_tabular_grid(
                    self.data_seed,
                    self.synth_samples,
                    self.synth_features,
                    self.synth_classes,
                    self.synth_cells,
                )?;
                Splits::from_dataset(&d, &self.split_spec(), true)
            }
            DatasetKind::Csv => {
                let path = self.path.clone().ok_or_else(|| DstError::config("dataset=csv needs data_path"))?;
                let d = data::load_csv_tabular(&path, &self.label_column)?;
                Splits::from_dataset(&d, &self.split_spec(), true)
            }
            DatasetKind::FashionMnist | DatasetKind::Mnist => {
                let dir = if self.kind == DatasetKind::Mnist { "mnist" } else { "fashion-mnist" };
                let [(ti, tl), (ei, el)] = data::idx_paths(&self.root(data_dir)?, dir);
                let train = data::load_idx(&ti, &tl)?;
                let test = data::load_idx(&ei, &el)?;
                self.two_source(train, test)
            }
            DatasetKind::Cifar10 => {
                let (trains, test) = data::cifar_paths(&self.root(data_dir)?);
                let parts = trains.iter().map(|p| data::load_cifar10_binary(p)).collect::<Result<Vec<_>>>()?;
                self.two_source(Dataset::concat(parts)?, data::load_cifar10_binary(&test)?)
            }
        }
    }

    /// Official test set kept; validation carved out of the training set.
    fn two_source(&self, train: Dataset, test: Dataset) -> Result<Splits> {
        let train = match self.train_limit {
            Some(n) if n < train.len() => train.subset(&(0..n).collect::<Vec<_>>()),
            _ => train,
        };
        let v = self.valid_fraction;
        let spec = SplitSpec {
            train: 1.0 - v,
            valid: v / 2.0,
            test: v / 2.0,
            seed: self.data_seed,
        };
        let idx = data::split_indices(train.len(), &spec)?;
        let mut valid_idx = idx.valid;
        valid_idx.extend(idx.test);
        Splits::from_parts(train.subset(&idx.train), train.subset(&valid_idx), test, true)
    }
}

/// A complete run description.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: DataSpec,
}

/// Every accepted config key.
pub const KEYS: [&str; 34] = [
    "architecture",
    "dataset",
    "density",
    "sparse_init",
    "criterion",
    "mest_lambda",
    "growth",
    "prune_schedule",
    "prune_fraction",
    "update_period",
    "update_stop_fraction",
    "pruning_scope",
    "dst_update_batch_size",
    "epochs",
    "batch_size",
    "lr",
    "lr_decay",
    "milestones",
    "momentum",
    "weight_decay",
    "nesterov",
    "seed",
    "data_path",
    "label_column",
    "synth_samples",
    "synth_features",
    "synth_classes",
    "synth_cells",
    "split",
    "valid_fraction",
    "train_limit",
    "data_seed",
    "output_dir",
    "notes",
];

/// Parses `key=value` lines into a map, rejecting duplicates and malformed
/// lines. `allowed` limits the accepted keys.
pub fn parse_pairs(text: &str, allowed: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DstError::config(format!("line {}: expected key=value, found '{line}'", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !allowed.contains(&k) {
            return Err(DstError::config(format!("line {}: unknown key '{k}'", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(DstError::config(format!("line {}: duplicate key '{k}'", n + 1)));
        }
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| DstError::config(format!("invalid value '{v}' for key '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(DstError::config(format!("invalid value '{v}' for key '{key}'; expected true or false"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

fn parse_optional(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "none" {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn parse_period(v: &str) -> Result<u64> {
    if v == "never" {
        Ok(u64::MAX)
    } else {
        parse_num("update_period", v)
    }
}

/// `name` or `mest:<lambda>`.
pub fn parse_criterion(v: &str, mest_lambda: f64) -> Result<PruneCriterion> {
    match v.split_once(':') {
        Some(("mest", lam)) => PruneCriterion::parse_with("mest", parse_num("criterion", lam)?),
        _ => PruneCriterion::parse_with(v, mest_lambda),
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn fmt_opt(v: Option<usize>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl ExperimentConfig {
    /// Builds a config from parsed pairs; absent keys keep their defaults.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        let lambda = match pairs.get("mest_lambda") {
            Some(v) => parse_num("mest_lambda", v)?,
            None => DEFAULT_MEST_LAMBDA,
        };
        for (k, v) in pairs {
            let v = v.as_str();
            let t = &mut c.train;
            let d = &mut c.data;
            match k.as_str() {
                "architecture" => t.architecture = v.parse()?,
                "dataset" => d.kind = DatasetKind::parse(v)?,
                "density" => t.density = parse_num(k, v)?,
                "sparse_init" => t.sparse_init = v.parse::<SparseInit>()?,
                "criterion" => t.criterion = parse_criterion(v, lambda)?,
                "mest_lambda" => {}
                "growth" => t.growth = v.parse::<GrowthCriterion>()?,
                "prune_schedule" => t.prune_schedule = v.parse::<ScheduleKind>()?,
                "prune_fraction" => t.prune_fraction = parse_num(k, v)?,
                "update_period" => t.update_period = parse_period(v)?,
                "update_stop_fraction" => t.update_stop_fraction = parse_num(k, v)?,
                "pruning_scope" => t.scope = v.parse::<PruningScope>()?,
                "dst_update_batch_size" => t.dst_update_batch_size = parse_optional(k, v)?,
                "epochs" => t.epochs = parse_num(k, v)?,
                "batch_size" => t.batch_size = parse_num(k, v)?,
                "lr" => t.lr = parse_num(k, v)?,
                "lr_decay" => t.lr_decay = parse_num(k, v)?,
                "milestones" => t.milestones = parse_list(k, v)?,
                "momentum" => t.momentum = parse_num(k, v)?,
                "weight_decay" => t.weight_decay = parse_num(k, v)?,
                "nesterov" => t.nesterov = parse_bool(k, v)?,
                "seed" => t.seed = parse_num(k, v)?,
                "data_path" => d.path = (!v.is_empty()).then(|| PathBuf::from(v)),
                "label_column" => d.label_column = v.to_string(),
                "synth_samples" => d.synth_samples = parse_num(k, v)?,
                "synth_features" => d.synth_features = parse_num(k, v)?,
                "synth_classes" => d.synth_classes = parse_num(k, v)?,
                "synth_cells" => d.synth_cells = parse_num(k, v)?,
                "split" => {
                    let s = parse_list(k, v)?;
                    if s.len() != 3 {
                        return Err(DstError::config(format!("split needs three fractions, got '{v}'")));
                    }
                    d.split = [s[0], s[1], s[2]];
                }
                "valid_fraction" => d.valid_fraction = parse_num(k, v)?,
                "train_limit" => d.train_limit = parse_optional(k, v)?,
                "data_seed" => d.data_seed = parse_num(k, v)?,
                "output_dir" | "notes" => {}
                other => return Err(DstError::config(format!("unknown key '{other}'"))),
            }
        }
        if !(c.data.valid_fraction > 0.0 && c.data.valid_fraction < 1.0) {
            return Err(DstError::config(format!(
                "valid_fraction must lie in (0, 1), got {}",
                c.data.valid_fraction
            )));
        }
        if c.data.kind == DatasetKind::SynthTabular
            && c.data.synth_features != c.train.architecture.input_shape().iter().product::<usize>()
        {
            return Err(DstError::config(format!(
                "synth_features={} does not match the {} input width",
                c.data.synth_features, c.train.architecture
            )));
        }
        c.train.validate()?;
        data::SplitSpec {
            train: c.data.split[0],
            valid: c.data.split[1],
            test: c.data.split[2],
            seed: 0,
        }
        .validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text, &KEYS)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            DstError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Canonical text with every key in a fixed order; parsing it gives back
    /// an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.canonical_pairs() {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    fn canonical_pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let d = &self.data;
        let lambda = match t.criterion {
            PruneCriterion::Mest { lambda } => lambda,
            _ => DEFAULT_MEST_LAMBDA,
        };
        vec![
            ("architecture", t.architecture.to_string()),
            ("dataset", d.kind.name().to_string()),
            ("density", t.density.to_string()),
            ("sparse_init", t.sparse_init.to_string()),
            ("criterion", t.criterion.to_string()),
            ("mest_lambda", lambda.to_string()),
            ("growth", t.growth.to_string()),
            ("prune_schedule", t.prune_schedule.to_string()),
            ("prune_fraction", t.prune_fraction.to_string()),
            (
                "update_period",
                if t.update_period == u64::MAX { "never".into() } else { t.update_period.to_string() },
            ),
            ("update_stop_fraction", t.update_stop_fraction.to_string()),
            ("pruning_scope", t.scope.to_string()),
            ("dst_update_batch_size", fmt_opt(t.dst_update_batch_size)),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_decay", t.lr_decay.to_string()),
            ("milestones", fmt_list(&t.milestones)),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("nesterov", t.nesterov.to_string()),
            ("seed", t.seed.to_string()),
            ("data_path", d.path.as_ref().map_or_else(String::new, |p| p.display().to_string())),
            ("label_column", d.label_column.clone()),
            ("synth_samples", d.synth_samples.to_string()),
            ("synth_features", d.synth_features.to_string()),
            ("synth_classes", d.synth_classes.to_string()),
            ("synth_cells", d.synth_cells.to_string()),
            ("split", fmt_list(&d.split)),
            ("valid_fraction", d.valid_fraction.to_string()),
            ("train_limit", fmt_opt(d.train_limit)),
            ("data_seed", d.data_seed.to_string()),
        ]
    }

    /// Canonical pairs as a JSON object, for summaries.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.canonical_pairs()
                .into_iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
                .collect(),
        )
    }

    /// First 12 hex digits of SHA-256 over the canonical text without the seed.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.canonical_pairs() {
            if k != "seed" {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex::encode(h.finalize())[..12].to_string()
    }

    /// Run directory name: config hash plus seed.
    pub fn run_id(&self) -> String {
        format!("{}-s{}", self.hash(), self.train.seed)
    }
}

/// Grid over densities, criteria, growth rules, seeds and update periods.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub densities: Vec<f64>,
    pub criteria: Vec<PruneCriterion>,
    pub growths: Vec<GrowthCriterion>,
    pub seeds: Vec<u64>,
    pub update_periods: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

/// Keys a sweep file accepts in addition to [`KEYS`].
pub const SWEEP_KEYS: [&str; 5] = ["densities", "criteria", "growths", "seeds", "update_periods"];

impl SweepSpec {
    /// A sweep file is a config whose axes are given as comma lists under
    /// `densities`, `criteria`, `growths`, `seeds` and `update_periods`. A
    /// missing axis takes the base config's single value.
    pub fn parse(text: &str) -> Result<Self> {
        let allowed: Vec<&str> = KEYS.iter().chain(SWEEP_KEYS.iter()).copied().collect();
        let mut pairs = parse_pairs(text, &allowed)?;
        let axes: BTreeMap<String, String> = SWEEP_KEYS
            .iter()
            .filter_map(|k| pairs.remove(*k).map(|v| (k.to_string(), v)))
            .collect();
        let output_dir = pairs.get("output_dir").map(PathBuf::from);
        let base = ExperimentConfig::from_pairs(&pairs)?;
        let lambda = match pairs.get("mest_lambda") {
            Some(v) => parse_num("mest_lambda", v)?,
            None => DEFAULT_MEST_LAMBDA,
        };
        let items = |k: &str| -> Option<Vec<String>> {
            axes.get(k).map(|v| v.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect())
        };
        let spec = SweepSpec {
            densities: match items("densities") {
                Some(v) => v.iter().map(|x| parse_num("densities", x)).collect::<Result<_>>()?,
                None => vec![base.train.density],
            },
            criteria: match items("criteria") {
                Some(v) => v.iter().map(|x| parse_criterion(x, lambda)).collect::<Result<_>>()?,
                None => vec![base.train.criterion],
            },
            growths: match items("growths") {
                Some(v) => v.iter().map(|x| x.parse()).collect::<Result<_>>()?,
                None => vec![base.train.growth],
            },
            seeds: match items("seeds") {
                Some(v) => v.iter().map(|x| parse_num("seeds", x)).collect::<Result<_>>()?,
                None => vec![base.train.seed],
            },
            update_periods: match items("update_periods") {
                Some(v) => v.iter().map(|x| parse_period(x)).collect::<Result<_>>()?,
                None => vec![base.train.update_period],
            },
            base,
            output_dir,
        };
        if spec.runs().is_empty() {
            return Err(DstError::config("sweep grid is empty"));
        }
        for r in spec.runs() {
            r.train.validate()?;
        }
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DstError::config(format!("cannot read sweep {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Cartesian product in density, criterion, growth, period, seed order.
    pub fn runs(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &density in &self.densities {
            for &criterion in &self.criteria {
                for &growth in &self.growths {
                    for &update_period in &self.update_periods {
                        for &seed in &self.seeds {
                            let mut c = self.base.clone();
                            c.train.density = density;
                            c.train.criterion = criterion;
                            c.train.growth = growth;
                            c.train.update_period = update_period;
                            c.train.seed = seed;
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }
}
