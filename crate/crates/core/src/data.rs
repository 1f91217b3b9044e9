//! Dataset ingestion, synthetic data, splitting, normalization and batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DstError, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Features and integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[N, d]` or `[N, C, H, W]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.shape().len() < 2 {
            return Err(DstError::Data("features need a leading sample axis".into()));
        }
        if features.rows() != labels.len() {
            return Err(DstError::Data(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DstError::Data(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Dataset {
            name: name.into(),
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample feature shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Concatenates datasets with identical sample shapes.
    pub fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| DstError::Data("nothing to concatenate".into()))?;
        let name = first.name.clone();
        let sample = first.sample_shape().to_vec();
        let class_count = parts.iter().map(|d| d.class_count).max().unwrap_or(0);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for d in parts {
            if d.sample_shape() != sample.as_slice() {
                return Err(DstError::Data("cannot concatenate different sample shapes".into()));
            }
            labels.extend_from_slice(&d.labels);
            data.extend(d.features.into_data());
        }
        let mut shape = vec![labels.len()];
        shape.extend(sample);
        Dataset::new(name, Tensor::from_parts(shape, data), labels, class_count)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DstError::Ingestion {
            path: path.to_path_buf(),
            msg: "file does not exist".into(),
        },
        _ => DstError::Io(e),
    })
}

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> DstError {
    DstError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Parses an IDX header; returns the dimensions and the payload offset.
fn idx_header(path: &Path, bytes: &[u8], expected_dims: u8) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(format_err(path, 0, "file too short for an IDX magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(format_err(
            path,
            0,
            format!("bad IDX magic {:02x}{:02x}{:02x}{:02x}; expected unsigned-byte data", bytes[0], bytes[1], bytes[2], bytes[3]),
        ));
    }
    if bytes[3] != expected_dims {
        return Err(format_err(
            path,
            3,
            format!("expected {expected_dims} dimensions, header says {}", bytes[3]),
        ));
    }
    let header_len = 4 + 4 * expected_dims as usize;
    if bytes.len() < header_len {
        return Err(format_err(path, bytes.len(), "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..expected_dims as usize)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    if bytes.len() < header_len + payload {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: need {} bytes, file has {}", header_len + payload, bytes.len()),
        ));
    }
    Ok((dims, header_len))
}

/// Loads an IDX image file (`0x00000803`) and its label file
/// (`0x00000801`). Pixels are scaled to `[0, 1]`; samples are `1×H×W`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = read_file(images)?;
    let lb = read_file(labels)?;
    let (idims, ioff) = idx_header(images, &ib, 3)?;
    let (ldims, loff) = idx_header(labels, &lb, 1)?;
    if idims[0] != ldims[0] {
        return Err(format_err(
            labels,
            4,
            format!("{} labels for {} images in {}", ldims[0], idims[0], images.display()),
        ));
    }
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if n == 0 || h == 0 || w == 0 {
        return Err(format_err(images, 4, "IDX file holds no images"));
    }
    let data: Vec<f64> = ib[ioff..ioff + n * h * w].iter().map(|&p| p as f64 / 255.0).collect();
    let labels_v: Vec<usize> = lb[loff..loff + n].iter().map(|&l| l as usize).collect();
    let classes = labels_v.iter().max().map_or(0, |m| m + 1).max(10);
    let name = images
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, Tensor::from_parts(vec![n, 1, h, w], data), labels_v, classes)
}

pub const CIFAR_RECORD: usize = 3073;

/// Loads one CIFAR-10 binary batch: records of one label byte followed by
/// 3072 pixel bytes (R, G, B planes of 32×32). Pixels are scaled to `[0, 1]`.
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    if bytes.is_empty() {
        return Err(format_err(path, 0, "empty CIFAR-10 file"));
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(format_err(
            path,
            whole * CIFAR_RECORD,
            format!("truncated record {whole}: {} trailing bytes", bytes.len() % CIFAR_RECORD),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(format_err(path, r * CIFAR_RECORD, format!("label byte {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    Dataset::new("cifar10", Tensor::from_parts(vec![n, 3, 32, 32], data), labels, 10)
}

/// Loads a numeric CSV with a header row. `label_column` names the integer
/// class column; every other column is a feature. Features are returned raw;
/// standardization uses train-split statistics later.
pub fn load_csv_tabular(path: &Path, label_column: &str) -> Result<Dataset> {
    if !path.exists() {
        return Err(DstError::Ingestion {
            path: path.to_path_buf(),
            msg: "file does not exist".into(),
        });
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers.iter().position(|h| h == label_column).ok_or_else(|| DstError::Parse {
        path: path.to_path_buf(),
        row: 0,
        column: label_column.to_string(),
        msg: format!("label column not found; columns are {:?}", headers.iter().collect::<Vec<_>>()),
    })?;
    let d = headers.len() - 1;
    if d == 0 {
        return Err(DstError::Data(format!("{} has no feature columns", path.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row_no = row + 1;
        for (c, cell) in rec.iter().enumerate() {
            let parsed: f64 = cell.parse().map_err(|_| DstError::Parse {
                path: path.to_path_buf(),
                row: row_no,
                column: headers.get(c).unwrap_or("?").to_string(),
                msg: format!("non-numeric value '{cell}'"),
            })?;
            if !parsed.is_finite() {
                return Err(DstError::Parse {
                    path: path.to_path_buf(),
                    row: row_no,
                    column: headers.get(c).unwrap_or("?").to_string(),
                    msg: format!("non-finite value '{cell}'"),
                });
            }
            if c == label_idx {
                if parsed < 0.0 || parsed.fract() != 0.0 {
                    return Err(DstError::Parse {
                        path: path.to_path_buf(),
                        row: row_no,
                        column: label_column.to_string(),
                        msg: format!("label '{cell}' is not a non-negative integer"),
                    });
                }
                labels.push(parsed as usize);
            } else {
                data.push(parsed);
            }
        }
    }
    if labels.is_empty() {
        return Err(DstError::Data(format!("{} has no data rows", path.display())));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, Tensor::from_parts(vec![labels.len(), d], data), labels, classes.max(2))
}

/// Gaussian quadrant clusters on the first two features plus pure-noise
/// features; [`synth_tabular_grid`] with two cells per axis.
///
/// With two classes the label is the XOR of the signs of the cluster centre,
/// so no linear rule separates the classes.
pub fn synth_tabular(seed: u64, n: usize, d: usize, classes: usize) -> Result<Dataset> {
    synth_tabular_grid(seed, n, d, classes, 2)
}

/// Standard deviation of each cluster around its centre.
pub const CLUSTER_STD: f64 = 0.5;

/// Checkerboard generalisation of the quadrant task.
///
/// The first two features take a cluster centre from a `cells × cells`
/// lattice with spacing 2 and centred on the origin (`cells = 2` gives the
/// four quadrant centres `(±1, ±1)`), plus N(0, [`CLUSTER_STD`]²) noise. The
/// other `d - 2` features are N(0, 1) noise. Cell `(i, j)` is labelled
/// `(i + j) mod 2` for two classes, which is the XOR of the quadrant signs when
/// `cells = 2`, and `(cells·i + j) mod classes` otherwise.
pub fn synth_tabular_grid(seed: u64, n: usize, d: usize, classes: usize, cells: usize) -> Result<Dataset> {
    if n < 2 || d < 2 || classes < 2 || cells < 2 {
        return Err(DstError::config(format!(
            "synthetic data needs n >= 2, d >= 2, classes >= 2, cells >= 2; got {n}, {d}, {classes}, {cells}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Synth, 0);
    let offset = (cells - 1) as f64;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.random_range(0..cells);
        let j = rng.random_range(0..cells);
        let n0: f64 = StandardNormal.sample(&mut rng);
        let n1: f64 = StandardNormal.sample(&mut rng);
        data.push(2.0 * i as f64 - offset + CLUSTER_STD * n0);
        data.push(2.0 * j as f64 - offset + CLUSTER_STD * n1);
        for _ in 2..d {
            data.push(StandardNormal.sample(&mut rng));
        }
        labels.push(if classes == 2 { (i + j) % 2 } else { (cells * i + j) % classes });
    }
    Dataset::new("synth-tabular", Tensor::from_parts(vec![n, d], data), labels, classes)
}

/// Train / validation / test fractions and the shuffle seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|&f| !(f > 0.0 && f < 1.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DstError::config(format!(
                "split fractions must be positive and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

/// Index sets of a three-way split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut into train/valid/test.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream_rng(spec.seed, Stream::Data, u64::MAX));
    let n_train = (spec.train * n as f64).round() as usize;
    let n_valid = (spec.valid * n as f64).round() as usize;
    if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
        return Err(DstError::Data(format!(
            "split {:?} of {n} samples leaves an empty part",
            [spec.train, spec.valid, spec.test]
        )));
    }
    let test = perm.split_off(n_train + n_valid);
    let valid = perm.split_off(n_train);
    Ok(SplitIndices { train: perm, valid, test })
}

/// Per-feature (tabular) or per-channel (images) standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    /// Values per group: feature count for `[N, d]`, channel count for images.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    per_channel: bool,
}

/// Standard deviations below this are treated as constant features.
pub const STD_GUARD: f64 = 1e-12;

impl Standardizer {
    /// Statistics of `features` (population standard deviation).
    pub fn fit(features: &Tensor) -> Self {
        let shape = features.shape();
        let per_channel = shape.len() == 4;
        let groups = shape[1];
        let inner: usize = shape[2..].iter().product();
        let n = shape[0];
        let count = (n * inner) as f64;
        let mut mean = vec![0.0; groups];
        let mut sq = vec![0.0; groups];
        for s in 0..n {
            let row = features.row(s);
            for g in 0..groups {
                for &v in &row[g * inner..(g + 1) * inner] {
                    mean[g] += v;
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for s in 0..n {
            let row = features.row(s);
            for g in 0..groups {
                for &v in &row[g * inner..(g + 1) * inner] {
                    sq[g] += (v - mean[g]) * (v - mean[g]);
                }
            }
        }
        let std = sq.iter().map(|s| (s / count).sqrt()).collect();
        Standardizer { mean, std, per_channel }
    }

    /// Maps each group to zero mean and unit variance; constant groups become 0.
    pub fn apply(&self, features: &mut Tensor) {
        let shape = features.shape().to_vec();
        let groups = shape[1];
        let inner: usize = shape[2..].iter().product();
        let row_len = groups * inner;
        for row in features.data_mut().chunks_mut(row_len) {
            for g in 0..groups {
                let (m, s) = (self.mean[g], self.std[g]);
                for v in &mut row[g * inner..(g + 1) * inner] {
                    *v = if s < STD_GUARD { 0.0 } else { (*v - m) / s };
                }
            }
        }
        debug_assert!(self.per_channel == (shape.len() == 4));
    }
}

/// Train/valid/test datasets, normalized with train statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Cuts one dataset by `spec` and standardizes all parts with train
    /// statistics.
    pub fn from_dataset(data: &Dataset, spec: &SplitSpec, standardize: bool) -> Result<Splits> {
        let idx = split_indices(data.len(), spec)?;
        Splits::from_parts(data.subset(&idx.train), data.subset(&idx.valid), data.subset(&idx.test), standardize)
    }

    pub fn from_parts(mut train: Dataset, mut valid: Dataset, mut test: Dataset, standardize: bool) -> Result<Splits> {
        if train.is_empty() || valid.is_empty() || test.is_empty() {
            return Err(DstError::Data("every split must be non-empty".into()));
        }
        if standardize {
            let st = Standardizer::fit(&train.features);
            st.apply(&mut train.features);
            st.apply(&mut valid.features);
            st.apply(&mut test.features);
        }
        Ok(Splits { train, valid, test })
    }
}

/// One minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

/// Train-order permutation for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Data, epoch));
    order
}

/// Batches of `dataset` in the given order; the last batch may be partial.
pub fn batches<'a>(dataset: &'a Dataset, order: &'a [usize], batch_size: usize) -> impl Iterator<Item = Batch> + 'a {
    assert!(batch_size >= 1, "batch size must be >= 1");
    order.chunks(batch_size).map(move |idx| Batch {
        features: dataset.features.gather_rows(idx),
        labels: idx.iter().map(|&i| dataset.labels[i]).collect(),
    })
}

/// Shuffled train batches for one epoch.
pub fn train_batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Vec<Batch> {
    let order = epoch_order(dataset.len(), seed, epoch);
    batches(dataset, &order, batch_size).collect()
}

/// Fixed-order batches (validation, test).
pub fn eval_batches(dataset: &Dataset, batch_size: usize) -> Vec<Batch> {
    let order: Vec<usize> = (0..dataset.len()).collect();
    batches(dataset, &order, batch_size).collect()
}

/// Standard file names of the supported image datasets below a data root.
pub fn idx_paths(root: &Path, dir: &str) -> [(PathBuf, PathBuf); 2] {
    let base = root.join(dir);
    [
        (base.join("train-images-idx3-ubyte"), base.join("train-labels-idx1-ubyte")),
        (base.join("t10k-images-idx3-ubyte"), base.join("t10k-labels-idx1-ubyte")),
    ]
}

pub fn cifar_paths(root: &Path) -> (Vec<PathBuf>, PathBuf) {
    let base = root.join("cifar-10-batches-bin");
    (
        (1..=5).map(|i| base.join(format!("data_batch_{i}.bin"))).collect(),
        base.join("test_batch.bin"),
    )
}
