//! Dataset synthesis, partitioning, and batching.
//!
//! The built-in generator draws Gaussian blobs, one per class, which keeps
//! runs self-contained and fully seeded. Real data can be loaded from CSV.
//! Label heterogeneity across clients comes from `shard_partition`, feature
//! heterogeneity from `apply_feature_shift`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FedError, Result};
use crate::model::Batch;
use crate::seed::derive_seed;

/// A labeled dataset with rows stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    input_dim: usize,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        input_dim: usize,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Dataset> {
        if input_dim == 0 {
            return Err(FedError::Input(
                "dataset input dimension must be positive".into(),
            ));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(FedError::Input(format!(
                "dataset holds {} values, expected {} rows x {} features",
                inputs.len(),
                labels.len(),
                input_dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(FedError::Input(format!(
                "label {bad} is out of range for {class_count} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            input_dim,
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

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copy the given rows into a new dataset (same class space).
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            inputs,
            input_dim: self.input_dim,
            labels,
            class_count: self.class_count,
        }
    }

    /// The whole dataset as one batch, rows in stored order.
    pub fn to_batch(&self) -> Batch {
        Batch::new(self.inputs.clone(), self.input_dim, self.labels.clone())
            .expect("dataset invariants guarantee a valid batch")
    }
}

/// One client's slice of the data after partitioning.
#[derive(Debug, Clone)]
pub struct ClientSplit {
    pub train: Dataset,
    pub test: Dataset,
    /// Classes this client draws from, ascending.
    pub classes: Vec<usize>,
}

/// How to carve a pool into per-client train and test sets.
#[derive(Debug, Clone, Copy)]
pub struct PartitionSpec {
    pub n_clients: usize,
    /// Classes per client.
    pub shard: usize,
    /// Training samples per client.
    pub train_size: usize,
    /// Held-out samples per client.
    pub test_size: usize,
    pub seed: u64,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller transform; two uniform draws per normal sample.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Sample `class_count` Gaussian blobs with seeded means (uniform in
/// [-3, 3] per coordinate) and standard deviation `spread`. Rows are grouped
/// by class; shuffling is the partitioner's job.
pub fn synth_blobs(
    class_count: usize,
    input_dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count < 2 {
        return Err(FedError::Config(
            "blob synthesis needs at least two classes".into(),
        ));
    }
    if input_dim == 0 || n_per_class == 0 {
        return Err(FedError::Config(
            "blob synthesis needs positive dimensions and counts".into(),
        ));
    }
    if spread < 0.0 {
        return Err(FedError::Config("blob spread must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..class_count * input_dim)
        .map(|_| rng.gen_range(-3.0..3.0))
        .collect();
    let mut inputs = Vec::with_capacity(class_count * n_per_class * input_dim);
    let mut labels = Vec::with_capacity(class_count * n_per_class);
    for c in 0..class_count {
        let mean = &means[c * input_dim..(c + 1) * input_dim];
        for _ in 0..n_per_class {
            for &m in mean {
                inputs.push(m + spread * gaussian(&mut rng));
            }
            labels.push(c);
        }
    }
    Dataset::new(inputs, input_dim, labels, class_count)
}

/// Split `size` samples across `shard` classes as evenly as possible, with
/// earlier classes absorbing the remainder.
fn per_class_counts(size: usize, shard: usize) -> Vec<usize> {
    let base = size / shard;
    let extra = size % shard;
    (0..shard).map(|j| base + usize::from(j < extra)).collect()
}

/// Label-skewed partition: client `k` is dealt `shard` consecutive classes
/// from the repeating sequence 0, 1, ..., K-1, 0, 1, ... so every class is
/// used and classes land on the same number of clients whenever
/// `n_clients * shard` is a multiple of the class count. Each client gets
/// disjoint train and test rows; no row is shared between clients.
pub fn shard_partition(pool: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientSplit>> {
    if spec.n_clients == 0 {
        return Err(FedError::Config(
            "partition needs at least one client".into(),
        ));
    }
    if spec.shard == 0 || spec.shard > pool.class_count() {
        return Err(FedError::Config(format!(
            "shard size {} must lie in 1..={}",
            spec.shard,
            pool.class_count()
        )));
    }
    if spec.train_size == 0 || spec.test_size == 0 {
        return Err(FedError::Config(
            "train and test sizes must be positive".into(),
        ));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); pool.class_count()];
    for i in 0..pool.len() {
        by_class[pool.label(i)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for indices in &mut by_class {
        indices.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; pool.class_count()];

    let train_counts = per_class_counts(spec.train_size, spec.shard);
    let test_counts = per_class_counts(spec.test_size, spec.shard);

    let mut splits = Vec::with_capacity(spec.n_clients);
    for k in 0..spec.n_clients {
        let mut train_idx = Vec::with_capacity(spec.train_size);
        let mut test_idx = Vec::with_capacity(spec.test_size);
        let mut classes = Vec::with_capacity(spec.shard);
        for j in 0..spec.shard {
            let class = (k * spec.shard + j) % pool.class_count();
            classes.push(class);
            let need = train_counts[j] + test_counts[j];
            let available = by_class[class].len() - cursor[class];
            if available < need {
                return Err(FedError::Config(format!(
                    "class {class} has only {available} unused samples but client {k} needs {need}"
                )));
            }
            let start = cursor[class];
            train_idx.extend_from_slice(&by_class[class][start..start + train_counts[j]]);
            test_idx.extend_from_slice(&by_class[class][start + train_counts[j]..start + need]);
            cursor[class] += need;
        }
        classes.sort_unstable();
        classes.dedup();
        splits.push(ClientSplit {
            train: pool.select(&train_idx),
            test: pool.select(&test_idx),
            classes,
        });
    }
    Ok(splits)
}

/// Per-client feature shift: a seeded affine map plus small additive noise,
/// all scaled by `severity`. Severity 0 returns the dataset bit-identically.
/// Labels are never touched.
pub fn apply_feature_shift(ds: &Dataset, client_id: usize, severity: f64, seed: u64) -> Dataset {
    if severity == 0.0 {
        return ds.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, client_id as u64));
    let dim = ds.input_dim();
    let scales: Vec<f64> = (0..dim)
        .map(|_| 1.0 + severity * rng.gen_range(-0.5..0.5))
        .collect();
    let shifts: Vec<f64> = (0..dim)
        .map(|_| severity * rng.gen_range(-1.0..1.0))
        .collect();
    let mut inputs = Vec::with_capacity(ds.inputs.len());
    for i in 0..ds.len() {
        for (j, &x) in ds.row(i).iter().enumerate() {
            let noise = severity * 0.05 * gaussian(&mut rng);
            inputs.push(scales[j] * x + shifts[j] + noise);
        }
    }
    Dataset {
        inputs,
        input_dim: dim,
        labels: ds.labels.clone(),
        class_count: ds.class_count,
    }
}

/// Load a dataset from CSV with header `f0,...,f{m-1},label`. Labels may be
/// any integers; they are remapped to a dense 0-based range in sorted order.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| FedError::Config(format!("cannot open {}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| FedError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 2 || headers.iter().next_back() != Some("label") {
        return Err(FedError::Parse {
            line: 1,
            message: "header must end with a `label` column".into(),
        });
    }
    let dim = headers.len() - 1;
    for (j, name) in headers.iter().take(dim).enumerate() {
        if name != format!("f{j}") {
            return Err(FedError::Parse {
                line: 1,
                message: format!("feature column {j} must be named f{j}, got {name:?}"),
            });
        }
    }

    let mut inputs = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| FedError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != headers.len() {
            return Err(FedError::Parse {
                line,
                message: format!("expected {} fields, got {}", headers.len(), record.len()),
            });
        }
        for field in record.iter().take(dim) {
            inputs.push(field.parse::<f64>().map_err(|_| FedError::Parse {
                line,
                message: format!("bad feature value {field:?}"),
            })?);
        }
        let label_field = record.get(dim).unwrap();
        raw_labels.push(label_field.parse::<i64>().map_err(|_| FedError::Parse {
            line,
            message: format!("bad label {label_field:?}"),
        })?);
    }
    if raw_labels.is_empty() {
        return Err(FedError::Input(format!(
            "{} holds no data rows",
            path.display()
        )));
    }

    let mut distinct: Vec<i64> = raw_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|l| distinct.binary_search(l).unwrap())
        .collect();
    Dataset::new(inputs, dim, labels, distinct.len())
}

/// Write a dataset in the same CSV schema `load_csv` reads.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| FedError::Config(format!("cannot create {}: {e}", path.display())))?;
    let mut header: Vec<String> = (0..ds.input_dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    writer
        .write_record(&header)
        .and_then(|_| {
            for i in 0..ds.len() {
                let mut row: Vec<String> = ds.row(i).iter().map(|v| v.to_string()).collect();
                row.push(ds.label(i).to_string());
                writer.write_record(&row)?;
            }
            writer.flush().map_err(csv::Error::from)
        })
        .map_err(|e| FedError::Internal(format!("csv write failed: {e}")))
}

/// Shuffle the dataset with the caller's RNG and cut it into batches of
/// `batch_size` (the final batch keeps the remainder). The same RNG state
/// always produces the same batch sequence.
pub fn batches(ds: &Dataset, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Batch>> {
    if ds.is_empty() {
        return Err(FedError::Input("cannot batch an empty dataset".into()));
    }
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let part = ds.select(chunk);
            Batch::new(part.inputs, part.input_dim, part.labels)
        })
        .collect()
}

/// Number of batches one epoch yields, i.e. the per-block step count of a
/// local pass.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}
