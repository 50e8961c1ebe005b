//! Labeled datasets and class-disjoint incremental task streams.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tags};

/// Seed used by the standard benchmark protocol.
pub const DEFAULT_SEED: u64 = 1993;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub dim: usize,
    /// Standardize features with statistics from the first task's training
    /// split when a stream is built.
    pub standardize: bool,
}

impl Dataset {
    pub fn new(instances: Vec<Instance>) -> Result<Self> {
        let dim = instances.first().map_or(0, |i| i.features.len());
        if let Some(bad) = instances.iter().find(|i| i.features.len() != dim) {
            return Err(Error::Shape(format!(
                "instance with {} features, expected {dim}",
                bad.features.len()
            )));
        }
        if instances.iter().any(|i| i.features.iter().any(|v| !v.is_finite())) {
            return Err(Error::Input("non-finite feature value".into()));
        }
        Ok(Self {
            instances,
            dim,
            standardize: false,
        })
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<usize> {
        self.instances
            .iter()
            .map(|i| i.label)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Stacks instance features into a `n x dim` matrix.
pub fn inputs_matrix(instances: &[Instance]) -> Array2<f64> {
    let dim = instances.first().map_or(0, |i| i.features.len());
    Array2::from_shape_fn((instances.len(), dim), |(r, c)| instances[r].features[c])
}

pub fn labels_of(instances: &[Instance]) -> Vec<usize> {
    instances.iter().map(|i| i.label).collect()
}

/// One incremental step. Instance labels are stream-local class indices:
/// class `classes[k]` of this task appears as label `class_offset + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// 1-based position in the stream.
    pub index: usize,
    /// Original dataset class ids.
    pub classes: Vec<usize>,
    /// Number of classes in all earlier tasks.
    pub class_offset: usize,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl Task {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Stream-local labels of this task's classes.
    pub fn local_classes(&self) -> std::ops::Range<usize> {
        self.class_offset..self.class_offset + self.classes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    /// Original class ids in stream order; `class_order[k]` has local label `k`.
    pub class_order: Vec<usize>,
    pub seed: u64,
}

impl TaskStream {
    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks
            .first()
            .and_then(|t| t.train.first())
            .map_or(0, |i| i.features.len())
    }

    /// Classes seen through stage `s` (1-based).
    pub fn seen_classes(&self, s: usize) -> usize {
        self.tasks[..s].iter().map(Task::num_classes).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub num_tasks: usize,
    /// Classes in the first task; the rest are split evenly.
    pub base_classes: Option<usize>,
    pub seed: u64,
    /// Fraction of every class held out for testing.
    pub test_fraction: f64,
}

impl StreamConfig {
    pub fn new(num_tasks: usize, seed: u64) -> Self {
        Self {
            num_tasks,
            base_classes: None,
            seed,
            test_fraction: 0.2,
        }
    }
}

/// Number of classes in each task.
pub fn task_sizes(num_classes: usize, num_tasks: usize, base_classes: Option<usize>) -> Result<Vec<usize>> {
    if num_tasks == 0 {
        return Err(Error::Config("at least one task is required".into()));
    }
    match base_classes {
        None => {
            if num_classes % num_tasks != 0 || num_classes == 0 {
                return Err(Error::Config(format!(
                    "{num_classes} classes cannot be split evenly into {num_tasks} tasks"
                )));
            }
            Ok(vec![num_classes / num_tasks; num_tasks])
        }
        Some(base) => {
            if base == 0 || base > num_classes {
                return Err(Error::Config(format!(
                    "base classes {base} invalid for {num_classes} classes"
                )));
            }
            let rest = num_classes - base;
            if num_tasks == 1 {
                if rest != 0 {
                    return Err(Error::Config("a single task must hold every class".into()));
                }
                return Ok(vec![base]);
            }
            if base == num_classes || rest % (num_tasks - 1) != 0 {
                return Err(Error::Config(format!(
                    "{rest} remaining classes cannot be split evenly into {} tasks",
                    num_tasks - 1
                )));
            }
            let mut sizes = vec![base];
            sizes.extend(std::iter::repeat_n(rest / (num_tasks - 1), num_tasks - 1));
            Ok(sizes)
        }
    }
}

/// Seeded Fisher-Yates permutation of `classes` (taken in sorted order).
pub fn shuffled_class_order(classes: &[usize], seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = classes.to_vec();
    order.sort_unstable();
    order.shuffle(&mut rng::derive(seed, &[tags::CLASS_ORDER]));
    order
}

/// Per-column affine standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(instances: &[Instance]) -> Self {
        let dim = instances.first().map_or(0, |i| i.features.len());
        let n = instances.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for inst in instances {
            for (m, v) in mean.iter_mut().zip(&inst.features) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for inst in instances {
            for ((s, v), m) in var.iter_mut().zip(&inst.features).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, inst: &mut Instance) {
        for ((v, m), s) in inst.features.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

/// Splits a dataset into class-disjoint tasks.
///
/// Classes are permuted with the seeded shuffle, grouped by
/// [`task_sizes`], and each class is split into train/test by its own seeded
/// shuffle. Labels are remapped to stream-local indices.
pub fn build_stream(dataset: &Dataset, cfg: &StreamConfig) -> Result<TaskStream> {
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::Config(format!(
            "test fraction must be in [0, 1), got {}",
            cfg.test_fraction
        )));
    }
    let classes = dataset.classes();
    let sizes = task_sizes(classes.len(), cfg.num_tasks, cfg.base_classes)?;
    let class_order = shuffled_class_order(&classes, cfg.seed);
    let local: BTreeMap<usize, usize> = class_order.iter().enumerate().map(|(k, &c)| (c, k)).collect();

    let mut by_class: BTreeMap<usize, Vec<&Instance>> = BTreeMap::new();
    for inst in &dataset.instances {
        by_class.entry(inst.label).or_default().push(inst);
    }

    let mut tasks = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for (t, &size) in sizes.iter().enumerate() {
        let task_classes = class_order[offset..offset + size].to_vec();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &task_classes {
            let members = &by_class[&c];
            let mut idx: Vec<usize> = (0..members.len()).collect();
            idx.shuffle(&mut rng::derive(cfg.seed, &[tags::SPLIT, c as u64]));
            let mut n_test = (members.len() as f64 * cfg.test_fraction).round() as usize;
            if n_test >= members.len() {
                n_test = members.len().saturating_sub(1);
            }
            let (test_idx, train_idx) = idx.split_at(n_test);
            let mut test_idx = test_idx.to_vec();
            let mut train_idx = train_idx.to_vec();
            test_idx.sort_unstable();
            train_idx.sort_unstable();
            let relabel = |i: usize| Instance {
                features: members[i].features.clone(),
                label: local[&c],
            };
            train.extend(train_idx.into_iter().map(relabel));
            test.extend(test_idx.into_iter().map(relabel));
        }
        tasks.push(Task {
            index: t + 1,
            classes: task_classes,
            class_offset: offset,
            train,
            test,
        });
        offset += size;
    }

    if dataset.standardize {
        let stats = Standardizer::fit(&tasks[0].train);
        for task in &mut tasks {
            task.train.iter_mut().chain(task.test.iter_mut()).for_each(|i| stats.apply(i));
        }
    }

    Ok(TaskStream {
        tasks,
        class_order,
        seed: cfg.seed,
    })
}

/// Gaussian-cluster data whose later-task classes can be made to sit near
/// earlier-task classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dims: usize,
    pub per_class: usize,
    /// Standard deviation of the independent center draws.
    pub center_spread: f64,
    /// 0: independent centers; 1: every later-task center sits at a small
    /// offset from a uniformly chosen earlier-task center.
    pub relatedness: f64,
    /// Standard deviation of the offset used for related centers, as a
    /// fraction of `center_spread`.
    pub related_offset: f64,
    pub noise_sigma: f64,
    /// Task grouping the relatedness refers to.
    pub num_tasks: usize,
    pub base_classes: Option<usize>,
    /// Also drives the class order, so it must match the stream seed for the
    /// grouping to line up with the built stream.
    pub seed: u64,
}

impl SyntheticSpec {
    /// 8 classes in 16 dimensions, four tasks of two classes, 250 instances
    /// per class.
    pub fn pinned() -> Self {
        Self {
            num_classes: 8,
            dims: 16,
            per_class: 250,
            center_spread: 1.0,
            relatedness: 0.7,
            related_offset: 0.5,
            noise_sigma: 0.3,
            num_tasks: 4,
            base_classes: None,
            seed: DEFAULT_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dims == 0 || self.per_class == 0 {
            return Err(Error::Config("synthetic counts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.relatedness) {
            return Err(Error::Config(format!(
                "relatedness must be in [0, 1], got {}",
                self.relatedness
            )));
        }
        if !(self.center_spread > 0.0) || self.noise_sigma < 0.0 || self.related_offset < 0.0 {
            return Err(Error::Config("synthetic scales must be nonnegative (spread positive)".into()));
        }
        task_sizes(self.num_classes, self.num_tasks, self.base_classes).map(|_| ())
    }
}

fn gaussian_vector<R: Rng>(rng: &mut R, dims: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; dims];
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    (0..dims).map(|_| normal.sample(rng)).collect()
}

/// Class centers keyed by class id, generated in stream order.
pub fn synthetic_centers(spec: &SyntheticSpec) -> Result<BTreeMap<usize, Vec<f64>>> {
    spec.validate()?;
    let classes: Vec<usize> = (0..spec.num_classes).collect();
    let order = shuffled_class_order(&classes, spec.seed);
    let sizes = task_sizes(spec.num_classes, spec.num_tasks, spec.base_classes)?;
    let mut rng = rng::derive(spec.seed, &[tags::SYNTHETIC, 0]);
    let mut centers: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut offset = 0;
    for (t, &size) in sizes.iter().enumerate() {
        for &c in &order[offset..offset + size] {
            let fresh = gaussian_vector(&mut rng, spec.dims, spec.center_spread);
            let center = if t == 0 {
                fresh
            } else {
                let anchor_class = order[rng.random_range(0..offset)];
                let jitter = gaussian_vector(&mut rng, spec.dims, spec.related_offset * spec.center_spread);
                let anchor = &centers[&anchor_class];
                let r = spec.relatedness;
                (0..spec.dims)
                    .map(|k| r * (anchor[k] + jitter[k]) + (1.0 - r) * fresh[k])
                    .collect()
            };
            centers.insert(c, center);
        }
        offset += size;
    }
    Ok(centers)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let centers = synthetic_centers(spec)?;
    let mut rng = rng::derive(spec.seed, &[tags::SYNTHETIC, 1]);
    let mut instances = Vec::with_capacity(spec.num_classes * spec.per_class);
    for (&label, center) in &centers {
        for _ in 0..spec.per_class {
            let noise = gaussian_vector(&mut rng, spec.dims, spec.noise_sigma);
            let features = center.iter().zip(noise).map(|(c, n)| c + n).collect();
            instances.push(Instance { features, label });
        }
    }
    Dataset::new(instances)
}

/// Layout of a CSV dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    pub standardize: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: "label".to_string(),
            standardize: false,
        }
    }
}

/// Reads a header-first CSV whose final column holds integer labels.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == schema.label_column)
        .ok_or_else(|| Error::Schema(format!("no `{}` column in header", schema.label_column)))?;
    if label_idx + 1 != headers.len() {
        return Err(Error::Schema(format!(
            "`{}` must be the final column",
            schema.label_column
        )));
    }
    if label_idx == 0 {
        return Err(Error::Schema("no feature columns".into()));
    }
    let mut instances = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let mut features = Vec::with_capacity(label_idx);
        for (k, field) in record.iter().take(label_idx).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric value `{field}` in column `{}`", &headers[k]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite value in column `{}`", &headers[k]),
                });
            }
            features.push(v);
        }
        let label_field = record[label_idx].trim();
        let label: usize = label_field.parse().map_err(|_| Error::Parse {
            line,
            message: format!("label `{label_field}` is not a nonnegative integer"),
        })?;
        instances.push(Instance { features, label });
    }
    let mut ds = Dataset::new(instances)?;
    ds.standardize = schema.standardize;
    Ok(ds)
}
