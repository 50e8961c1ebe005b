//! End-to-end runs: configuration, stream construction, training through
//! every stage and report assembly.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{build_stream, generate_synthetic, load_csv, CsvSchema, Dataset, StreamConfig, SyntheticSpec, Task, TaskStream, DEFAULT_SEED};
use crate::diffnet::{EmbeddingConfig, Model};
use crate::error::{Error, Result};
use crate::eval::{evaluate_stage, RunMetadata, RunReport, StageEval};
use crate::losses::{LambdaPolicy, LossConfig};
use crate::memory::{BudgetPolicy, ExemplarStore};
use crate::ot::{CostNormalization, OtConfig};
use crate::rng::{self, tags};
use crate::trainer::{CenterRefresh, EpochRecord, InitProbe, Method, RtRefresh, StageState, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    Csv(PathBuf),
}

impl std::str::FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "synthetic" {
            Ok(DatasetSource::Synthetic)
        } else if let Some(path) = s.strip_prefix("csv:") {
            if path.is_empty() {
                return Err(Error::Config("csv dataset needs a path".into()));
            }
            Ok(DatasetSource::Csv(PathBuf::from(path)))
        } else {
            Err(Error::Config(format!(
                "dataset must be `synthetic` or `csv:<path>`, got `{s}`"
            )))
        }
    }
}

/// Every knob of a run. Defaults reproduce the pinned synthetic setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub dataset: DatasetSource,
    /// Generator settings when `dataset` is synthetic; its task layout and
    /// seed are taken from the run.
    pub synthetic: SyntheticSpec,
    pub standardize: bool,
    pub tasks: usize,
    pub base_classes: Option<usize>,
    pub test_fraction: f64,
    pub memory: BudgetPolicy,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Defaults to half and three quarters of `epochs`.
    pub lr_decay_epochs: Option<Vec<usize>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub logit_scale: f64,
    pub tau: f64,
    pub gamma_exponent: f64,
    pub pt_epochs: usize,
    pub ot_epsilon: f64,
    pub ot_max_iterations: usize,
    pub ot_tolerance: f64,
    pub cost_normalization: CostNormalization,
    pub rt_refresh: RtRefresh,
    pub probe_random_draws: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Coil,
            dataset: DatasetSource::Synthetic,
            synthetic: SyntheticSpec::pinned(),
            standardize: false,
            tasks: 4,
            base_classes: None,
            test_fraction: 0.2,
            memory: BudgetPolicy::FixedPerClass(10),
            epochs: 30,
            lr: 0.1,
            lr_decay: 0.1,
            lr_decay_epochs: None,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 16,
            seed: DEFAULT_SEED,
            hidden_dims: vec![32],
            embed_dim: 8,
            logit_scale: 8.0,
            tau: 2.0,
            gamma_exponent: 2.0,
            pt_epochs: 5,
            ot_epsilon: 0.45,
            ot_max_iterations: 1000,
            ot_tolerance: 1e-6,
            cost_normalization: CostNormalization::DivideByMean,
            rt_refresh: RtRefresh::PerBatch,
            probe_random_draws: 64,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let value = value.trim();
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

impl RunConfig {
    /// Settings of the reference synthetic run: the defaults plus weight
    /// decay, which keeps embedding and classifier norms from growing until
    /// the cosine head stops adapting to later tasks.
    pub fn reference() -> Self {
        Self {
            weight_decay: 5e-3,
            ..Self::default()
        }
    }

    /// Sets one option from its textual form. Keys match the long CLI flags,
    /// with `-` and `_` interchangeable.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        let v = value.trim();
        match key.as_str() {
            "method" => self.method = v.parse()?,
            "dataset" => self.dataset = v.parse()?,
            "standardize" => self.standardize = parse(&key, v)?,
            "tasks" => self.tasks = parse(&key, v)?,
            "base-classes" => {
                self.base_classes = match v {
                    "" | "none" | "0" => None,
                    _ => Some(parse(&key, v)?),
                }
            }
            "test-fraction" => self.test_fraction = parse(&key, v)?,
            "memory" => self.memory = v.parse()?,
            "epochs" => self.epochs = parse(&key, v)?,
            "lr" => self.lr = parse(&key, v)?,
            "lr-decay" => self.lr_decay = parse(&key, v)?,
            "lr-decay-epochs" => self.lr_decay_epochs = Some(parse_list(&key, v)?),
            "momentum" => self.momentum = parse(&key, v)?,
            "weight-decay" => self.weight_decay = parse(&key, v)?,
            "batch-size" => self.batch_size = parse(&key, v)?,
            "seed" => self.seed = parse(&key, v)?,
            "hidden" | "hidden-dims" => self.hidden_dims = parse_list(&key, v)?,
            "embed-dim" => self.embed_dim = parse(&key, v)?,
            "logit-scale" => self.logit_scale = parse(&key, v)?,
            "tau" => self.tau = parse(&key, v)?,
            "gamma-exponent" => self.gamma_exponent = parse(&key, v)?,
            "pt-epochs" => self.pt_epochs = parse(&key, v)?,
            "ot-epsilon" => self.ot_epsilon = parse(&key, v)?,
            "ot-max-iterations" => self.ot_max_iterations = parse(&key, v)?,
            "ot-tolerance" => self.ot_tolerance = parse(&key, v)?,
            "cost-normalization" => {
                self.cost_normalization = match v {
                    "none" => CostNormalization::None,
                    "divide-by-mean" | "divide_by_mean" => CostNormalization::DivideByMean,
                    _ => return Err(Error::Config(format!("unknown cost normalization `{v}`"))),
                }
            }
            "rt-refresh" => {
                self.rt_refresh = match v {
                    "per-batch" | "per_batch" => RtRefresh::PerBatch,
                    "per-epoch" | "per_epoch" => RtRefresh::PerEpoch,
                    _ => return Err(Error::Config(format!("unknown rt refresh `{v}`"))),
                }
            }
            "probe-random-draws" => self.probe_random_draws = parse(&key, v)?,
            "synthetic-classes" => self.synthetic.num_classes = parse(&key, v)?,
            "synthetic-dims" => self.synthetic.dims = parse(&key, v)?,
            "synthetic-per-class" => self.synthetic.per_class = parse(&key, v)?,
            "synthetic-spread" => self.synthetic.center_spread = parse(&key, v)?,
            "synthetic-relatedness" => self.synthetic.relatedness = parse(&key, v)?,
            "synthetic-offset" => self.synthetic.related_offset = parse(&key, v)?,
            "synthetic-noise" => self.synthetic.noise_sigma = parse(&key, v)?,
            _ => return Err(Error::Config(format!("unknown option `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            self.apply(k, v)
                .map_err(|e| Error::Config(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn decay_epochs(&self) -> Vec<usize> {
        self.lr_decay_epochs
            .clone()
            .unwrap_or_else(|| vec![self.epochs / 2, 3 * self.epochs / 4])
            .into_iter()
            .filter(|&e| e > 0 && e < self.epochs)
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay: self.lr_decay,
            lr_decay_epochs: self.decay_epochs(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            rt_refresh: self.rt_refresh,
            center_refresh: CenterRefresh::PerEpoch,
            probe_random_draws: self.probe_random_draws,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda_policy: LambdaPolicy::ClassRatio,
            gamma_exponent: self.gamma_exponent,
            pt_epochs: self.pt_epochs,
        }
    }

    pub fn ot_config(&self) -> OtConfig {
        OtConfig {
            epsilon: self.ot_epsilon,
            max_iterations: self.ot_max_iterations,
            tolerance: self.ot_tolerance,
            cost_normalization: self.cost_normalization,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_tasks: self.tasks,
            base_classes: self.base_classes,
            seed: self.seed,
            ..self.synthetic.clone()
        }
    }

    /// Checks everything that can be checked without training, including
    /// that a CSV dataset exists.
    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.loss_config().validate()?;
        self.ot_config().validate()?;
        if self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if !(self.logit_scale > 0.0) {
            return Err(Error::Config("logit scale must be positive".into()));
        }
        match &self.dataset {
            DatasetSource::Synthetic => self.synthetic_spec().validate()?,
            DatasetSource::Csv(path) => {
                if !path.is_file() {
                    return Err(Error::Config(format!("dataset file `{}` not found", path.display())));
                }
            }
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Synthetic => generate_synthetic(&self.synthetic_spec()),
            DatasetSource::Csv(path) => load_csv(
                path,
                &CsvSchema {
                    standardize: self.standardize,
                    ..CsvSchema::default()
                },
            ),
        }
    }

    pub fn stream(&self) -> Result<TaskStream> {
        let ds = self.load_dataset()?;
        build_stream(
            &ds,
            &StreamConfig {
                num_tasks: self.tasks,
                base_classes: self.base_classes,
                seed: self.seed,
                test_fraction: self.test_fraction,
            },
        )
    }

    pub fn trainer(&self) -> Result<Trainer> {
        Trainer::new(self.method, self.train_config(), self.loss_config(), self.ot_config())
    }

    /// Freshly initialized model for a stream with `input_dim` features.
    pub fn initial_model(&self, input_dim: usize) -> Result<Model> {
        let mut g = rng::derive(self.seed, &[tags::MODEL_INIT]);
        Model::new(
            EmbeddingConfig::new(input_dim, self.hidden_dims.clone(), self.embed_dim),
            self.logit_scale,
            &mut g,
        )
    }

    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }
}

/// A run in progress, advanced one task at a time.
pub struct Experiment {
    pub config: RunConfig,
    pub stream: TaskStream,
    pub trainer: Trainer,
    pub state: StageState,
    pub stages: Vec<StageEval>,
    pub epochs: Vec<EpochRecord>,
    pub probes: Vec<InitProbe>,
    pub warnings: Vec<String>,
    started: Instant,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let stream = config.stream()?;
        Self::with_stream(config, stream)
    }

    pub fn with_stream(config: RunConfig, stream: TaskStream) -> Result<Self> {
        let trainer = config.trainer()?;
        let model = config.initial_model(stream.input_dim())?;
        let state = StageState::new(model, ExemplarStore::new(config.memory));
        Ok(Self {
            config,
            stream,
            trainer,
            state,
            stages: Vec::new(),
            epochs: Vec::new(),
            probes: Vec::new(),
            warnings: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn next_task(&self) -> Option<&Task> {
        self.stream.tasks.get(self.state.completed_tasks)
    }

    pub fn is_done(&self) -> bool {
        self.next_task().is_none()
    }

    /// Trains on the next task, refreshes the memory and evaluates.
    pub fn step(&mut self) -> Result<&StageEval> {
        let idx = self.state.completed_tasks;
        let task = self
            .stream
            .tasks
            .get(idx)
            .ok_or_else(|| Error::State("all tasks already trained".into()))?;
        let outcome = self.trainer.run_task(&mut self.state, task)?;
        self.trainer.update_memory(&mut self.state, task)?;
        let eval = evaluate_stage(&self.state.model, &self.stream, idx + 1)?;
        self.epochs.extend(outcome.epochs);
        self.probes.extend(outcome.probe);
        self.warnings
            .extend(outcome.warnings.into_iter().map(|w| format!("task {}: {w}", idx + 1)));
        self.stages.push(eval);
        Ok(self.stages.last().expect("just pushed"))
    }

    pub fn report(&self) -> RunReport {
        let mut report = RunReport::from_stages(self.config.clone(), &self.stream, &self.stages);
        report.epochs = self.epochs.clone();
        report.init_probes = self.probes.clone();
        report.warnings = self.warnings.clone();
        report.metadata = Some(RunMetadata {
            created_unix_secs: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            elapsed_secs: self.started.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        });
        report
    }

    pub fn run_to_end(mut self) -> Result<(RunReport, StageState)> {
        while !self.is_done() {
            self.step()?;
        }
        Ok((self.report(), self.state))
    }
}

/// Trains and evaluates `config` on every task of its stream.
pub fn run_experiment(config: &RunConfig) -> Result<RunReport> {
    Ok(Experiment::new(config.clone())?.run_to_end()?.0)
}
