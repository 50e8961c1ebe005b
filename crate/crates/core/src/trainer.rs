//! Per-task training: classifier augmentation, rehearsal, co-transport
//! losses and SGD, plus the baseline and ablation methods.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::{inputs_matrix, labels_of, Instance, Task};
use crate::diffnet::{argmax_rows, cosine_logits, random_columns, Batch, Model, ModelSnapshot, Sgd};
use crate::error::{Error, Result};
use crate::losses::{evaluate, gamma_schedule, DistillContext, LossBreakdown, LossConfig, LossSpec};
use crate::memory::ExemplarStore;
use crate::ot::{compute_class_centers, transport_classifier, transport_from_centers, ClassCenters, LabeledSet, OtConfig, Transported};
use crate::rng::{self, tags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Cross-entropy on new data only.
    Finetune,
    /// Rehearsal with `(1 - lambda) CE + lambda KD`.
    ReplayKd,
    /// Full co-transport: replay + KD + PT init/loss + RT loss.
    Coil,
    /// Replay + KD with prospective transport only.
    PtOnly,
    /// Replay + KD with retrospective transport only.
    RtOnly,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Finetune, Method::ReplayKd, Method::PtOnly, Method::RtOnly, Method::Coil];

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::ReplayKd => "replay_kd",
            Method::Coil => "coil",
            Method::PtOnly => "pt_only",
            Method::RtOnly => "rt_only",
        }
    }

    pub fn uses_memory(self) -> bool {
        self != Method::Finetune
    }

    pub fn uses_kd(self) -> bool {
        self != Method::Finetune
    }

    pub fn uses_pt(self) -> bool {
        matches!(self, Method::Coil | Method::PtOnly)
    }

    pub fn uses_rt(self) -> bool {
        matches!(self, Method::Coil | Method::RtOnly)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// How often the retrospective mixing weights are re-solved. Centers are
/// cached per epoch either way, so both settings give the same numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RtRefresh {
    PerBatch,
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterRefresh {
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub rt_refresh: RtRefresh,
    pub center_refresh: CenterRefresh,
    /// Random classifier draws averaged by the initialization probe; 0 turns
    /// the probe off.
    pub probe_random_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 0.1,
            lr_decay: 0.1,
            lr_decay_epochs: vec![15, 23],
            momentum: 0.9,
            weight_decay: 0.0,
            seed: crate::datasets::DEFAULT_SEED,
            rt_refresh: RtRefresh::PerBatch,
            center_refresh: CenterRefresh::PerEpoch,
            probe_random_draws: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if let Some(e) = self.lr_decay_epochs.iter().find(|&&e| self.epochs > 0 && e >= self.epochs) {
            return Err(Error::Config(format!(
                "decay epoch {e} not below total epochs {}",
                self.epochs
            )));
        }
        Ok(())
    }

    /// Step schedule: `lr * decay^(number of decay epochs <= epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay.powi(steps as i32)
    }
}

/// Everything carried from one task to the next.
#[derive(Debug, Clone)]
pub struct StageState {
    pub model: Model,
    /// Frozen model captured before training on the current task.
    pub snapshot: Option<ModelSnapshot>,
    /// Transport-initialized new-class classifier of the current task.
    pub transported_new: Option<Array2<f64>>,
    pub memory: ExemplarStore,
    pub completed_tasks: usize,
}

impl StageState {
    pub fn new(model: Model, memory: ExemplarStore) -> Self {
        Self {
            model,
            snapshot: None,
            transported_new: None,
            memory,
            completed_tasks: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub batches: usize,
    /// Instance-weighted mean over the epoch's batches.
    pub loss: LossBreakdown,
}

/// New-class accuracy right after classifier augmentation, restricted to
/// the new classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitProbe {
    pub stage: usize,
    pub new_classes: usize,
    pub pt_accuracy: f64,
    pub ncm_accuracy: f64,
    /// Mean over the configured number of random classifier draws.
    pub random_accuracy: f64,
    pub chance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub epochs: Vec<EpochRecord>,
    pub probe: Option<InitProbe>,
    pub warnings: Vec<String>,
}

/// Nearest-class-mean prediction in normalized embedding space.
///
/// Class means come from `representatives`; every class in `classes` needs
/// at least one. Ties go to the lowest class id.
pub fn ncm_predict(model: &Model, representatives: &[Instance], classes: &[usize], queries: ArrayView2<f64>) -> Result<Vec<usize>> {
    let mut classes = classes.to_vec();
    classes.sort_unstable();
    for c in &classes {
        if !representatives.iter().any(|r| r.label == *c) {
            return Err(Error::State(format!("class {c} has no representatives")));
        }
    }
    let z = model.embed(inputs_matrix(representatives).view())?;
    let centers = compute_class_centers(z.view(), &labels_of(representatives), &classes)?;
    let unit = |v: ndarray::ArrayView1<f64>| {
        let n = v.dot(&v).sqrt().max(crate::diffnet::NORM_FLOOR);
        v.mapv(|x| x / n)
    };
    let means: Vec<_> = centers.centers.rows().into_iter().map(unit).collect();
    let q = model.embed(queries)?;
    Ok(q.rows()
        .into_iter()
        .map(|row| {
            let u = unit(row);
            let mut best = (0, f64::INFINITY);
            for (k, m) in means.iter().enumerate() {
                let d: f64 = (&u - m).mapv(|x| x * x).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            classes[best.0]
        })
        .collect())
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

fn group_by_label(instances: &[Instance]) -> BTreeMap<usize, Vec<Instance>> {
    let mut out: BTreeMap<usize, Vec<Instance>> = BTreeMap::new();
    for inst in instances {
        out.entry(inst.label).or_default().push(inst.clone());
    }
    out
}

/// Runs one method with fixed configs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub method: Method,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub ot: OtConfig,
}

impl Trainer {
    pub fn new(method: Method, train: TrainConfig, loss: LossConfig, ot: OtConfig) -> Result<Self> {
        train.validate()?;
        loss.validate()?;
        ot.validate()?;
        Ok(Self { method, train, loss, ot })
    }

    /// Transports the old classifier onto the new task's classes: origin
    /// centers from the exemplars, goal centers from all new training data,
    /// both under the current embedding.
    pub fn pt_initialize(&self, state: &StageState, task: &Task) -> Result<Transported> {
        if task.index < 2 {
            return Err(Error::State("prospective transport needs an earlier task".into()));
        }
        if state.memory.is_empty() {
            return Err(Error::State("exemplar store is empty".into()));
        }
        let num_old = state.model.num_classes();
        let old_classes: Vec<usize> = (0..num_old).collect();
        let exemplars = state.memory.instances();
        let origin_inputs = inputs_matrix(&exemplars);
        let origin_labels = labels_of(&exemplars);
        let goal_inputs = inputs_matrix(&task.train);
        let goal_labels = labels_of(&task.train);
        let goal_classes: Vec<usize> = task.local_classes().collect();
        let model = &state.model;
        transport_classifier(
            LabeledSet {
                inputs: origin_inputs.view(),
                labels: &origin_labels,
                classes: &old_classes,
            },
            LabeledSet {
                inputs: goal_inputs.view(),
                labels: &goal_labels,
                classes: &goal_classes,
            },
            model.head.view(),
            |x| model.embed(x),
            &self.ot,
        )
    }

    /// Compares PT, NCM and random initializations of the new classifier on
    /// the new classes' test data, before any training on the task.
    pub fn probe_initializations(&self, state: &StageState, task: &Task) -> Result<InitProbe> {
        let offset = task.class_offset;
        let k = task.num_classes();
        let test_inputs = inputs_matrix(&task.test);
        let truth = labels_of(&task.test);
        let z = state.model.embed(test_inputs.view())?;
        let predict_new = |w: ArrayView2<f64>| -> Vec<usize> {
            argmax_rows(cosine_logits(z.view(), w, state.model.logit_scale).view())
                .into_iter()
                .map(|p| p + offset)
                .collect()
        };

        let pt = self.pt_initialize(state, task)?;
        let pt_accuracy = accuracy(&predict_new(pt.weights.view()), &truth);

        let classes: Vec<usize> = task.local_classes().collect();
        let ncm = ncm_predict(&state.model, &task.train, &classes, test_inputs.view())?;
        let ncm_accuracy = accuracy(&ncm, &truth);

        let draws = self.train.probe_random_draws.max(1);
        let random_accuracy = (0..draws)
            .map(|r| {
                let mut g = rng::derive(self.train.seed, &[tags::PROBE, task.index as u64, r as u64]);
                let w = random_columns(&mut g, state.model.embed_dim(), k);
                accuracy(&predict_new(w.view()), &truth)
            })
            .sum::<f64>()
            / draws as f64;

        Ok(InitProbe {
            stage: task.index,
            new_classes: k,
            pt_accuracy,
            ncm_accuracy,
            random_accuracy,
            chance: 1.0 / k as f64,
        })
    }

    fn loss_spec(&self, num_old: usize, num_total: usize, epoch: usize, has_snapshot: bool) -> Result<LossSpec> {
        if !has_snapshot {
            return Ok(LossSpec::ce_only());
        }
        let m = self.method;
        Ok(LossSpec {
            tau: self.loss.tau,
            use_kd: m.uses_kd(),
            use_pt: m.uses_pt(),
            use_rt: m.uses_rt(),
            lambda: if m.uses_kd() { self.loss.lambda(num_old, num_total) } else { 0.0 },
            gamma: if m.uses_rt() {
                gamma_schedule(epoch, self.train.epochs.max(1), self.loss.gamma_exponent)?
            } else {
                0.0
            },
            pt_active: m.uses_pt() && epoch < self.loss.pt_epochs,
        })
    }

    /// Centers for retrospective transport under the current embedding:
    /// origin = new classes from the task data, goal = old classes from the
    /// exemplars.
    fn rt_centers(&self, state: &StageState, task: &Task, num_old: usize) -> Result<(ClassCenters, ClassCenters)> {
        let new_z = state.model.embed(inputs_matrix(&task.train).view())?;
        let new_classes: Vec<usize> = task.local_classes().collect();
        let origin = compute_class_centers(new_z.view(), &labels_of(&task.train), &new_classes)?;
        let exemplars = state.memory.instances();
        let old_z = state.model.embed(inputs_matrix(&exemplars).view())?;
        let old_classes: Vec<usize> = (0..num_old).collect();
        let goal = compute_class_centers(old_z.view(), &labels_of(&exemplars), &old_classes)?;
        Ok((origin, goal))
    }

    /// Transports the live new-class classifier onto the old classes, as the
    /// RT term does during training on `task`.
    pub fn rt_transport(&self, state: &StageState, task: &Task) -> Result<Transported> {
        let num_old = task.class_offset;
        if state.model.num_classes() != num_old + task.num_classes() {
            return Err(Error::State("classifier has not been augmented for this task".into()));
        }
        let (origin, goal) = self.rt_centers(state, task, num_old)?;
        let w_new = state.model.head.slice(ndarray::s![.., num_old..]);
        transport_from_centers(&origin, &goal, w_new, &self.ot)
    }

    fn rt_mixing(&self, state: &StageState, centers: &(ClassCenters, ClassCenters), num_old: usize, warnings: &mut Vec<String>) -> Result<Array2<f64>> {
        let w_new = state.model.head.slice(ndarray::s![.., num_old..]);
        let t = transport_from_centers(&centers.0, &centers.1, w_new, &self.ot)?;
        if !t.plan.converged {
            warnings.push(format!(
                "retrospective transport did not converge (violation {:.3e})",
                t.plan.max_violation
            ));
        }
        Ok(t.mixing)
    }

    /// Trains the model on one task.
    ///
    /// Captures the snapshot, augments the classifier, then runs the
    /// configured epochs over the task data (plus exemplars for memory
    /// methods). The exemplar store is left untouched; see
    /// [`Trainer::update_memory`].
    pub fn run_task(&self, state: &mut StageState, task: &Task) -> Result<TaskOutcome> {
        let b = task.index;
        if state.completed_tasks + 1 != b {
            return Err(Error::State(format!(
                "state has {} completed tasks, got task {b}",
                state.completed_tasks
            )));
        }
        if state.model.num_classes() != task.class_offset {
            return Err(Error::State(format!(
                "model knows {} classes, task starts at {}",
                state.model.num_classes(),
                task.class_offset
            )));
        }
        let mut outcome = TaskOutcome::default();
        let num_old = task.class_offset;
        let num_total = num_old + task.num_classes();

        let snapshot = (b >= 2).then(|| ModelSnapshot::capture(&state.model));
        if b >= 2 && self.train.probe_random_draws > 0 && !state.memory.is_empty() {
            outcome.probe = Some(self.probe_initializations(state, task)?);
        }

        let transported_new = if b >= 2 && self.method.uses_pt() {
            let t = self.pt_initialize(state, task)?;
            if !t.plan.converged {
                outcome.warnings.push(format!(
                    "prospective transport did not converge (violation {:.3e})",
                    t.plan.max_violation
                ));
            }
            Some(t.weights)
        } else {
            None
        };
        let new_columns = match &transported_new {
            Some(w) => w.clone(),
            None => {
                let mut g = rng::derive(self.train.seed, &[tags::CLASSIFIER_INIT, b as u64]);
                random_columns(&mut g, state.model.embed_dim(), task.num_classes())
            }
        };
        state.model.add_classes(new_columns.view())?;
        state.snapshot = snapshot;
        state.transported_new = transported_new;

        let mut data: Vec<&Instance> = task.train.iter().collect();
        let exemplars = state.memory.instances();
        if self.method.uses_memory() && b >= 2 {
            data.extend(exemplars.iter());
        }
        let inputs = Array2::from_shape_fn((data.len(), task.train.first().map_or(0, |i| i.features.len())), |(r, c)| {
            data[r].features[c]
        });
        let labels: Vec<usize> = data.iter().map(|i| i.label).collect();

        let mut opt = Sgd::new(self.train.momentum, self.train.weight_decay);
        let use_rt = b >= 2 && self.method.uses_rt();
        for epoch in 0..self.train.epochs {
            let lr = self.train.lr_at(epoch);
            let spec = self.loss_spec(num_old, num_total, epoch, state.snapshot.is_some())?;
            let centers = if use_rt { Some(self.rt_centers(state, task, num_old)?) } else { None };
            let mut epoch_mixing = match (&centers, self.train.rt_refresh) {
                (Some(c), RtRefresh::PerEpoch) => Some(self.rt_mixing(state, c, num_old, &mut outcome.warnings)?),
                _ => None,
            };

            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng::derive(self.train.seed, &[tags::BATCH_ORDER, b as u64, epoch as u64]));

            let mut sum = LossBreakdown::default();
            let mut seen = 0usize;
            let mut batches = 0usize;
            for chunk in order.chunks(self.train.batch_size) {
                let batch = Batch::new(inputs.select(Axis(0), chunk), chunk.iter().map(|&i| labels[i]).collect())?;
                if let (Some(c), RtRefresh::PerBatch) = (&centers, self.train.rt_refresh) {
                    epoch_mixing = Some(self.rt_mixing(state, c, num_old, &mut outcome.warnings)?);
                }
                let (breakdown, grads) = match &state.snapshot {
                    Some(snapshot) => {
                        let ctx = DistillContext {
                            snapshot,
                            transported_new: state.transported_new.as_ref().map(|w| w.view()),
                            rt_mixing: epoch_mixing.as_ref().map(|m| m.view()),
                        };
                        evaluate(&state.model, &batch, Some(&ctx), &spec, true)
                    }
                    None => evaluate(&state.model, &batch, None, &spec, true),
                }
                .map_err(|e| match e {
                    Error::Numeric(what) => Error::Numeric(format!("{what} (task {b}, epoch {epoch}, batch {batches})")),
                    other => other,
                })?;
                let grads = grads.expect("requested gradients");
                opt.step(&mut state.model, &grads, lr)?;

                let w = batch.len() as f64;
                sum.ce += w * breakdown.ce;
                sum.kd += w * breakdown.kd;
                sum.pt += w * breakdown.pt;
                sum.rt += w * breakdown.rt;
                sum.total += w * breakdown.total;
                seen += batch.len();
                batches += 1;
            }
            let n = seen.max(1) as f64;
            let loss = LossBreakdown {
                ce: sum.ce / n,
                kd: sum.kd / n,
                pt: sum.pt / n,
                rt: sum.rt / n,
                total: sum.total / n,
                lambda_value: if spec.use_kd { spec.lambda } else { 0.0 },
                gamma_value: if spec.use_rt { spec.gamma } else { 0.0 },
            };
            outcome.epochs.push(EpochRecord {
                task: b,
                epoch,
                lr,
                lambda: loss.lambda_value,
                gamma: loss.gamma_value,
                batches,
                loss,
            });
        }
        outcome.warnings.dedup();
        state.completed_tasks = b;
        Ok(outcome)
    }

    /// Herding-selects exemplars for the task's classes with the current
    /// embedding and rebalances the store. No-op for memory-free methods.
    pub fn update_memory(&self, state: &mut StageState, task: &Task) -> Result<()> {
        if !self.method.uses_memory() {
            return Ok(());
        }
        let groups = group_by_label(&task.train);
        let model = &state.model;
        state.memory.add_classes(&groups, |x| model.embed(x))
    }
}
