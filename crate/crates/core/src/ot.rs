//! Entropic optimal transport between class sets.
//!
//! Classes are summarized by the mean of their embeddings, the cost between
//! two class sets is the squared Euclidean distance between centers, and the
//! entropic Kantorovich problem
//!
//! ```text
//! min_T <T, C> + eps * sum T log T    s.t.  T 1 = mu1,  T^T 1 = mu2,  T >= 0
//! ```
//!
//! is solved with Sinkhorn iterations carried out in the log domain. The
//! resulting coupling turns a classifier for the origin classes into one for
//! the goal classes: each goal column is a convex combination of origin
//! columns, weighted by the column-normalized plan.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Embedding-space mean of every requested class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    pub labels: Vec<usize>,
    /// One row per label, `labels.len() x d`.
    pub centers: Array2<f64>,
}

impl ClassCenters {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }
}

/// Pairwise squared distances between origin and goal centers.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub values: Array2<f64>,
}

impl CostMatrix {
    /// Wraps raw values, rejecting negative or non-finite entries.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite cost entry {bad}")));
        }
        if let Some(bad) = values.iter().find(|v| **v < 0.0) {
            return Err(Error::Input(format!("negative cost entry {bad}")));
        }
        Ok(Self { values })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostNormalization {
    None,
    /// Divide every entry by the mean entry, so `epsilon` is scale free.
    DivideByMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OtConfig {
    /// Entropic regularization strength, applied to the (normalized) cost.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Largest tolerated marginal violation.
    pub tolerance: f64,
    pub cost_normalization: CostNormalization,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.45,
            max_iterations: 1000,
            tolerance: 1e-6,
            cost_normalization: CostNormalization::DivideByMean,
        }
    }
}

impl OtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Solution of the entropic OT problem.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// Coupling, `alpha x beta`.
    pub plan: Array2<f64>,
    pub mu1: Array1<f64>,
    pub mu2: Array1<f64>,
    pub converged: bool,
    pub iterations_used: usize,
    /// Max absolute row/column marginal violation of `plan`.
    pub max_violation: f64,
}

impl TransportPlan {
    /// `<T, C>` against the unnormalized cost.
    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        (&self.plan * &cost.values).sum()
    }

    /// Column-normalized plan: entry `(i, j)` is the share of goal class `j`
    /// drawn from origin class `i`. Every column sums to one.
    pub fn mixing_weights(&self) -> Array2<f64> {
        let mut rho = self.plan.clone();
        for mut col in rho.columns_mut() {
            let total: f64 = col.sum();
            if total > 0.0 {
                col.mapv_inplace(|v| v / total);
            } else {
                let n = col.len() as f64;
                col.fill(1.0 / n);
            }
        }
        rho
    }
}

/// Uniform simplex vector of length `n`.
pub fn uniform_marginal(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

/// Mean embedding of each class in `labels`, in that order.
///
/// `embeddings` holds one row per instance, `instance_labels` the matching
/// class ids.
pub fn compute_class_centers(
    embeddings: ArrayView2<f64>,
    instance_labels: &[usize],
    labels: &[usize],
) -> Result<ClassCenters> {
    if embeddings.nrows() != instance_labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings but {} labels",
            embeddings.nrows(),
            instance_labels.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = labels.iter().find(|l| !seen.insert(**l)) {
        return Err(Error::Input(format!("duplicate class label {dup}")));
    }
    let d = embeddings.ncols();
    let mut centers = Array2::<f64>::zeros((labels.len(), d));
    let slot: std::collections::HashMap<usize, usize> =
        labels.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let mut counts = vec![0usize; labels.len()];
    for (row, label) in embeddings.outer_iter().zip(instance_labels) {
        if let Some(&k) = slot.get(label) {
            let mut c = centers.row_mut(k);
            c += &row;
            counts[k] += 1;
        }
    }
    for (k, (mut c, &n)) in centers.outer_iter_mut().zip(&counts).enumerate() {
        if n == 0 {
            return Err(Error::MissingClass(labels[k]));
        }
        c.mapv_inplace(|v| v / n as f64);
    }
    Ok(ClassCenters {
        labels: labels.to_vec(),
        centers,
    })
}

/// Squared Euclidean distance between every origin and goal center.
pub fn compute_cost(origin: &ClassCenters, goal: &ClassCenters) -> Result<CostMatrix> {
    if origin.dim() != goal.dim() {
        return Err(Error::Shape(format!(
            "origin centers have dimension {}, goal centers {}",
            origin.dim(),
            goal.dim()
        )));
    }
    let values = Array2::from_shape_fn((origin.len(), goal.len()), |(n, m)| {
        squared_distance(origin.centers.row(n), goal.centers.row(m))
    });
    CostMatrix::new(values)
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_marginal(mu: &Array1<f64>, n: usize, name: &str) -> Result<()> {
    if mu.len() != n {
        return Err(Error::Shape(format!(
            "{name} has length {}, cost has {n}",
            mu.len()
        )));
    }
    if mu.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Input(format!("{name} must be strictly positive")));
    }
    let total = mu.sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn max_violation(plan: &Array2<f64>, mu1: &Array1<f64>, mu2: &Array1<f64>) -> f64 {
    let rows = plan.sum_axis(Axis(1));
    let cols = plan.sum_axis(Axis(0));
    let r = rows
        .iter()
        .zip(mu1)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let c = cols
        .iter()
        .zip(mu2)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    r.max(c)
}

/// Entropic OT via log-domain Sinkhorn iterations.
///
/// Works on dual potentials `f`, `g` so `exp(-C / eps)` is never formed
/// explicitly and no row of the kernel can underflow to zero. A plan that
/// misses the tolerance within `max_iterations` comes back with
/// `converged == false`.
pub fn sinkhorn(
    cost: &CostMatrix,
    mu1: &Array1<f64>,
    mu2: &Array1<f64>,
    cfg: &OtConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    let (alpha, beta) = cost.shape();
    if alpha == 0 || beta == 0 {
        return Err(Error::Shape("empty cost matrix".into()));
    }
    if cost.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("cost matrix has non-finite entries".into()));
    }
    check_marginal(mu1, alpha, "mu1")?;
    check_marginal(mu2, beta, "mu2")?;

    let scale = match cfg.cost_normalization {
        CostNormalization::None => 1.0,
        CostNormalization::DivideByMean => {
            let m = cost.mean();
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };
    let c = cost.values.mapv(|v| v / scale);
    let eps = cfg.epsilon;
    let log_mu1 = mu1.mapv(f64::ln);
    let log_mu2 = mu2.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(alpha);
    let mut g = Array1::<f64>::zeros(beta);

    let assemble = |f: &Array1<f64>, g: &Array1<f64>| {
        Array2::from_shape_fn((alpha, beta), |(i, j)| ((f[i] + g[j] - c[[i, j]]) / eps).exp())
    };

    let mut iterations_used = 0;
    let mut converged = false;
    let mut plan = assemble(&f, &g);
    let mut violation = max_violation(&plan, mu1, mu2);
    for it in 1..=cfg.max_iterations {
        for i in 0..alpha {
            let row = c.row(i);
            let lse = log_sum_exp((0..beta).map(|j| (g[j] - row[j]) / eps));
            f[i] = eps * (log_mu1[i] - lse);
        }
        for j in 0..beta {
            let col = c.column(j);
            let lse = log_sum_exp((0..alpha).map(|i| (f[i] - col[i]) / eps));
            g[j] = eps * (log_mu2[j] - lse);
        }
        plan = assemble(&f, &g);
        violation = max_violation(&plan, mu1, mu2);
        iterations_used = it;
        if violation <= cfg.tolerance {
            converged = true;
            break;
        }
    }

    Ok(TransportPlan {
        plan,
        mu1: mu1.clone(),
        mu2: mu2.clone(),
        converged,
        iterations_used,
        max_violation: violation,
    })
}

/// A classifier transported onto a new class set.
#[derive(Debug, Clone)]
pub struct Transported {
    /// Goal classifier, `d x beta`.
    pub weights: Array2<f64>,
    /// Column-stochastic mixing weights, `alpha x beta`.
    pub mixing: Array2<f64>,
    pub plan: TransportPlan,
    pub cost: CostMatrix,
}

/// Instances of several classes, as raw inputs.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSet<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
    /// Classes to build centers for, in column order of the classifier.
    pub classes: &'a [usize],
}

/// Blends origin classifier columns according to the plan between two sets
/// of class centers, under uniform marginals.
pub fn transport_from_centers(
    origin: &ClassCenters,
    goal: &ClassCenters,
    w_origin: ArrayView2<f64>,
    cfg: &OtConfig,
) -> Result<Transported> {
    transport_with_marginals(
        origin,
        goal,
        w_origin,
        &uniform_marginal(origin.len()),
        &uniform_marginal(goal.len()),
        cfg,
    )
}

/// Same as [`transport_from_centers`] with explicit class priors.
pub fn transport_with_marginals(
    origin: &ClassCenters,
    goal: &ClassCenters,
    w_origin: ArrayView2<f64>,
    mu1: &Array1<f64>,
    mu2: &Array1<f64>,
    cfg: &OtConfig,
) -> Result<Transported> {
    if w_origin.ncols() != origin.len() {
        return Err(Error::Shape(format!(
            "origin classifier has {} columns for {} origin classes",
            w_origin.ncols(),
            origin.len()
        )));
    }
    let cost = compute_cost(origin, goal)?;
    let plan = sinkhorn(&cost, mu1, mu2, cfg)?;
    let mixing = plan.mixing_weights();
    let weights = w_origin.dot(&mixing);
    Ok(Transported {
        weights,
        mixing,
        plan,
        cost,
    })
}

/// Synthesizes a goal classifier from an origin classifier.
///
/// Centers of both sets are taken in the embedding space given by `embed`,
/// the plan is solved with uniform marginals, and goal column `j` becomes
/// `sum_i rho_ij * w_origin[:, i]` with `rho` the column-normalized plan.
pub fn transport_classifier<F>(
    origin: LabeledSet<'_>,
    goal: LabeledSet<'_>,
    w_origin: ArrayView2<f64>,
    embed: F,
    cfg: &OtConfig,
) -> Result<Transported>
where
    F: Fn(ArrayView2<f64>) -> Result<Array2<f64>>,
{
    let origin_z = embed(origin.inputs)?;
    let goal_z = embed(goal.inputs)?;
    let origin_centers = compute_class_centers(origin_z.view(), origin.labels, origin.classes)?;
    let goal_centers = compute_class_centers(goal_z.view(), goal.labels, goal.classes)?;
    transport_from_centers(&origin_centers, &goal_centers, w_origin, cfg)
}
