//! Exemplar memory: herding selection and budget management.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datasets::{inputs_matrix, Instance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetPolicy {
    /// At most `K` exemplars across all classes, split as evenly as possible.
    FixedTotal(usize),
    /// `m` exemplars for every class.
    FixedPerClass(usize),
}

impl std::fmt::Display for BudgetPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BudgetPolicy::FixedTotal(k) => write!(f, "total:{k}"),
            BudgetPolicy::FixedPerClass(m) => write!(f, "per-class:{m}"),
        }
    }
}

impl std::str::FromStr for BudgetPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, n) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("memory must be total:K or per-class:m, got `{s}`")))?;
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("invalid memory size `{n}`")))?;
        match kind.trim() {
            "total" => Ok(BudgetPolicy::FixedTotal(n)),
            "per-class" | "per_class" => Ok(BudgetPolicy::FixedPerClass(n)),
            other => Err(Error::Config(format!("unknown memory policy `{other}`"))),
        }
    }
}

/// Per-class quotas: `floor(K / n)` each, remainder to the lowest class ids.
pub fn quotas(policy: BudgetPolicy, classes: &[usize]) -> BTreeMap<usize, usize> {
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    match policy {
        BudgetPolicy::FixedPerClass(m) => sorted.into_iter().map(|c| (c, m)).collect(),
        BudgetPolicy::FixedTotal(k) => {
            let n = sorted.len().max(1);
            let (q, r) = (k / n, k % n);
            sorted
                .into_iter()
                .enumerate()
                .map(|(i, c)| (c, q + usize::from(i < r)))
                .collect()
        }
    }
}

/// Greedy herding order over a class's embeddings.
///
/// Step `k` picks the unchosen row minimizing
/// `|mu - (sum of chosen + candidate) / k|`; ties go to the lowest index.
pub fn herding_order(embeddings: ArrayView2<f64>, m: usize) -> Result<Vec<usize>> {
    let n = embeddings.nrows();
    if m > n {
        return Err(Error::Budget(format!("requested {m} exemplars from {n} instances")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mu: Array1<f64> = embeddings.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let mut running = Array1::<f64>::zeros(embeddings.ncols());
    let mut taken = vec![false; n];
    let mut order = Vec::with_capacity(m);
    for k in 1..=m {
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in embeddings.outer_iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist: f64 = mu
                .iter()
                .zip(running.iter().zip(row.iter()))
                .map(|(u, (s, x))| {
                    let d = u - (s + x) / k as f64;
                    d * d
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (pick, _) = best.expect("candidates remain");
        taken[pick] = true;
        running += &embeddings.row(pick);
        order.push(pick);
    }
    Ok(order)
}

/// Herding over the embeddings of one class's instances.
pub fn herding_select<F>(instances: &[Instance], embed: F, m: usize) -> Result<Vec<Instance>>
where
    F: Fn(ArrayView2<f64>) -> Result<Array2<f64>>,
{
    if m > instances.len() {
        return Err(Error::Budget(format!(
            "requested {m} exemplars from {} instances",
            instances.len()
        )));
    }
    if instances.is_empty() {
        return Ok(Vec::new());
    }
    let z = embed(inputs_matrix(instances).view())?;
    Ok(herding_order(z.view(), m)?
        .into_iter()
        .map(|i| instances[i].clone())
        .collect())
}

/// Retained raw instances per class, each list in herding order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub policy: BudgetPolicy,
    pub classes: BTreeMap<usize, Vec<Instance>>,
}

impl ExemplarStore {
    pub fn new(policy: BudgetPolicy) -> Self {
        Self {
            policy,
            classes: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.classes.values().all(Vec::is_empty)
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.keys().copied().collect()
    }

    /// All exemplars, by class id then herding order.
    pub fn instances(&self) -> Vec<Instance> {
        self.classes.values().flatten().cloned().collect()
    }

    pub fn insert_class(&mut self, label: usize, exemplars: Vec<Instance>) {
        self.classes.insert(label, exemplars);
    }

    /// Quota each class would get once `total_classes` classes are stored,
    /// assuming stream-local ids `0..total_classes`.
    pub fn quotas_for(&self, total_classes: usize) -> BTreeMap<usize, usize> {
        let ids: Vec<usize> = (0..total_classes).collect();
        quotas(self.policy, &ids)
    }

    /// Adds herding-selected exemplars for new classes, then truncates every
    /// class to its quota.
    pub fn add_classes<F>(&mut self, new_classes: &BTreeMap<usize, Vec<Instance>>, embed: F) -> Result<()>
    where
        F: Fn(ArrayView2<f64>) -> Result<Array2<f64>>,
    {
        let total = self.classes.len() + new_classes.keys().filter(|c| !self.classes.contains_key(c)).count();
        let mut ids: Vec<usize> = self.class_ids();
        ids.extend(new_classes.keys().copied());
        ids.sort_unstable();
        ids.dedup();
        debug_assert_eq!(ids.len(), total);
        let quota = quotas(self.policy, &ids);
        for (&label, members) in new_classes {
            let m = quota[&label].min(members.len());
            let chosen = herding_select(members, &embed, m)?;
            self.classes.insert(label, chosen);
        }
        *self = rebalance(std::mem::replace(self, ExemplarStore::new(self.policy)), &ids);
        Ok(())
    }
}

/// Truncates every class list to its quota prefix for the given class set.
/// A per-class policy leaves the store as is.
pub fn rebalance(mut store: ExemplarStore, classes: &[usize]) -> ExemplarStore {
    if let BudgetPolicy::FixedTotal(_) = store.policy {
        let quota = quotas(store.policy, classes);
        for (label, list) in store.classes.iter_mut() {
            let q = quota.get(label).copied().unwrap_or(0);
            list.truncate(q);
        }
    }
    store
}
