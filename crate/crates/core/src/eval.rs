//! Stage evaluation, run reports and decision-boundary export.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datasets::{inputs_matrix, labels_of, TaskStream};
use crate::diffnet::{argmax_rows, cosine_logits, Model};
use crate::error::{Error, Result};
use crate::experiment::RunConfig;
use crate::trainer::{EpochRecord, InitProbe};

/// Accuracies after training through one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEval {
    /// 1-based.
    pub stage: usize,
    pub per_task_accuracy: Vec<f64>,
    pub per_task_correct: Vec<usize>,
    pub per_task_total: Vec<usize>,
    /// Pooled over the test sets of all seen tasks.
    pub seen_accuracy: f64,
}

/// Top-1 accuracy of `predict` on every seen task's test set.
pub fn evaluate_with<F>(predict: F, stream: &TaskStream, stage: usize) -> Result<StageEval>
where
    F: Fn(ArrayView2<f64>) -> Result<Vec<usize>>,
{
    if stage == 0 || stage > stream.tasks.len() {
        return Err(Error::Range(format!(
            "stage {stage} outside 1..={}",
            stream.tasks.len()
        )));
    }
    let mut correct = Vec::with_capacity(stage);
    let mut total = Vec::with_capacity(stage);
    for task in &stream.tasks[..stage] {
        let preds = predict(inputs_matrix(&task.test).view())?;
        let truth = labels_of(&task.test);
        correct.push(preds.iter().zip(&truth).filter(|(p, t)| p == t).count());
        total.push(truth.len());
    }
    let per_task_accuracy = correct
        .iter()
        .zip(&total)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    let all: usize = total.iter().sum();
    let seen_accuracy = if all == 0 {
        0.0
    } else {
        correct.iter().sum::<usize>() as f64 / all as f64
    };
    Ok(StageEval {
        stage,
        per_task_accuracy,
        per_task_correct: correct,
        per_task_total: total,
        seen_accuracy,
    })
}

/// Cosine-head argmax accuracy of `model` after stage `stage`.
pub fn evaluate_stage(model: &Model, stream: &TaskStream, stage: usize) -> Result<StageEval> {
    evaluate_with(|x| model.predict(x), stream, stage)
}

/// Non-reproducible facts about a run, kept apart from the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub created_unix_secs: u64,
    pub elapsed_secs: f64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub config: RunConfig,
    pub class_order: Vec<usize>,
    /// Row `s` holds accuracy on tasks `1..=s+1` after stage `s+1`.
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub correct_counts: Vec<Vec<usize>>,
    pub test_counts: Vec<usize>,
    pub seen_accuracy: Vec<f64>,
    pub average_incremental_accuracy: f64,
    pub epochs: Vec<EpochRecord>,
    pub init_probes: Vec<InitProbe>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<RunMetadata>,
}

impl RunReport {
    pub fn from_stages(config: RunConfig, stream: &TaskStream, stages: &[StageEval]) -> Self {
        let seen_accuracy: Vec<f64> = stages.iter().map(|s| s.seen_accuracy).collect();
        let average_incremental_accuracy = if seen_accuracy.is_empty() {
            0.0
        } else {
            seen_accuracy.iter().sum::<f64>() / seen_accuracy.len() as f64
        };
        Self {
            method: config.method.name().to_string(),
            config,
            class_order: stream.class_order.clone(),
            accuracy_matrix: stages.iter().map(|s| s.per_task_accuracy.clone()).collect(),
            correct_counts: stages.iter().map(|s| s.per_task_correct.clone()).collect(),
            test_counts: stream.tasks.iter().map(|t| t.test.len()).collect(),
            seen_accuracy,
            average_incremental_accuracy,
            epochs: Vec::new(),
            init_probes: Vec::new(),
            warnings: Vec::new(),
            metadata: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The report with its metadata block removed.
    pub fn without_metadata(&self) -> Self {
        Self {
            metadata: None,
            ..self.clone()
        }
    }

    /// `stage,seen_accuracy,task_1,...,task_B`; entries for unseen tasks are
    /// left empty.
    pub fn write_curves_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let num_tasks = self.test_counts.len();
        let mut header = vec!["stage".to_string(), "seen_accuracy".to_string()];
        header.extend((1..=num_tasks).map(|t| format!("task_{t}")));
        writeln!(w, "{}", header.join(","))?;
        for (s, row) in self.accuracy_matrix.iter().enumerate() {
            let mut fields = vec![(s + 1).to_string(), self.seen_accuracy[s].to_string()];
            fields.extend((0..num_tasks).map(|t| row.get(t).map(|v| v.to_string()).unwrap_or_default()));
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn write_epochs_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "task,epoch,lr,lambda,gamma,ce,kd,pt,rt,total")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                e.task, e.epoch, e.lr, e.lambda, e.gamma, e.loss.ce, e.loss.kd, e.loss.pt, e.loss.rt, e.loss.total
            )?;
        }
        Ok(())
    }

    /// Plain-text per-stage table.
    pub fn summary_table(&self) -> String {
        let mut out = format!("method: {}\n", self.method);
        let num_tasks = self.test_counts.len();
        out.push_str("stage  seen   ");
        for t in 1..=num_tasks {
            out.push_str(&format!(" task{t:<3}"));
        }
        out.push('\n');
        for (s, row) in self.accuracy_matrix.iter().enumerate() {
            out.push_str(&format!("{:<6} {:6.2}%", s + 1, 100.0 * self.seen_accuracy[s]));
            for v in row {
                out.push_str(&format!(" {:6.2}%", 100.0 * v));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "average incremental accuracy: {:.2}%\n",
            100.0 * self.average_incremental_accuracy
        ));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x1: f64,
    pub x2: f64,
    pub class: usize,
}

/// Cosine-head predictions over a `resolution x resolution` grid spanning
/// `[lo, hi]^2` in a 2-D embedding space.
pub fn boundary_grid(model: &Model, bounds: (f64, f64), resolution: usize) -> Result<Vec<GridPoint>> {
    if model.embed_dim() != 2 {
        return Err(Error::Config(format!(
            "boundary export needs a 2-D embedding, model has {}",
            model.embed_dim()
        )));
    }
    if model.num_classes() == 0 {
        return Err(Error::State("model has no classes".into()));
    }
    let (lo, hi) = bounds;
    if !(lo < hi) || resolution == 0 {
        return Err(Error::Config(format!(
            "invalid grid: bounds ({lo}, {hi}), resolution {resolution}"
        )));
    }
    let coord = |i: usize| {
        if resolution == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (resolution - 1) as f64
        }
    };
    let points = Array2::from_shape_fn((resolution * resolution, 2), |(r, c)| {
        let (i, j) = (r / resolution, r % resolution);
        if c == 0 {
            coord(i)
        } else {
            coord(j)
        }
    });
    let logits = cosine_logits(points.view(), model.head.view(), model.logit_scale);
    Ok(argmax_rows(logits.view())
        .into_iter()
        .zip(points.rows())
        .map(|(class, p)| GridPoint {
            x1: p[0],
            x2: p[1],
            class,
        })
        .collect())
}

pub fn write_boundary_csv<W: Write>(points: &[GridPoint], mut w: W) -> Result<()> {
    writeln!(w, "x1,x2,predicted_class")?;
    for p in points {
        writeln!(w, "{},{},{}", p.x1, p.x2, p.class)?;
    }
    Ok(())
}

/// Writes the boundary grid as CSV to `path`.
pub fn export_boundary_grid(model: &Model, bounds: (f64, f64), resolution: usize, path: &Path) -> Result<Vec<GridPoint>> {
    let points = boundary_grid(model, bounds, resolution)?;
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_boundary_csv(&points, file)?;
    Ok(points)
}
