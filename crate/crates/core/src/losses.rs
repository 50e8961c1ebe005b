//! Classification, distillation and transport losses with their schedules.
//!
//! Every distillation term is a tempered cross-entropy `-sum_k p_k log q_k`
//! between a frozen teacher distribution `p` and a student distribution `q`,
//! both computed as `softmax(logits / tau)`. All terms are batch means.
//! Teachers come from a [`ModelSnapshot`] and never receive gradients.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::diffnet::{backward, cosine_backward, cosine_logits, Batch, Gradients, Model, ModelSnapshot};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    /// `|old classes| / |all seen classes|`.
    ClassRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_policy: LambdaPolicy,
    pub gamma_exponent: f64,
    /// Number of leading epochs during which the PT term is active.
    pub pt_epochs: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 2.0,
            lambda_policy: LambdaPolicy::ClassRatio,
            gamma_exponent: 2.0,
            pt_epochs: 5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.gamma_exponent > 0.0) {
            return Err(Error::Config("gamma exponent must be positive".into()));
        }
        Ok(())
    }

    pub fn lambda(&self, num_old: usize, num_total: usize) -> f64 {
        match self.lambda_policy {
            LambdaPolicy::ClassRatio => lambda_class_ratio(num_old, num_total),
        }
    }
}

/// Per-term loss values for one batch.
///
/// `total = (1 - lambda) * ce + lambda * kd + pt + gamma * rt`, where `pt` is
/// already zero outside its active window. Methods without distillation
/// report `lambda_value = 0` and use `total = ce`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd: f64,
    pub pt: f64,
    pub rt: f64,
    pub total: f64,
    pub lambda_value: f64,
    pub gamma_value: f64,
}

impl LossBreakdown {
    pub fn recombine(&self) -> f64 {
        (1.0 - self.lambda_value) * self.ce + self.lambda_value * self.kd + self.pt + self.gamma_value * self.rt
    }
}

pub fn softmax_with_temperature(logits: ArrayView1<f64>, tau: f64) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = logits.mapv(|v| ((v - max) / tau).exp());
    let total = out.sum();
    out.mapv_inplace(|v| v / total);
    out
}

fn softmax_rows(logits: ArrayView2<f64>, tau: f64) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (mut o, row) in out.rows_mut().into_iter().zip(logits.rows()) {
        o.assign(&softmax_with_temperature(row, tau));
    }
    out
}

fn log_softmax(row: ArrayView1<f64>, tau: f64) -> Array1<f64> {
    let scaled = row.mapv(|v| v / tau);
    let max = scaled.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + scaled.mapv(|v| (v - max).exp()).sum().ln();
    scaled.mapv(|v| v - lse)
}

/// `mean_i sum_k -p_ik log softmax(s_i / tau)_k` and its gradient w.r.t. `s`.
///
/// Target rows must be distributions.
pub fn soft_cross_entropy(targets: ArrayView2<f64>, student_logits: ArrayView2<f64>, tau: f64) -> Result<(f64, Array2<f64>)> {
    if targets.dim() != student_logits.dim() {
        return Err(Error::Shape(format!(
            "teacher {:?} vs student {:?}",
            targets.dim(),
            student_logits.dim()
        )));
    }
    let n = student_logits.nrows().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(student_logits.raw_dim());
    for ((p, s), mut g) in targets.rows().into_iter().zip(student_logits.rows()).zip(grad.rows_mut()) {
        let log_q = log_softmax(s, tau);
        loss -= p.iter().zip(&log_q).map(|(pk, lq)| if *pk > 0.0 { pk * lq } else { 0.0 }).sum::<f64>();
        let mass = p.sum();
        for ((gk, lq), pk) in g.iter_mut().zip(&log_q).zip(p) {
            *gk = (mass * lq.exp() - pk) / (tau * n);
        }
    }
    Ok((loss / n, grad))
}

fn one_hot(labels: &[usize], num_classes: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), num_classes));
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Index { label: y, num_classes });
        }
        out[[i, y]] = 1.0;
    }
    Ok(out)
}

/// Mean cross-entropy of the student over all its classes, `tau = 1`.
pub fn ce_loss(student_logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.len() != student_logits.nrows() {
        return Err(Error::Shape("labels do not match logit rows".into()));
    }
    let targets = one_hot(labels, student_logits.ncols())?;
    Ok(soft_cross_entropy(targets.view(), student_logits, 1.0)?.0)
}

/// Tempered distillation of teacher logits into student logits over the same
/// (old) classes.
pub fn kd_loss(teacher_logits: ArrayView2<f64>, student_logits: ArrayView2<f64>, tau: f64) -> Result<f64> {
    if teacher_logits.dim() != student_logits.dim() {
        return Err(Error::Shape(format!(
            "teacher covers {:?}, student {:?}",
            teacher_logits.dim(),
            student_logits.dim()
        )));
    }
    let p = softmax_rows(teacher_logits, tau);
    Ok(soft_cross_entropy(p.view(), student_logits, tau)?.0)
}

pub fn lambda_class_ratio(num_old: usize, num_total: usize) -> f64 {
    if num_total == 0 {
        0.0
    } else {
        num_old as f64 / num_total as f64
    }
}

/// `(t / t_max)^exponent`.
pub fn gamma_schedule(t: usize, t_max: usize, exponent: f64) -> Result<f64> {
    if t_max == 0 {
        return Err(Error::Range("t_max must be at least 1".into()));
    }
    if t > t_max {
        return Err(Error::Range(format!("epoch {t} beyond t_max {t_max}")));
    }
    if t == t_max {
        return Ok(1.0);
    }
    Ok((t as f64 / t_max as f64).powf(exponent))
}

/// Frozen quantities shared by all batches of an incremental task.
#[derive(Debug, Clone, Copy)]
pub struct DistillContext<'a> {
    /// Model before the current task; its head covers the old classes.
    pub snapshot: &'a ModelSnapshot,
    /// Transport-initialized classifier for the new classes.
    pub transported_new: Option<ArrayView2<'a, f64>>,
    /// Column-stochastic mixing weights, `|new| x |old|`, mapping the live
    /// new-class columns onto old classes.
    pub rt_mixing: Option<ArrayView2<'a, f64>>,
}

impl DistillContext<'_> {
    pub fn num_old(&self) -> usize {
        self.snapshot.head().ncols()
    }
}

/// Which terms are active and with what schedule values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub tau: f64,
    pub use_kd: bool,
    pub use_pt: bool,
    pub use_rt: bool,
    pub lambda: f64,
    pub gamma: f64,
    pub pt_active: bool,
}

impl LossSpec {
    /// Plain cross-entropy.
    pub fn ce_only() -> Self {
        Self {
            tau: 1.0,
            use_kd: false,
            use_pt: false,
            use_rt: false,
            lambda: 0.0,
            gamma: 0.0,
            pt_active: false,
        }
    }
}

/// Evaluates the configured objective on a batch, optionally with exact
/// gradients for every live parameter. Transport mixing weights and all
/// teacher outputs are constants.
pub fn evaluate(
    model: &Model,
    batch: &Batch,
    ctx: Option<&DistillContext<'_>>,
    spec: &LossSpec,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    let pass = model.forward(batch.inputs.view())?;
    let z = &pass.embeddings;
    let scale = model.logit_scale;
    let num_classes = model.num_classes();
    let logits = cosine_logits(z.view(), model.head.view(), scale);

    let needs_ctx = spec.use_kd || spec.use_pt || spec.use_rt;
    let ctx = match (needs_ctx, ctx) {
        (true, Some(c)) => Some(c),
        (true, None) => return Err(Error::State("distillation terms need a snapshot".into())),
        (false, _) => None,
    };
    let lambda = if spec.use_kd { spec.lambda } else { 0.0 };
    let ce_weight = 1.0 - lambda;

    let targets = one_hot(&batch.labels, num_classes)?;
    let (ce, dl_ce) = soft_cross_entropy(targets.view(), logits.view(), 1.0)?;
    let mut dlogits = dl_ce * ce_weight;
    let mut dz = Array2::<f64>::zeros(z.raw_dim());
    let mut dhead = Array2::<f64>::zeros(model.head.raw_dim());
    let mut out = LossBreakdown {
        ce,
        lambda_value: lambda,
        ..LossBreakdown::default()
    };

    if let Some(ctx) = ctx {
        let num_old = ctx.num_old();
        if num_old > num_classes {
            return Err(Error::Shape(format!(
                "snapshot has {num_old} classes, model only {num_classes}"
            )));
        }
        let tau = spec.tau;
        let teacher_z = ctx.snapshot.embed(batch.inputs.view())?;
        let teacher_old = cosine_logits(teacher_z.view(), ctx.snapshot.head(), ctx.snapshot.model().logit_scale);
        let p_old = softmax_rows(teacher_old.view(), tau);

        if spec.use_kd {
            let (kd, dl) = soft_cross_entropy(p_old.view(), logits.slice(s![.., ..num_old]), tau)?;
            out.kd = kd;
            dlogits.slice_mut(s![.., ..num_old]).scaled_add(lambda, &dl);
        }

        if spec.use_pt && spec.pt_active {
            let w_new = ctx
                .transported_new
                .ok_or_else(|| Error::State("PT term needs transported classifier".into()))?;
            let teacher_head = concat_columns(ctx.snapshot.head(), w_new)?;
            if teacher_head.ncols() != num_classes {
                return Err(Error::Shape(format!(
                    "transported classifier covers {} classes, model {}",
                    teacher_head.ncols(),
                    num_classes
                )));
            }
            let teacher = cosine_logits(teacher_z.view(), teacher_head.view(), ctx.snapshot.model().logit_scale);
            let p = softmax_rows(teacher.view(), tau);
            let (pt, dl) = soft_cross_entropy(p.view(), logits.view(), tau)?;
            out.pt = pt;
            dlogits.scaled_add(1.0, &dl);
        }

        if spec.use_rt {
            let rho = ctx
                .rt_mixing
                .ok_or_else(|| Error::State("RT term needs mixing weights".into()))?;
            let w_new = model.head.slice(s![.., num_old..]);
            if rho.dim() != (w_new.ncols(), num_old) {
                return Err(Error::Shape(format!(
                    "mixing weights {:?} for {} new and {} old classes",
                    rho.dim(),
                    w_new.ncols(),
                    num_old
                )));
            }
            let w_hat = w_new.dot(&rho);
            let student = cosine_logits(z.view(), w_hat.view(), scale);
            let (rt, dl) = soft_cross_entropy(p_old.view(), student.view(), tau)?;
            out.rt = rt;
            if with_grad && spec.gamma != 0.0 {
                let (dz_rt, dw_hat) = cosine_backward(z.view(), w_hat.view(), scale, (dl * spec.gamma).view());
                dz += &dz_rt;
                let mut dnew = dhead.slice_mut(s![.., num_old..]);
                dnew += &dw_hat.dot(&rho.t());
            }
        }
    }
    if spec.use_rt {
        out.gamma_value = spec.gamma;
    }
    out.total = out.recombine();

    if !out.total.is_finite() {
        return Err(Error::Numeric("loss".into()));
    }
    if !with_grad {
        return Ok((out, None));
    }
    let (dz_head, dw_head) = cosine_backward(z.view(), model.head.view(), scale, dlogits.view());
    dz += &dz_head;
    dhead += &dw_head;
    let grads = backward(model, &pass, dz.view(), dhead)?;
    Ok((out, Some(grads)))
}

fn concat_columns(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    ndarray::concatenate(Axis(1), &[a, b]).map_err(|e| Error::Shape(e.to_string()))
}

/// Rehearsal plus distillation: `(1 - lambda) CE + lambda KD` with
/// `lambda = |old| / |all|`, pure CE when there is no snapshot yet.
pub fn baseline_loss(batch: &Batch, model: &Model, snapshot: Option<&ModelSnapshot>, cfg: &LossConfig) -> Result<LossBreakdown> {
    let Some(snapshot) = snapshot else {
        return Ok(evaluate(model, batch, None, &LossSpec::ce_only(), false)?.0);
    };
    let ctx = DistillContext {
        snapshot,
        transported_new: None,
        rt_mixing: None,
    };
    let spec = LossSpec {
        tau: cfg.tau,
        use_kd: true,
        lambda: cfg.lambda(ctx.num_old(), model.num_classes()),
        ..LossSpec::ce_only()
    };
    Ok(evaluate(model, batch, Some(&ctx), &spec, false)?.0)
}

/// Prospective-transport distillation: teacher is the snapshot embedding with
/// `[old classifier, transported new classifier]`, student is the live model.
pub fn pt_loss(batch: &Batch, model: &Model, snapshot: &ModelSnapshot, transported_new: ArrayView2<f64>, tau: f64) -> Result<f64> {
    let teacher_head = concat_columns(snapshot.head(), transported_new)?;
    if teacher_head.ncols() != model.num_classes() {
        return Err(Error::Shape(format!(
            "transported classifier covers {} classes, model {}",
            teacher_head.ncols(),
            model.num_classes()
        )));
    }
    let teacher_z = snapshot.embed(batch.inputs.view())?;
    let teacher = cosine_logits(teacher_z.view(), teacher_head.view(), snapshot.model().logit_scale);
    let student = model.logits(batch.inputs.view())?;
    kd_loss(teacher.view(), student.view(), tau)
}

/// PT term under its epoch gate.
pub fn gated_pt_loss(
    batch: &Batch,
    model: &Model,
    snapshot: &ModelSnapshot,
    transported_new: ArrayView2<f64>,
    epoch: usize,
    cfg: &LossConfig,
) -> Result<f64> {
    if epoch >= cfg.pt_epochs {
        return Ok(0.0);
    }
    pt_loss(batch, model, snapshot, transported_new, cfg.tau)
}

/// Retrospective-transport distillation: student is the transported old
/// classifier applied to the live embedding, over old classes only.
pub fn rt_loss(
    batch: &Batch,
    snapshot: &ModelSnapshot,
    transported_old: ArrayView2<f64>,
    model: &Model,
    tau: f64,
) -> Result<f64> {
    if transported_old.ncols() != snapshot.head().ncols() {
        return Err(Error::Shape(format!(
            "transported old classifier has {} columns, snapshot {}",
            transported_old.ncols(),
            snapshot.head().ncols()
        )));
    }
    let teacher = snapshot.logits(batch.inputs.view())?;
    let z = model.embed(batch.inputs.view())?;
    let student = cosine_logits(z.view(), transported_old, model.logit_scale);
    kd_loss(teacher.view(), student.view(), tau)
}

/// Full co-transport objective at a given epoch.
pub fn coil_total(
    batch: &Batch,
    model: &Model,
    ctx: &DistillContext<'_>,
    epoch: usize,
    t_max: usize,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let spec = coil_spec(ctx, model, epoch, t_max, cfg)?;
    Ok(evaluate(model, batch, Some(ctx), &spec, false)?.0)
}

pub fn coil_spec(ctx: &DistillContext<'_>, model: &Model, epoch: usize, t_max: usize, cfg: &LossConfig) -> Result<LossSpec> {
    Ok(LossSpec {
        tau: cfg.tau,
        use_kd: true,
        use_pt: true,
        use_rt: true,
        lambda: cfg.lambda(ctx.num_old(), model.num_classes()),
        gamma: gamma_schedule(epoch, t_max, cfg.gamma_exponent)?,
        pt_active: epoch < cfg.pt_epochs,
    })
}
