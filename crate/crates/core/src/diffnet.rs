//! Dense embedding network with a cosine-normalized linear head.
//!
//! Gradients are derived by hand: losses hand back `dL/dlogits`, the cosine
//! head turns that into `dL/dz` and `dL/dW`, and [`backward`] carries `dL/dz`
//! through the dense layers.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to vector norms inside the cosine head.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl EmbeddingConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, embed_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            embed_dim,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "layer dimensions must all be positive".into(),
            ));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer, input to embedding.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.embed_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

/// Affine layer `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_out x fan_in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EmbeddingConfig,
    pub layers: Vec<Dense>,
    /// Classifier, `embed_dim x num_classes`. Only column directions matter.
    pub head: Array2<f64>,
    pub logit_scale: f64,
}

fn uniform_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// Random classifier columns with the same fan-in scaling as the layers.
pub fn random_columns<R: Rng + ?Sized>(rng: &mut R, embed_dim: usize, count: usize) -> Array2<f64> {
    uniform_matrix(rng, embed_dim, count, 1.0 / (embed_dim as f64).sqrt())
}

impl Model {
    /// Seeded fan-in uniform initialization with an empty head.
    pub fn new<R: Rng + ?Sized>(config: EmbeddingConfig, logit_scale: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if !(logit_scale > 0.0 && logit_scale.is_finite()) {
            return Err(Error::Config(format!(
                "logit_scale must be positive, got {logit_scale}"
            )));
        }
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = uniform_matrix(rng, fan_out, fan_in, bound);
                let bias = Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..bound));
                Dense { weight, bias }
            })
            .collect();
        let head = Array2::zeros((config.embed_dim, 0));
        Ok(Self {
            config,
            layers,
            head,
            logit_scale,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Appends classifier columns for newly arrived classes.
    pub fn add_classes(&mut self, columns: ArrayView2<f64>) -> Result<()> {
        if columns.nrows() != self.embed_dim() {
            return Err(Error::Shape(format!(
                "new columns have {} rows, embedding has {}",
                columns.nrows(),
                self.embed_dim()
            )));
        }
        self.head
            .append(Axis(1), columns)
            .map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<ForwardPass> {
        forward(self, inputs)
    }

    pub fn embed(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        embed(self, inputs)
    }

    pub fn logits(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let z = self.embed(inputs)?;
        Ok(cosine_logits(z.view(), self.head.view(), self.logit_scale))
    }

    pub fn predict(&self, inputs: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(self.logits(inputs)?.view()))
    }

    /// Visits every parameter block in a fixed order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{i}.weight"), layer.weight.as_slice_mut().expect("standard layout"));
            f(&format!("layer{i}.bias"), layer.bias.as_slice_mut().expect("standard layout"));
        }
        // head columns are appended, so the layout may not be contiguous
        if self.head.as_slice().is_none() {
            self.head = self.head.as_standard_layout().into_owned();
        }
        f("head", self.head.as_slice_mut().expect("standard layout"));
    }
}

/// Row-wise argmax; ties resolve to the lowest column index.
pub fn argmax_rows(m: ArrayView2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Frozen copy of a model.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    inner: Arc<Model>,
}

impl ModelSnapshot {
    pub fn capture(model: &Model) -> Self {
        Self {
            inner: Arc::new(model.clone()),
        }
    }

    pub fn model(&self) -> &Model {
        &self.inner
    }

    pub fn embed(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.inner.embed(inputs)
    }

    pub fn logits(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.inner.logits(inputs)
    }

    /// The frozen classifier, `embed_dim x |old classes|`.
    pub fn head(&self) -> ArrayView2<'_, f64> {
        self.inner.head.view()
    }
}

/// Inputs and stream-local labels for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `batch x input_dim`.
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Input to each layer.
    pub layer_inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each layer.
    pub pre_activations: Vec<Array2<f64>>,
    /// Embeddings, `batch x embed_dim`.
    pub embeddings: Array2<f64>,
}

pub fn forward(model: &Model, inputs: ArrayView2<f64>) -> Result<ForwardPass> {
    if inputs.ncols() != model.config.input_dim {
        return Err(Error::Shape(format!(
            "input width {} but network expects {}",
            inputs.ncols(),
            model.config.input_dim
        )));
    }
    let last = model.layers.len() - 1;
    let mut layer_inputs = Vec::with_capacity(model.layers.len());
    let mut pre_activations = Vec::with_capacity(model.layers.len());
    let mut h = inputs.to_owned();
    for (l, layer) in model.layers.iter().enumerate() {
        let a = h.dot(&layer.weight.t()) + &layer.bias;
        let next = if l < last { a.mapv(|v| v.max(0.0)) } else { a.clone() };
        layer_inputs.push(std::mem::replace(&mut h, next));
        pre_activations.push(a);
    }
    Ok(ForwardPass {
        layer_inputs,
        pre_activations,
        embeddings: h,
    })
}

pub fn embed(model: &Model, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(forward(model, inputs)?.embeddings)
}

fn clamped_norm(v: ndarray::ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt().max(NORM_FLOOR)
}

fn normalize_rows(m: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let norms: Vec<f64> = m.rows().into_iter().map(clamped_norm).collect();
    let mut out = m.to_owned();
    for (mut row, n) in out.rows_mut().into_iter().zip(&norms) {
        row.mapv_inplace(|v| v / n);
    }
    (out, norms)
}

/// `scale * cos(z_i, w_k)` for every embedding row and classifier column.
pub fn cosine_logits(z: ArrayView2<f64>, w: ArrayView2<f64>, scale: f64) -> Array2<f64> {
    let (zn, _) = normalize_rows(z);
    let (wn, _) = normalize_rows(w.t());
    zn.dot(&wn.t()) * scale
}

/// Backpropagates `dL/dlogits` through [`cosine_logits`].
///
/// Returns `(dL/dz, dL/dw)` with the shapes of `z` and `w`.
pub fn cosine_backward(
    z: ArrayView2<f64>,
    w: ArrayView2<f64>,
    scale: f64,
    dlogits: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (zn, z_norms) = normalize_rows(z);
    let (wn, w_norms) = normalize_rows(w.t());
    // gradients w.r.t. the unit vectors
    let g_zn = dlogits.dot(&wn) * scale;
    let g_wn = dlogits.t().dot(&zn) * scale;
    let dz = project_back(&zn, &z_norms, g_zn);
    let dw_t = project_back(&wn, &w_norms, g_wn);
    (dz, dw_t.reversed_axes())
}

/// Chain rule through `u = v / max(|v|, floor)`, row by row.
fn project_back(unit: &Array2<f64>, norms: &[f64], mut g: Array2<f64>) -> Array2<f64> {
    for ((mut gr, u), &n) in g.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        if n > NORM_FLOOR {
            let radial = gr.dot(&u);
            gr.scaled_add(-radial, &u);
        }
        gr.mapv_inplace(|v| v / n);
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradient of a scalar loss w.r.t. every live model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrad>,
    pub head: Array2<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
            head: Array2::zeros(model.head.raw_dim()),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, alpha: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(alpha, &b.weight);
            a.bias.scaled_add(alpha, &b.bias);
        }
        self.head.scaled_add(alpha, &other.head);
    }

    /// Blocks in the same order and naming as [`Model::visit_params_mut`].
    pub fn blocks(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), l.weight.iter().copied().collect()));
            out.push((format!("layer{i}.bias"), l.bias.iter().copied().collect()));
        }
        out.push(("head".to_string(), self.head.iter().copied().collect()));
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, v)| v.iter().map(|x| x.abs()))
            .fold(0.0, f64::max)
    }
}

/// Backpropagates `dL/dz` (plus an already computed head gradient) through
/// the embedding network.
pub fn backward(model: &Model, pass: &ForwardPass, dz: ArrayView2<f64>, dhead: Array2<f64>) -> Result<Gradients> {
    if dz.dim() != pass.embeddings.dim() {
        return Err(Error::Shape(format!(
            "embedding gradient {:?} vs embeddings {:?}",
            dz.dim(),
            pass.embeddings.dim()
        )));
    }
    if dhead.dim() != model.head.dim() {
        return Err(Error::Shape(format!(
            "head gradient {:?} vs head {:?}",
            dhead.dim(),
            model.head.dim()
        )));
    }
    let last = model.layers.len() - 1;
    let mut layers = vec![None; model.layers.len()];
    let mut upstream = dz.to_owned();
    for l in (0..model.layers.len()).rev() {
        let da = if l < last {
            let pre = &pass.pre_activations[l];
            let mut g = upstream;
            g.zip_mut_with(pre, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            g
        } else {
            upstream
        };
        let weight = da.t().dot(&pass.layer_inputs[l]);
        let bias = da.sum_axis(Axis(0));
        upstream = da.dot(&model.layers[l].weight);
        layers[l] = Some(DenseGrad { weight, bias });
    }
    Ok(Gradients {
        layers: layers.into_iter().map(|g| g.expect("filled")).collect(),
        head: dhead,
    })
}

/// SGD with momentum and L2 weight decay, one velocity buffer per block.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    /// `v <- momentum * v + (g + wd * p)`, `p <- p - lr * v`.
    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, block) in grads.blocks() {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(name));
            }
        }
        let shapes_match = grads.layers.len() == model.layers.len()
            && grads.head.dim() == model.head.dim()
            && grads
                .layers
                .iter()
                .zip(&model.layers)
                .all(|(g, l)| g.weight.dim() == l.weight.dim() && g.bias.dim() == l.bias.dim());
        if !shapes_match {
            return Err(Error::Shape("gradients do not match model parameters".into()));
        }
        let stale = self
            .velocity
            .as_ref()
            .is_some_and(|v| v.head.dim() != model.head.dim());
        if stale || self.velocity.is_none() {
            self.velocity = Some(Gradients::zeros_like(model));
        }
        let velocity = self.velocity.as_mut().expect("initialized");
        let grad_blocks = grads.blocks();
        let mut vel_blocks = Vec::new();
        for l in velocity.layers.iter_mut() {
            vel_blocks.push(l.weight.as_slice_mut().expect("standard layout"));
            vel_blocks.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        vel_blocks.push(velocity.head.as_slice_mut().expect("standard layout"));
        let (momentum, wd) = (self.momentum, self.weight_decay);
        let mut idx = 0;
        model.visit_params_mut(|_, params| {
            let g = &grad_blocks[idx].1;
            let v = &mut vel_blocks[idx];
            for ((p, &gi), vi) in params.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = gi + wd * *p;
                *vi = momentum * *vi + d;
                *p -= lr * *vi;
            }
            idx += 1;
        });
        Ok(())
    }
}

/// One plain update without persistent momentum state.
pub fn sgd_step(model: &mut Model, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
    Sgd::new(0.0, weight_decay).step(model, grads, lr)
}
