//! MLP evaluation, task features, performance metrics and a plain-SGD
//! trainer used to produce specialised models from a shared base.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Activation, LayerSpec, ModelManifest, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Post-activation output of every layer, plus the final output.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrace {
    pub per_layer: Vec<Tensor>,
    pub logits: Tensor,
}

/// Per-layer activation difference between a model carrying a task vector
/// and the pretrained model, on the same input.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskFeature {
    pub per_layer: Vec<Tensor>,
    pub input_id: String,
}

impl TaskFeature {
    /// Per-sample L2 norms at `layer`.
    pub fn sample_norms(&self, layer: usize) -> Vec<f64> {
        row_norms(&self.per_layer[layer], 2)
    }
}

/// Norm of each row of a `[B, D]` tensor.
pub fn row_norms(t: &Tensor, p: u32) -> Vec<f64> {
    (0..t.shape()[0])
        .map(|i| tensor::slice_lp_norm(t.row(i), p))
        .collect()
}

/// Inputs `[B, input_dim]` with optional integer labels.
///
/// On disk a batch is a checkpoint with tensors `inputs` `[B, D]` and,
/// when labelled, `labels` `[B]` holding class indices as exact `f32`
/// integers.
///
/// `classes` names the output head the batch is scored against: when set,
/// softmax, argmax and cross-entropy only see that slice of the logits and
/// labels must fall inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Option<Vec<usize>>,
    pub task_id: String,
    pub classes: Option<Range<usize>>,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Option<Vec<usize>>, task_id: impl Into<String>) -> Result<Self> {
        if inputs.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "batch inputs must be [B, D], got {:?}",
                inputs.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != inputs.shape()[0] {
                return Err(Error::InvalidArgument(format!(
                    "{} labels for {} inputs",
                    l.len(),
                    inputs.shape()[0]
                )));
            }
        }
        Ok(LabeledBatch {
            inputs,
            labels,
            task_id: task_id.into(),
            classes: None,
        })
    }

    /// Restricts scoring to the output slice `classes`.
    pub fn with_classes(mut self, classes: Range<usize>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::InvalidArgument(format!("empty class range {classes:?}")));
        }
        if let Some(&bad) = self.labels.iter().flatten().find(|c| !classes.contains(c)) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside class range {classes:?}"
            )));
        }
        self.classes = Some(classes);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn unlabeled(&self) -> LabeledBatch {
        LabeledBatch {
            inputs: self.inputs.clone(),
            labels: None,
            task_id: self.task_id.clone(),
            classes: self.classes.clone(),
        }
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Result<LabeledBatch> {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn subset(&self, rows: &[usize]) -> Result<LabeledBatch> {
        let mut out = LabeledBatch::new(
            self.inputs.select_rows(rows)?,
            self.labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
            self.task_id.clone(),
        )?;
        out.classes = self.classes.clone();
        Ok(out)
    }

    /// Concatenates batches; labels survive only if every batch has them,
    /// and the class range only if every batch shares it.
    pub fn concat(batches: &[LabeledBatch], task_id: impl Into<String>) -> Result<LabeledBatch> {
        let first = batches.first().ok_or(Error::EmptyInput)?;
        let cols = first.inputs.shape()[1];
        let mut data = Vec::new();
        let mut labels = Some(Vec::new());
        for b in batches {
            if b.inputs.shape()[1] != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first.inputs.shape().to_vec(),
                    right: b.inputs.shape().to_vec(),
                });
            }
            data.extend_from_slice(b.inputs.data());
            labels = match (labels, &b.labels) {
                (Some(mut acc), Some(l)) => {
                    acc.extend_from_slice(l);
                    Some(acc)
                }
                _ => None,
            };
        }
        let rows = data.len() / cols;
        let mut out = LabeledBatch::new(Tensor::matrix(rows, cols, data)?, labels, task_id)?;
        if batches.iter().all(|b| b.classes == first.classes) {
            out.classes = first.classes.clone();
        }
        Ok(out)
    }

    pub fn to_weights(&self) -> ModelWeights {
        let mut w = ModelWeights::new();
        w.insert("inputs", self.inputs.clone());
        if let Some(l) = &self.labels {
            w.insert("labels", Tensor::from_vec(l.iter().map(|&c| c as f32).collect()));
        }
        w.metadata.insert("task_id".into(), self.task_id.clone());
        if let Some(r) = &self.classes {
            w.metadata.insert("classes".into(), format!("{}..{}", r.start, r.end));
        }
        w
    }

    pub fn from_weights(w: &ModelWeights) -> Result<Self> {
        let inputs = w.get("inputs")?.clone();
        let labels = match w.tensors.get("labels") {
            Some(t) => Some(
                t.data()
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(Error::InvalidArgument(format!("label {v} is not a class index")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let task_id = w.metadata.get("task_id").cloned().unwrap_or_else(|| {
            w.source_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        });
        let batch = LabeledBatch::new(inputs, labels, task_id)?;
        match w.metadata.get("classes") {
            None => Ok(batch),
            Some(text) => {
                let bad = || Error::InvalidArgument(format!("class range {text:?} is not `start..end`"));
                let (a, b) = text.split_once("..").ok_or_else(bad)?;
                let start = a.trim().parse().map_err(|_| bad())?;
                let end = b.trim().parse().map_err(|_| bad())?;
                batch.with_classes(start..end)
            }
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weights(&checkpoint::load_safetensors(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save_safetensors(&self.to_weights(), path)
    }
}

/// Borrowed view of one dense layer.
#[derive(Clone, Copy, Debug)]
pub struct DenseRef<'a> {
    pub weight: &'a Tensor,
    pub bias: Option<&'a Tensor>,
    pub activation: Activation,
}

fn dense_ref<'a>(w: &'a ModelWeights, spec: &LayerSpec) -> Result<DenseRef<'a>> {
    let weight = w.get(&spec.weight_name)?;
    let bias = spec.bias_name.as_deref().map(|b| w.get(b)).transpose()?;
    Ok(DenseRef {
        weight,
        bias,
        activation: spec.activation,
    })
}

pub fn layers<'a>(w: &'a ModelWeights, m: &ModelManifest) -> Result<Vec<DenseRef<'a>>> {
    m.layers.iter().map(|l| dense_ref(w, l)).collect()
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn activate(a: Activation, z: f32) -> f32 {
    match a {
        Activation::Relu => z.max(0.0),
        Activation::Tanh => z.tanh(),
        Activation::Gelu => 0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh()),
        Activation::None => z,
    }
}

fn activate_grad(a: Activation, z: f32) -> f32 {
    match a {
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => 1.0 - z.tanh().powi(2),
        Activation::Gelu => {
            let u = GELU_C * (z + 0.044715 * z * z * z);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * z * z);
            0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du
        }
        Activation::None => 1.0,
    }
}

/// `x·Wᵀ + b` before the activation.
fn pre_activation(layer: &DenseRef<'_>, x: &Tensor) -> Result<Tensor> {
    let mut z = tensor::matmul_transposed(x, layer.weight)?;
    if let Some(b) = layer.bias {
        let out = b.numel();
        for row in z.data_mut().chunks_mut(out) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(z)
}

/// One layer's post-activation output.
pub fn dense_forward(layer: &DenseRef<'_>, x: &Tensor) -> Result<Tensor> {
    let act = layer.activation;
    Ok(pre_activation(layer, x)?.map(|z| activate(act, z)))
}

fn check_input(m: &ModelManifest, x: &Tensor) -> Result<()> {
    if x.rank() != 2 || x.shape()[1] != m.input_dim {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: x.shape().to_vec(),
            right: vec![0, m.input_dim],
        });
    }
    Ok(())
}

pub fn forward_with_trace(w: &ModelWeights, m: &ModelManifest, x: &Tensor) -> Result<FeatureTrace> {
    check_input(m, x)?;
    let mut per_layer: Vec<Tensor> = Vec::with_capacity(m.num_layers());
    for layer in layers(w, m)? {
        let input = per_layer.last().unwrap_or(x);
        per_layer.push(dense_forward(&layer, input)?);
    }
    let logits = per_layer.last().cloned().expect("manifest has at least one layer");
    Ok(FeatureTrace { per_layer, logits })
}

/// Final network output for `x`.
pub fn forward(w: &ModelWeights, m: &ModelManifest, x: &Tensor) -> Result<Tensor> {
    check_input(m, x)?;
    let mut h = x.clone();
    for layer in layers(w, m)? {
        h = dense_forward(&layer, &h)?;
    }
    Ok(h)
}

/// Layer-wise activation difference between `variant` and `pre`, each run
/// through its own full forward pass from the raw input.
pub fn task_feature(
    pre: &ModelWeights,
    variant: &ModelWeights,
    m: &ModelManifest,
    x: &Tensor,
) -> Result<TaskFeature> {
    let base = forward_with_trace(pre, m, x)?;
    task_feature_from_trace(&base, variant, m, x, "")
}

/// Same as [`task_feature`] with a precomputed pretrained trace.
pub fn task_feature_from_trace(
    base: &FeatureTrace,
    variant: &ModelWeights,
    m: &ModelManifest,
    x: &Tensor,
    input_id: &str,
) -> Result<TaskFeature> {
    let tuned = forward_with_trace(variant, m, x)?;
    let per_layer = tuned
        .per_layer
        .iter()
        .zip(&base.per_layer)
        .map(|(t, b)| t.sub(b))
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskFeature {
        per_layer,
        input_id: input_id.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    NegXent,
    NegEntropy,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(MetricKind::Accuracy),
            "neg_xent" => Ok(MetricKind::NegXent),
            "neg_entropy" => Ok(MetricKind::NegEntropy),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::NegXent => "neg_xent",
            MetricKind::NegEntropy => "neg_entropy",
        })
    }
}

/// Log-softmax of one row, in f64.
fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Metric over a batch of network outputs `[B, C]`.
pub fn metric_from_logits(logits: &Tensor, labels: Option<&[usize]>, kind: MetricKind) -> Option<f64> {
    let b = logits.shape()[0];
    if b == 0 {
        return Some(0.0);
    }
    let rows = (0..b).map(|i| logits.row(i));
    match kind {
        MetricKind::Accuracy => {
            let labels = labels?;
            let correct = rows.zip(labels).filter(|(r, &y)| argmax(r) == y).count();
            Some(correct as f64 / b as f64)
        }
        MetricKind::NegXent => {
            let labels = labels?;
            let total: f64 = rows.zip(labels).map(|(r, &y)| -log_softmax(r)[y]).sum();
            Some(-total / b as f64)
        }
        MetricKind::NegEntropy => {
            let total: f64 = rows
                .map(|r| {
                    log_softmax(r)
                        .iter()
                        .map(|&lp| if lp.is_finite() { -lp.exp() * lp } else { 0.0 })
                        .sum::<f64>()
                })
                .sum();
            Some(-total / b as f64)
        }
    }
}

/// Metric of `logits` against `batch`, restricted to the batch's head.
pub fn batch_metric(logits: &Tensor, batch: &LabeledBatch, kind: MetricKind) -> Result<f64> {
    if kind != MetricKind::NegEntropy && batch.labels.is_none() {
        return Err(Error::MissingLabels(batch.task_id.clone()));
    }
    let Some(r) = &batch.classes else {
        return Ok(metric_from_logits(logits, batch.labels.as_deref(), kind).expect("labels checked"));
    };
    if r.end > logits.shape()[1] {
        return Err(Error::InvalidArgument(format!(
            "class range {r:?} exceeds {} outputs",
            logits.shape()[1]
        )));
    }
    let rows = logits.shape()[0];
    if rows == 0 {
        return Ok(0.0);
    }
    let data = (0..rows).flat_map(|i| logits.row(i)[r.clone()].to_vec()).collect();
    let head = Tensor::new(vec![rows, r.len()], data)?;
    let local: Option<Vec<usize>> = batch.labels.as_ref().map(|l| l.iter().map(|c| c - r.start).collect());
    Ok(metric_from_logits(&head, local.as_deref(), kind).expect("labels checked"))
}

pub fn performance_metric(
    w: &ModelWeights,
    m: &ModelManifest,
    batch: &LabeledBatch,
    kind: MetricKind,
) -> Result<f64> {
    if kind != MetricKind::NegEntropy && batch.labels.is_none() {
        return Err(Error::MissingLabels(batch.task_id.clone()));
    }
    batch_metric(&forward(w, m, &batch.inputs)?, batch, kind)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    /// Mini-batch size; `None` means full-batch gradient descent.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 0.1,
            batch_size: Some(32),
            seed: 0,
        }
    }
}

/// Mean cross-entropy after each epoch; index 0 is the loss before training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
}

fn mean_xent(w: &ModelWeights, m: &ModelManifest, data: &[LabeledBatch], n: usize) -> Result<f64> {
    let mut total = 0.0;
    for b in data {
        total -= performance_metric(w, m, b, MetricKind::NegXent)? * b.len() as f64;
    }
    Ok(total / n as f64)
}

/// Gradients of mean cross-entropy for one mini-batch.
fn backprop(
    w: &ModelWeights,
    m: &ModelManifest,
    x: &Tensor,
    labels: &[usize],
    heads: &[Range<usize>],
) -> Result<Vec<(Tensor, Option<Tensor>)>> {
    let net = layers(w, m)?;
    let mut pre = Vec::with_capacity(net.len());
    let mut post: Vec<Tensor> = Vec::with_capacity(net.len());
    for layer in &net {
        let input = post.last().unwrap_or(x);
        let z = pre_activation(layer, input)?;
        post.push(z.map(|v| activate(layer.activation, v)));
        pre.push(z);
    }

    let b = x.shape()[0];
    let out = post.last().unwrap();
    let classes = out.shape()[1];
    let mut delta = vec![0.0f32; b * classes];
    for i in 0..b {
        let head = heads[i].clone();
        let lp = log_softmax(&out.row(i)[head.clone()]);
        for (j, c) in head.enumerate() {
            let target = if labels[i] == c { 1.0 } else { 0.0 };
            delta[i * classes + c] = ((lp[j].exp() - target) / b as f64) as f32;
        }
    }
    let mut grad_out = Tensor::matrix(b, classes, delta)?;

    let mut grads = vec![];
    for l in (0..net.len()).rev() {
        let layer = &net[l];
        let act = layer.activation;
        let dz = grad_out.zip_with(&pre[l], "backprop", |g, z| g * activate_grad(act, z))?;
        let input = if l == 0 { x } else { &post[l - 1] };
        let (out_dim, in_dim) = (layer.weight.shape()[0], layer.weight.shape()[1]);

        let mut dw = vec![0.0f32; out_dim * in_dim];
        let mut db = vec![0.0f32; out_dim];
        for i in 0..b {
            let dzr = dz.row(i);
            let ar = input.row(i);
            for (o, &g) in dzr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                for (acc, &a) in dw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(ar) {
                    *acc += g * a;
                }
            }
        }
        if l > 0 {
            grad_out = tensor::matmul(&dz, layer.weight)?;
        }
        grads.push((
            Tensor::matrix(out_dim, in_dim, dw)?,
            layer.bias.map(|_| Tensor::from_vec(db)),
        ));
    }
    grads.reverse();
    Ok(grads)
}

fn sgd_step(
    w: &mut ModelWeights,
    m: &ModelManifest,
    grads: &[(Tensor, Option<Tensor>)],
    lr: f32,
) -> Result<()> {
    for (spec, (dw, db)) in m.layers.iter().zip(grads) {
        let wt = w.tensors.get_mut(&spec.weight_name).expect("bound weight");
        for (p, &g) in wt.data_mut().iter_mut().zip(dw.data()) {
            *p -= lr * g;
        }
        if let (Some(name), Some(db)) = (&spec.bias_name, db) {
            let bt = w.tensors.get_mut(name).expect("bound bias");
            for (p, &g) in bt.data_mut().iter_mut().zip(db.data()) {
                *p -= lr * g;
            }
        }
    }
    Ok(())
}

/// Trains a copy of `pre` with cross-entropy and plain SGD.
pub fn train_specialist(
    pre: &ModelWeights,
    m: &ModelManifest,
    data: &[LabeledBatch],
    cfg: &TrainConfig,
) -> Result<ModelWeights> {
    Ok(train_with_history(pre, m, data, cfg)?.0)
}

pub fn train_with_history(
    pre: &ModelWeights,
    m: &ModelManifest,
    data: &[LabeledBatch],
    cfg: &TrainConfig,
) -> Result<(ModelWeights, TrainHistory)> {
    let mut w = pre.clone();
    if cfg.epochs == 0 {
        return Ok((w, TrainHistory::default()));
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    let mut heads = Vec::new();
    for b in data {
        let l = b
            .labels
            .as_ref()
            .ok_or_else(|| Error::MissingLabels(b.task_id.clone()))?;
        let head = b.classes.clone().unwrap_or(0..m.num_classes);
        if head.end > m.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class range {head:?} exceeds {} outputs",
                m.num_classes
            )));
        }
        if let Some(&bad) = l.iter().find(|c| !head.contains(c)) {
            return Err(Error::InvalidArgument(format!("label {bad} outside {head:?}")));
        }
        if b.inputs.shape()[1] != m.input_dim {
            return Err(Error::ShapeMismatch {
                op: "train",
                left: b.inputs.shape().to_vec(),
                right: vec![0, m.input_dim],
            });
        }
        inputs.extend_from_slice(b.inputs.data());
        labels.extend_from_slice(l);
        heads.extend(std::iter::repeat_n(head, b.len()));
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let all = Tensor::matrix(n, m.input_dim, inputs)?;
    let bs = cfg.batch_size.unwrap_or(n).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory {
        losses: vec![mean_xent(&w, m, data, n)?],
    };

    for epoch in 0..cfg.epochs {
        if bs < n {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(bs) {
            let grads = if bs == n {
                backprop(&w, m, &all, &labels, &heads)?
            } else {
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let h: Vec<Range<usize>> = chunk.iter().map(|&i| heads[i].clone()).collect();
                backprop(&w, m, &all.select_rows(chunk)?, &y, &h)?
            };
            sgd_step(&mut w, m, &grads, cfg.lr)?;
        }
        let loss = mean_xent(&w, m, data, n)?;
        if !loss.is_finite() {
            return Err(Error::DivergedLoss { epoch });
        }
        history.losses.push(loss);
    }
    Ok((w, history))
}

/// Randomly initialised MLP with `relu` hidden layers and a linear head,
/// plus its manifest. Weights use He-normal scaling, biases start at zero.
pub fn init_mlp(
    input_dim: usize,
    hidden: &[usize],
    num_classes: usize,
    hidden_activation: Activation,
    seed: u64,
) -> Result<(ModelWeights, ModelManifest)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ModelWeights::new();
    let mut layers = Vec::new();
    let dims: Vec<usize> = std::iter::once(input_dim)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(num_classes))
        .collect();
    for (l, pair) in dims.windows(2).enumerate() {
        let (inp, out) = (pair[0], pair[1]);
        let std = (2.0 / inp as f32).sqrt();
        let normal = Normal::new(0.0f32, std).expect("valid std");
        let data = (0..inp * out).map(|_| normal.sample(&mut rng)).collect();
        let (wn, bn) = (format!("layers.{l}.weight"), format!("layers.{l}.bias"));
        w.insert(wn.clone(), Tensor::matrix(out, inp, data)?);
        w.insert(bn.clone(), Tensor::zeros(&[out])?);
        layers.push(LayerSpec {
            index: l,
            weight_name: wn,
            bias_name: Some(bn),
            activation: if l + 2 == dims.len() {
                Activation::None
            } else {
                hidden_activation
            },
            in_dim: Some(inp),
            out_dim: Some(out),
        });
    }
    Ok((
        w,
        ModelManifest {
            layers,
            input_dim,
            num_classes,
        },
    ))
}
