//! Layer-wise magnitude calibration of merged models.
//!
//! A merged task vector usually carries the wrong magnitude at each layer:
//! fusion shrinks norms, sparsification zeroes mass, and task-irrelevant
//! directions contribute little to a task's features. Calibration rescales
//! each layer by a coefficient ξ^l estimated either
//!
//! * in weight space ([`apply_wsc`]): ξ places the merged layer delta on the
//!   hyperellipsoid whose axes are the specialists' layer deltas;
//! * in feature space ([`fsc_coefficients`]): ξ is the mean ratio of
//!   specialist to merged task-feature norms on a few unlabelled samples,
//!   and is applied inside the forward pass ([`forward_fsc`]);
//! * or both ([`apply_dsc`]).
//!
//! Every coefficient passes through a conservative gate: layers in the
//! magnitude-sensitive set A may only shrink, all other layers may only grow.

use std::collections::BTreeSet;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ModelManifest, ModelWeights};
use crate::error::{Error, Result};
use crate::merge::{self, TaskVector};
use crate::network::{self, FeatureTrace, LabeledBatch, MetricKind};
use crate::tensor::{self, Tensor};

pub const DEFAULT_EPSILON: f64 = 1.1;
pub const DEFAULT_ALPHA: usize = 10;
pub const DEFAULT_LAMBDA: f32 = 0.3;

/// Task-feature norms below this are treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Checkpoint metadata key holding feature-space coefficients as a JSON array.
pub const XI_FEATURE_KEY: &str = "magic.xi_feature";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub per_layer_s: Vec<f64>,
    pub epsilon: f64,
    pub metric_kind: MetricKind,
    pub probe_batch_id: String,
}

/// Change in the metric when one layer's task vector is multiplied by
/// `epsilon` while the rest of the model stays fixed.
///
/// The model under test is `pre + lambda·tv`; each layer is perturbed in
/// turn as `pre + lambda·tv` with `tv^l → epsilon·tv^l`.
pub fn layer_sensitivity(
    tv: &TaskVector,
    pre: &ModelWeights,
    m: &ModelManifest,
    probe: &LabeledBatch,
    epsilon: f64,
    metric: MetricKind,
    lambda: f32,
) -> Result<SensitivityReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    let base = network::performance_metric(&merge::recompose(pre, m, tv, lambda)?, m, probe, metric)?;
    let per_layer_s = (0..m.num_layers())
        .into_par_iter()
        .map(|l| {
            let perturbed = merge::recompose(pre, m, &tv.with_layer_scaled(l, epsilon as f32), lambda)?;
            Ok(network::performance_metric(&perturbed, m, probe, metric)? - base)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityReport {
        per_layer_s,
        epsilon,
        metric_kind: metric,
        probe_batch_id: probe.task_id.clone(),
    })
}

/// The magnitude-sensitive layer set A and the budget α it was drawn with.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensitiveSet {
    pub alpha: usize,
    pub layers: BTreeSet<usize>,
}

impl SensitiveSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn contains(&self, l: usize) -> bool {
        self.layers.contains(&l)
    }
}

/// `A = {l : |{k : s_k < s_l}| < α}`, with equal scores ordered by layer
/// index so that exactly `min(α, L)` layers are chosen.
pub fn select_sensitive_layers(report: &SensitivityReport, alpha: usize) -> SensitiveSet {
    let s = &report.per_layer_s;
    let precedes = |k: usize, l: usize| s[k].total_cmp(&s[l]).then(k.cmp(&l)).is_lt();
    let layers = (0..s.len())
        .filter(|&l| (0..s.len()).filter(|&k| precedes(k, l)).count() < alpha)
        .collect();
    SensitiveSet { alpha, layers }
}

/// Keeps `xi` only if `(xi > 1) XOR in_sensitive_set`, otherwise returns 1.
pub fn gate(xi: f64, in_sensitive_set: bool) -> f64 {
    if (xi > 1.0) ^ in_sensitive_set {
        xi
    } else {
        1.0
    }
}

/// Raw and gated coefficients for one space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceCoefficients {
    pub raw: Vec<f64>,
    pub applied: Vec<f64>,
    /// True where the gate replaced the raw coefficient with 1.
    pub gated: Vec<bool>,
}

impl SpaceCoefficients {
    fn from_raw(raw: Vec<f64>, a: &SensitiveSet) -> Self {
        let applied: Vec<f64> = raw
            .iter()
            .enumerate()
            .map(|(l, &xi)| gate(xi, a.contains(l)))
            .collect();
        let gated = raw.iter().zip(&applied).map(|(r, a)| r != a).collect();
        SpaceCoefficients { raw, applied, gated }
    }

    /// Identity coefficients: nothing rescaled.
    pub fn identity(num_layers: usize) -> Self {
        SpaceCoefficients {
            raw: vec![1.0; num_layers],
            applied: vec![1.0; num_layers],
            gated: vec![false; num_layers],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPlan {
    pub num_layers: usize,
    pub weight: Option<SpaceCoefficients>,
    pub feature: Option<SpaceCoefficients>,
    pub sensitive_set: SensitiveSet,
}

/// One row of the plan report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub layer: usize,
    pub xi_weight: Option<f64>,
    pub xi_feature: Option<f64>,
    #[serde(rename = "in_A")]
    pub in_a: bool,
    pub gated: bool,
    pub raw_xi_weight: Option<f64>,
    pub raw_xi_feature: Option<f64>,
    pub gated_weight: bool,
    pub gated_feature: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub alpha: usize,
    pub sensitive_set: Vec<usize>,
    pub layers: Vec<PlanRow>,
}

impl CalibrationPlan {
    pub fn new(num_layers: usize, sensitive_set: SensitiveSet) -> Self {
        CalibrationPlan {
            num_layers,
            weight: None,
            feature: None,
            sensitive_set,
        }
    }

    pub fn xi_weight(&self) -> Option<&[f64]> {
        self.weight.as_ref().map(|c| c.applied.as_slice())
    }

    pub fn xi_feature(&self) -> Option<&[f64]> {
        self.feature.as_ref().map(|c| c.applied.as_slice())
    }

    /// Every applied coefficient is positive and either 1 or consistent with
    /// the gate: `(ξ > 1) XOR (l ∈ A)`.
    pub fn satisfies_gating(&self) -> bool {
        let ok = |c: &SpaceCoefficients| {
            c.applied.iter().enumerate().all(|(l, &xi)| {
                xi > 0.0 && (xi == 1.0 || ((xi > 1.0) ^ self.sensitive_set.contains(l)))
            })
        };
        self.sensitive_set.layers.len() <= self.sensitive_set.alpha
            && self.weight.as_ref().is_none_or(ok)
            && self.feature.as_ref().is_none_or(ok)
    }

    pub fn report(&self) -> PlanReport {
        let pick = |c: &Option<SpaceCoefficients>, l: usize, raw: bool| {
            c.as_ref().map(|c| if raw { c.raw[l] } else { c.applied[l] })
        };
        let gated = |c: &Option<SpaceCoefficients>, l: usize| c.as_ref().is_some_and(|c| c.gated[l]);
        let layers = (0..self.num_layers)
            .map(|l| PlanRow {
                layer: l,
                xi_weight: pick(&self.weight, l, false),
                xi_feature: pick(&self.feature, l, false),
                in_a: self.sensitive_set.contains(l),
                gated: gated(&self.weight, l) || gated(&self.feature, l),
                raw_xi_weight: pick(&self.weight, l, true),
                raw_xi_feature: pick(&self.feature, l, true),
                gated_weight: gated(&self.weight, l),
                gated_feature: gated(&self.feature, l),
            })
            .collect();
        PlanReport {
            alpha: self.sensitive_set.alpha,
            sensitive_set: self.sensitive_set.layers.iter().copied().collect(),
            layers,
        }
    }

    pub fn from_report(r: &PlanReport) -> Result<Self> {
        let num_layers = r.layers.len();
        if r.layers.iter().enumerate().any(|(i, row)| row.layer != i) {
            return Err(Error::Report("plan rows must be listed by layer index".into()));
        }
        let space = |applied: fn(&PlanRow) -> Option<f64>,
                     raw: fn(&PlanRow) -> Option<f64>,
                     gated: fn(&PlanRow) -> bool|
         -> Option<SpaceCoefficients> {
            let applied: Option<Vec<f64>> = r.layers.iter().map(applied).collect();
            let applied = applied?;
            Some(SpaceCoefficients {
                raw: r
                    .layers
                    .iter()
                    .zip(&applied)
                    .map(|(row, &a)| raw(row).unwrap_or(a))
                    .collect(),
                applied,
                gated: r.layers.iter().map(gated).collect(),
            })
        };
        Ok(CalibrationPlan {
            num_layers,
            weight: space(|r| r.xi_weight, |r| r.raw_xi_weight, |r| r.gated_weight),
            feature: space(|r| r.xi_feature, |r| r.raw_xi_feature, |r| r.gated_feature),
            sensitive_set: SensitiveSet {
                alpha: r.alpha,
                layers: r.sensitive_set.iter().copied().collect(),
            },
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.report()).expect("plan serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: PlanReport = serde_json::from_str(text).map_err(|e| Error::Report(e.to_string()))?;
        Self::from_report(&r)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record([
            "layer",
            "xi_weight",
            "xi_feature",
            "in_A",
            "gated",
            "raw_xi_weight",
            "raw_xi_feature",
        ])
        .map_err(|e| Error::Report(e.to_string()))?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in self.report().layers {
            w.write_record([
                row.layer.to_string(),
                opt(row.xi_weight),
                opt(row.xi_feature),
                row.in_a.to_string(),
                row.gated.to_string(),
                opt(row.raw_xi_weight),
                opt(row.raw_xi_feature),
            ])
            .map_err(|e| Error::Report(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is UTF-8"))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Mean over tasks of the mean per-sample ratio
/// `‖Δh_k^l(x)‖₂ / ‖Δh_merge^l(x)‖₂`, before gating.
///
/// A layer whose merged task feature vanishes on any calibration sample is
/// reported as `Err(DegenerateFeature)` in its slot.
pub fn raw_feature_ratios(
    specialists: &[(TaskVector, LabeledBatch)],
    merged: &ModelWeights,
    pre: &ModelWeights,
    m: &ModelManifest,
) -> Result<Vec<std::result::Result<f64, Error>>> {
    if specialists.is_empty() {
        return Err(Error::EmptyInput);
    }
    let num_layers = m.num_layers();
    let per_task = specialists
        .par_iter()
        .map(|(tv, batch)| {
            if batch.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "calibration batch {:?} is empty",
                    batch.task_id
                )));
            }
            let specialist = merge::recompose(pre, m, tv, 1.0)?;
            let x = &batch.inputs;
            let base = network::forward_with_trace(pre, m, x)?;
            let own = network::task_feature_from_trace(&base, &specialist, m, x, &batch.task_id)?;
            let mrg = network::task_feature_from_trace(&base, merged, m, x, &batch.task_id)?;
            Ok((0..num_layers)
                .map(|l| {
                    let num = own.sample_norms(l);
                    let den = mrg.sample_norms(l);
                    if den.iter().any(|&d| d < DEGENERATE_NORM) {
                        return None;
                    }
                    let n = num.len() as f64;
                    Some(num.iter().zip(&den).map(|(a, b)| a / b).sum::<f64>() / n)
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;

    let k = per_task.len() as f64;
    Ok((0..num_layers)
        .map(|l| {
            let mut sum = 0.0;
            for task in &per_task {
                match task[l] {
                    Some(r) => sum += r,
                    None => return Err(Error::DegenerateFeature { layer: l }),
                }
            }
            Ok(sum / k)
        })
        .collect())
}

/// Feature-space coefficients, gated against `a`.
pub fn fsc_coefficients(
    specialists: &[(TaskVector, LabeledBatch)],
    merged: &ModelWeights,
    pre: &ModelWeights,
    m: &ModelManifest,
    a: &SensitiveSet,
) -> Result<CalibrationPlan> {
    let raw = raw_feature_ratios(specialists, merged, pre, m)?
        .into_iter()
        .map(|r| match r {
            Ok(xi) => xi,
            Err(e) => {
                warn!("{e}; layer left uncalibrated");
                1.0
            }
        })
        .collect();
    let mut plan = CalibrationPlan::new(m.num_layers(), a.clone());
    plan.feature = Some(SpaceCoefficients::from_raw(raw, a));
    Ok(plan)
}

/// Forward pass with feature-space coefficients.
///
/// Runs one calibrated stream: at layer `l` both the pretrained and the
/// merged layer see the calibrated activation `a^{l-1}`, and the output is
/// `h_pre + ξ^l·(h_merge − h_pre)`. Layers with `ξ^l = 1` pass the merged
/// output through unchanged.
pub fn forward_fsc_with(
    pre: &ModelWeights,
    merged: &ModelWeights,
    m: &ModelManifest,
    xi_feature: &[f64],
    x: &Tensor,
) -> Result<FeatureTrace> {
    if xi_feature.len() != m.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "{} feature coefficients for {} layers",
            xi_feature.len(),
            m.num_layers()
        )));
    }
    if x.rank() != 2 || x.shape()[1] != m.input_dim {
        return Err(Error::ShapeMismatch {
            op: "forward_fsc",
            left: x.shape().to_vec(),
            right: vec![0, m.input_dim],
        });
    }
    let pre_layers = network::layers(pre, m)?;
    let mrg_layers = network::layers(merged, m)?;
    let mut per_layer: Vec<Tensor> = Vec::with_capacity(m.num_layers());
    for (l, (lp, lm)) in pre_layers.iter().zip(&mrg_layers).enumerate() {
        let input = per_layer.last().unwrap_or(x);
        let h_mrg = network::dense_forward(lm, input)?;
        let xi = xi_feature[l];
        let out = if xi == 1.0 {
            h_mrg
        } else {
            let h_pre = network::dense_forward(lp, input)?;
            h_mrg.zip_with(&h_pre, "forward_fsc", |hm, hp| hp + xi as f32 * (hm - hp))?
        };
        per_layer.push(out);
    }
    let logits = per_layer.last().cloned().expect("at least one layer");
    Ok(FeatureTrace { per_layer, logits })
}

pub fn forward_fsc(
    pre: &ModelWeights,
    merged: &ModelWeights,
    m: &ModelManifest,
    plan: &CalibrationPlan,
    x: &Tensor,
) -> Result<FeatureTrace> {
    let xi = plan
        .xi_feature()
        .ok_or_else(|| Error::InvalidArgument("plan has no feature-space coefficients".into()))?;
    forward_fsc_with(pre, merged, m, xi, x)
}

/// Weight-space coefficient for one layer.
///
/// With `c_k = ⟨v, Δθ_k⟩ / ‖Δθ_k‖²` and residual `r = v − Σ c_k Δθ_k`,
/// `S = Σ ‖c_k Δθ_k‖²/‖Δθ_k‖² + ‖r‖²/M̄²` where `M̄` is the mean task-layer
/// norm; returns `1/√S`, the factor that moves `v` onto `S = 1`.
pub fn wsc_coefficient(merged_layer: &Tensor, task_layers: &[&Tensor]) -> Result<f64> {
    let s = hyperellipsoid_value(merged_layer, task_layers)?;
    if s == 0.0 {
        return Err(Error::ZeroMerged);
    }
    Ok(1.0 / s.sqrt())
}

/// The constraint's left-hand side `S(v)`; scaling `v` by ξ scales it by ξ².
pub fn hyperellipsoid_value(v: &Tensor, task_layers: &[&Tensor]) -> Result<f64> {
    if task_layers.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut residual: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let mut axial = 0.0;
    let mut mean_norm = 0.0;
    for axis in task_layers {
        let axis_sq = tensor::dot(axis, axis)?;
        if axis_sq == 0.0 {
            return Err(Error::ZeroAxis);
        }
        let c = tensor::dot(v, axis)? / axis_sq;
        // ‖c·Δθ_k‖² / ‖Δθ_k‖² = c²
        axial += c * c;
        mean_norm += axis_sq.sqrt();
        for (r, &a) in residual.iter_mut().zip(axis.data()) {
            *r -= c * a as f64;
        }
    }
    mean_norm /= task_layers.len() as f64;
    let residual_sq: f64 = residual.iter().map(|r| r * r).sum();
    Ok(axial + residual_sq / (mean_norm * mean_norm))
}

fn check_bases(merged: &TaskVector, specialists: &[TaskVector]) -> Result<()> {
    if specialists.is_empty() {
        return Err(Error::EmptyInput);
    }
    if specialists.iter().any(|t| t.base_fingerprint != merged.base_fingerprint) {
        return Err(Error::BaseMismatch);
    }
    Ok(())
}

/// Weight-space calibration of an effective merged task vector (λ already
/// applied), gated against `a`.
pub fn apply_wsc(
    merged_tv: &TaskVector,
    specialist_tvs: &[TaskVector],
    a: &SensitiveSet,
) -> Result<(TaskVector, CalibrationPlan)> {
    check_bases(merged_tv, specialist_tvs)?;
    let raw = merged_tv
        .per_layer
        .iter()
        .map(|(&l, v)| {
            let axes: Vec<&Tensor> = specialist_tvs.iter().map(|t| t.layer(l)).collect();
            match wsc_coefficient(v, &axes) {
                Ok(xi) => Ok(xi),
                Err(Error::ZeroMerged) => {
                    warn!("merged task vector is zero at layer {l}; left uncalibrated");
                    Ok(1.0)
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let coefs = SpaceCoefficients::from_raw(raw, a);
    let calibrated = merged_tv.scaled_per_layer(&coefs.applied);
    let mut plan = CalibrationPlan::new(merged_tv.num_layers(), a.clone());
    plan.weight = Some(coefs);
    Ok((calibrated, plan))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DscConfig {
    pub alpha: usize,
    pub epsilon: f64,
    pub lambda: f32,
    pub metric: MetricKind,
}

impl Default for DscConfig {
    fn default() -> Self {
        DscConfig {
            alpha: DEFAULT_ALPHA,
            epsilon: DEFAULT_EPSILON,
            lambda: DEFAULT_LAMBDA,
            metric: MetricKind::NegEntropy,
        }
    }
}

/// A from the sensitivity of the weight-averaged merge (`pre + mean Δθ_k`)
/// on a general probe batch. Skips the probe entirely when `alpha == 0`.
pub fn sensitive_set_from_average(
    pre: &ModelWeights,
    m: &ModelManifest,
    specialist_tvs: &[TaskVector],
    probe: &LabeledBatch,
    alpha: usize,
    epsilon: f64,
    metric: MetricKind,
) -> Result<(SensitiveSet, Option<SensitivityReport>)> {
    if alpha == 0 {
        return Ok((SensitiveSet::empty(), None));
    }
    let avg = merge::merge_average(specialist_tvs)?;
    let report = layer_sensitivity(&avg, pre, m, probe, epsilon, metric, 1.0)?;
    Ok((select_sensitive_layers(&report, alpha), Some(report)))
}

/// Dual-space calibration: sensitive set from the averaged merge, then
/// weight-space calibration of `lambda·merged_tv`, then feature-space
/// coefficients estimated on the weight-calibrated model.
///
/// The returned weights carry the weight-space step; the plan's feature
/// coefficients are applied at inference through [`forward_fsc`].
#[allow(clippy::too_many_arguments)]
pub fn apply_dsc(
    pre: &ModelWeights,
    m: &ModelManifest,
    merged_tv: &TaskVector,
    specialist_tvs: &[TaskVector],
    specialist_batches: &[LabeledBatch],
    probe: &LabeledBatch,
    cfg: &DscConfig,
) -> Result<(ModelWeights, CalibrationPlan)> {
    if specialist_tvs.len() != specialist_batches.len() {
        return Err(Error::InvalidArgument(format!(
            "{} specialists but {} calibration batches",
            specialist_tvs.len(),
            specialist_batches.len()
        )));
    }
    if probe.is_empty() {
        return Err(Error::InvalidArgument("probe batch is empty".into()));
    }
    let (a, _) = sensitive_set_from_average(
        pre,
        m,
        specialist_tvs,
        probe,
        cfg.alpha,
        cfg.epsilon,
        cfg.metric,
    )?;
    let effective = merged_tv.scaled(cfg.lambda);
    let (calibrated_tv, mut plan) = apply_wsc(&effective, specialist_tvs, &a)?;
    let calibrated = merge::recompose(pre, m, &calibrated_tv, 1.0)?;

    let pairs: Vec<(TaskVector, LabeledBatch)> = specialist_tvs
        .iter()
        .cloned()
        .zip(specialist_batches.iter().cloned())
        .collect();
    plan.feature = fsc_coefficients(&pairs, &calibrated, pre, m, &a)?.feature;
    Ok((calibrated, plan))
}

/// Minimiser over ξ of `‖ξ·(η·Δh_k + ε) − Δh_k‖²`:
/// `(η‖Δh_k‖² + ⟨Δh_k, ε⟩) / (η²‖Δh_k‖² + 2η⟨Δh_k, ε⟩ + ‖ε‖²)`.
///
/// When ε is orthogonal to Δh_k this is `η‖Δh_k‖² / (η²‖Δh_k‖² + ‖ε‖²)`,
/// and `1/η` when ε vanishes.
pub fn optimal_scale_closed_form(dh_k: &Tensor, eta: f64, eps: &Tensor) -> Result<f64> {
    let a = tensor::dot(dh_k, dh_k)?;
    let cross = tensor::dot(dh_k, eps)?;
    let e = tensor::dot(eps, eps)?;
    // ‖η·Δh_k + ε‖²; zero means every ξ gives the same loss.
    let den = a * eta * eta + 2.0 * eta * cross + e;
    if !(den > 0.0) {
        return Err(Error::DegenerateInput);
    }
    Ok((a * eta + cross) / den)
}

/// A merged model together with the feature coefficients to run it with.
#[derive(Clone, Debug)]
pub struct CalibratedModel {
    pub weights: ModelWeights,
    pub xi_feature: Option<Vec<f64>>,
}

impl CalibratedModel {
    pub fn plain(weights: ModelWeights) -> Self {
        CalibratedModel {
            weights,
            xi_feature: None,
        }
    }

    /// Checkpoint form; feature coefficients travel in the metadata.
    pub fn to_checkpoint(&self) -> ModelWeights {
        let mut w = self.weights.clone();
        match &self.xi_feature {
            Some(xi) => {
                w.metadata
                    .insert(XI_FEATURE_KEY.to_string(), serde_json::to_string(xi).expect("floats serialise"));
            }
            None => {
                w.metadata.remove(XI_FEATURE_KEY);
            }
        }
        w
    }

    pub fn from_checkpoint(mut w: ModelWeights) -> Result<Self> {
        let xi_feature = match w.metadata.remove(XI_FEATURE_KEY) {
            Some(text) => Some(
                serde_json::from_str::<Vec<f64>>(&text)
                    .map_err(|e| Error::MalformedHeader(format!("{XI_FEATURE_KEY}: {e}")))?,
            ),
            None => None,
        };
        Ok(CalibratedModel { weights: w, xi_feature })
    }

    pub fn forward(&self, pre: &ModelWeights, m: &ModelManifest, x: &Tensor) -> Result<Tensor> {
        match &self.xi_feature {
            Some(xi) => Ok(forward_fsc_with(pre, &self.weights, m, xi, x)?.logits),
            None => network::forward(&self.weights, m, x),
        }
    }

    pub fn accuracy(&self, pre: &ModelWeights, m: &ModelManifest, batch: &LabeledBatch) -> Result<f64> {
        let logits = self.forward(pre, m, &batch.inputs)?;
        network::batch_metric(&logits, batch, MetricKind::Accuracy)
    }
}
