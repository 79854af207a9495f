//! Analysis reports: magnitude ratios under merge operations, the
//! weight-disentanglement heatmap, calibration-coefficient comparisons and
//! per-task target enhancement.
//!
//! Every report serialises to JSON and to CSV with a header row.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{self, CalibrationPlan, SensitiveSet, SensitivityReport, DEGENERATE_NORM};
use crate::checkpoint::{ModelManifest, ModelWeights};
use crate::error::{Error, Result};
use crate::merge::{self, TaskVector};
use crate::network::{self, LabeledBatch};

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let err = |e: csv::Error| Error::Report(e.to_string());
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is UTF-8"))
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den >= DEGENERATE_NORM).then(|| num / den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub layer: usize,
    pub weight_ratio: f64,
    pub feature_ratio: f64,
    pub operation_name: String,
    pub task: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub rows: Vec<RatioRow>,
}

impl RatioReport {
    pub fn to_csv(&self) -> Result<String> {
        csv_string(
            &["layer", "weight_ratio", "feature_ratio", "operation_name", "task"],
            self.rows.iter().map(|r| {
                vec![
                    r.layer.to_string(),
                    r.weight_ratio.to_string(),
                    r.feature_ratio.to_string(),
                    r.operation_name.clone(),
                    r.task.map(|t| t.to_string()).unwrap_or_default(),
                ]
            }),
        )
    }
}

/// Per-layer ratio of the magnitude after an operation to the magnitude
/// before it, in weight space and in feature space (L2 norms, features
/// averaged over every probe input).
///
/// Layers whose `before` magnitude is degenerate report a ratio of 1.
pub fn magnitude_ratio_report(
    before: &TaskVector,
    after: &TaskVector,
    pre: &ModelWeights,
    m: &ModelManifest,
    probe_batches: &[LabeledBatch],
    operation_name: &str,
) -> Result<RatioReport> {
    if before.base_fingerprint != after.base_fingerprint {
        return Err(Error::BaseMismatch);
    }
    let w_before = merge::recompose(pre, m, before, 1.0)?;
    let w_after = merge::recompose(pre, m, after, 1.0)?;
    let l_count = m.num_layers();
    let mut sums = vec![0.0; l_count];
    let mut degenerate = vec![false; l_count];
    let mut n = 0usize;
    for batch in probe_batches {
        let base = network::forward_with_trace(pre, m, &batch.inputs)?;
        let tb = network::task_feature_from_trace(&base, &w_before, m, &batch.inputs, &batch.task_id)?;
        let ta = network::task_feature_from_trace(&base, &w_after, m, &batch.inputs, &batch.task_id)?;
        for l in 0..l_count {
            for (a, b) in ta.sample_norms(l).into_iter().zip(tb.sample_norms(l)) {
                match ratio(a, b) {
                    Some(r) => sums[l] += r,
                    None => degenerate[l] = true,
                }
            }
        }
        n += batch.len();
    }
    let rows = (0..l_count)
        .map(|l| {
            let weight_ratio = ratio(after.layer(l).l2_norm(), before.layer(l).l2_norm()).unwrap_or_else(|| {
                warn!("{operation_name}: layer {l} is zero before the operation");
                1.0
            });
            let feature_ratio = if n == 0 || degenerate[l] {
                warn!("{operation_name}: task feature at layer {l} is degenerate");
                1.0
            } else {
                sums[l] / n as f64
            };
            RatioRow {
                layer: l,
                weight_ratio,
                feature_ratio,
                operation_name: operation_name.to_string(),
                task: None,
            }
        })
        .collect();
    Ok(RatioReport { rows })
}

/// Ratio reports for the three canonical merge operations, per task:
/// `trim` (task vector vs. its TIES-trimmed copy), `arithmetic` (task
/// vector vs. `lambda·Σ Δθ`) and `disjoint` (trimmed task vector vs. the
/// disjoint mean of all trimmed vectors). Each task's features are
/// measured on its own probe batch.
pub fn operation_ratio_reports(
    tvs: &[TaskVector],
    pre: &ModelWeights,
    m: &ModelManifest,
    probe_batches: &[LabeledBatch],
    keep_fraction: f64,
    lambda: f32,
) -> Result<RatioReport> {
    if tvs.len() != probe_batches.len() {
        return Err(Error::InvalidArgument(format!(
            "{} task vectors but {} probe batches",
            tvs.len(),
            probe_batches.len()
        )));
    }
    let trimmed: Vec<TaskVector> = tvs.iter().map(|t| merge::trim_task_vector(t, keep_fraction)).collect();
    let arithmetic = merge::merge_task_arithmetic(tvs)?.scaled(lambda);
    let disjoint = merge::merge_disjoint(&trimmed)?;
    let per_task = (0..tvs.len())
        .into_par_iter()
        .map(|k| {
            let probe = std::slice::from_ref(&probe_batches[k]);
            let mut rows = vec![];
            for (name, before, after) in [
                ("trim", &tvs[k], &trimmed[k]),
                ("arithmetic", &tvs[k], &arithmetic),
                ("disjoint", &trimmed[k], &disjoint),
            ] {
                for mut row in magnitude_ratio_report(before, after, pre, m, probe, name)?.rows {
                    row.task = Some(k);
                    rows.push(row);
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RatioReport {
        rows: per_task.into_iter().flatten().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub layer: usize,
    /// `cells[i][j]`: inputs of task `i`, layer taken from task `j`.
    pub cells: Vec<Vec<f64>>,
}

impl HeatmapReport {
    pub fn to_csv(&self) -> Result<String> {
        let k = self.cells.len();
        let header: Vec<String> = std::iter::once("task".to_string())
            .chain((0..k).map(|j| format!("replaced_by_{j}")))
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        csv_string(
            &header,
            self.cells.iter().enumerate().map(|(i, row)| {
                std::iter::once(i.to_string())
                    .chain(row.iter().map(|v| v.to_string()))
                    .collect()
            }),
        )
    }

    /// Rows whose diagonal cell is the largest in its column.
    pub fn diagonal_column_max_rows(&self) -> usize {
        let k = self.cells.len();
        (0..k)
            .filter(|&i| (0..k).all(|r| self.cells[r][i] <= self.cells[i][i]))
            .count()
    }
}

fn mean_l1_feature(
    base: &network::FeatureTrace,
    w: &ModelWeights,
    m: &ModelManifest,
    batch: &LabeledBatch,
    layer: usize,
) -> Result<f64> {
    let tf = network::task_feature_from_trace(base, w, m, &batch.inputs, &batch.task_id)?;
    let norms = network::row_norms(&tf.per_layer[layer], 1);
    Ok(norms.iter().sum::<f64>() / norms.len().max(1) as f64)
}

/// Increase in the L1 task-feature norm at `layer` on task `i`'s inputs
/// when that layer of the (effective) merged vector is replaced by task
/// `j`'s.
pub fn disentanglement_heatmap(
    merged_tv: &TaskVector,
    specialist_tvs: &[TaskVector],
    pre: &ModelWeights,
    m: &ModelManifest,
    task_batches: &[LabeledBatch],
    layer: usize,
) -> Result<HeatmapReport> {
    if layer >= m.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range for {} layers",
            m.num_layers()
        )));
    }
    if specialist_tvs.len() != task_batches.len() {
        return Err(Error::InvalidArgument(format!(
            "{} specialists but {} task batches",
            specialist_tvs.len(),
            task_batches.len()
        )));
    }
    let merged = merge::recompose(pre, m, merged_tv, 1.0)?;
    let replaced = specialist_tvs
        .iter()
        .map(|tv| merge::recompose(pre, m, &merged_tv.with_layer_replaced(layer, tv.layer(layer).clone())?, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let cells = task_batches
        .par_iter()
        .map(|batch| {
            let base = network::forward_with_trace(pre, m, &batch.inputs)?;
            let reference = mean_l1_feature(&base, &merged, m, batch, layer)?;
            replaced
                .iter()
                .map(|w| Ok(mean_l1_feature(&base, w, m, batch, layer)? - reference))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HeatmapReport { layer, cells })
}

/// Repeated coefficient estimates from one dataset: `estimates[b][l]` is
/// the estimate from calibration batch `b` at layer `l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetCoefficients {
    pub dataset: String,
    pub estimates: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub layer: usize,
    pub xi_weight: f64,
    pub xi_feature: f64,
    pub gap: f64,
    pub in_a: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadRow {
    pub dataset: String,
    pub layer: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub rows: Vec<ComparisonRow>,
    pub spread: Vec<SpreadRow>,
    /// Mean within-dataset variance over the variance of dataset means,
    /// averaged over layers; `None` with fewer than two datasets.
    pub variance_ratio: Option<f64>,
}

impl CoefficientReport {
    pub fn to_csv(&self) -> Result<String> {
        csv_string(
            &["layer", "xi_weight", "xi_feature", "gap", "in_A"],
            self.rows.iter().map(|r| {
                vec![
                    r.layer.to_string(),
                    r.xi_weight.to_string(),
                    r.xi_feature.to_string(),
                    r.gap.to_string(),
                    r.in_a.to_string(),
                ]
            }),
        )
    }

    pub fn spread_csv(&self) -> Result<String> {
        csv_string(
            &["dataset", "layer", "min", "max", "mean", "stddev"],
            self.spread.iter().map(|s| {
                vec![
                    s.dataset.clone(),
                    s.layer.to_string(),
                    s.min.to_string(),
                    s.max.to_string(),
                    s.mean.to_string(),
                    s.stddev.to_string(),
                ]
            }),
        )
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

/// Weight- versus feature-space coefficients per layer, plus the spread of
/// repeated feature-space estimates within each dataset.
pub fn coefficient_comparison(plan: &CalibrationPlan, per_dataset: &[DatasetCoefficients]) -> Result<CoefficientReport> {
    let (Some(w), Some(f)) = (plan.xi_weight(), plan.xi_feature()) else {
        return Err(Error::InvalidArgument(
            "coefficient comparison needs both weight and feature coefficients".into(),
        ));
    };
    let rows = (0..plan.num_layers)
        .map(|l| ComparisonRow {
            layer: l,
            xi_weight: w[l],
            xi_feature: f[l],
            gap: (w[l] - f[l]).abs(),
            in_a: plan.sensitive_set.contains(l),
        })
        .collect();

    let mut spread = vec![];
    for d in per_dataset {
        if d.estimates.is_empty() || d.estimates.iter().any(|e| e.len() != plan.num_layers) {
            return Err(Error::InvalidArgument(format!(
                "dataset {:?} needs at least one estimate of {} layers",
                d.dataset, plan.num_layers
            )));
        }
        for l in 0..plan.num_layers {
            let xs: Vec<f64> = d.estimates.iter().map(|e| e[l]).collect();
            let (mean, var) = mean_var(&xs);
            spread.push(SpreadRow {
                dataset: d.dataset.clone(),
                layer: l,
                min: xs.iter().copied().fold(f64::INFINITY, f64::min),
                max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean,
                stddev: var.sqrt(),
            });
        }
    }

    let variance_ratio = (per_dataset.len() >= 2).then(|| {
        let (mut within, mut between) = (0.0, 0.0);
        for l in 0..plan.num_layers {
            let rows: Vec<&SpreadRow> = spread.iter().filter(|s| s.layer == l).collect();
            within += rows.iter().map(|s| s.stddev.powi(2)).sum::<f64>() / rows.len() as f64;
            between += mean_var(&rows.iter().map(|s| s.mean).collect::<Vec<_>>()).1;
        }
        within / between
    });
    Ok(CoefficientReport {
        rows,
        spread,
        variance_ratio,
    })
}

/// Ungated single-sample feature-space estimates of task `k`'s coefficient
/// against `merged`, one per row of `batch`.
pub fn single_sample_estimates(
    tv_k: &TaskVector,
    merged: &ModelWeights,
    pre: &ModelWeights,
    m: &ModelManifest,
    batch: &LabeledBatch,
) -> Result<Vec<Vec<f64>>> {
    (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let one = batch.subset(&[i])?;
            let pair = [(tv_k.clone(), one)];
            Ok(calibrate::raw_feature_ratios(&pair, merged, pre, m)?
                .into_iter()
                .map(|r| r.unwrap_or(1.0))
                .collect())
        })
        .collect()
}

/// Feature-space coefficients that rescale the merged model towards task
/// `k` alone (no averaging over tasks), gated against `a`.
pub fn target_enhancement(
    merged: &ModelWeights,
    specialist_tv: &TaskVector,
    pre: &ModelWeights,
    m: &ModelManifest,
    batch_k: &LabeledBatch,
    a: &SensitiveSet,
) -> Result<CalibrationPlan> {
    calibrate::fsc_coefficients(&[(specialist_tv.clone(), batch_k.clone())], merged, pre, m, a)
}

pub fn sensitivity_csv(report: &SensitivityReport) -> Result<String> {
    csv_string(
        &["layer", "sensitivity", "epsilon", "metric", "probe"],
        report.per_layer_s.iter().enumerate().map(|(l, s)| {
            vec![
                l.to_string(),
                s.to_string(),
                report.epsilon.to_string(),
                report.metric_kind.to_string(),
                report.probe_batch_id.clone(),
            ]
        }),
    )
}
