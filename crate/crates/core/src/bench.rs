//! Synthetic multi-task benchmark.
//!
//! Each task is a Gaussian-cluster classification problem in a shared input
//! space: the task owns a region (a random translation) and arranges its
//! class clusters in a random rotation around it. Each task is scored on its
//! own slice of the output layer (its classification head), the way
//! multi-task merges are usually evaluated. A small MLP is trained briefly on
//! the pooled data to act as the pretrained model, then one specialist per
//! task is fine-tuned from it.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::calibrate::{self, CalibratedModel, CalibrationPlan, DscConfig, SensitiveSet};
use crate::checkpoint::{Activation, ModelManifest, ModelWeights};
use crate::error::{Error, Result};
use crate::merge::{self, MergeConfig, TaskVector};
use crate::network::{self, LabeledBatch, MetricKind, TrainConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub tasks: usize,
    pub input_dim: usize,
    /// Classes per task; the network has `tasks · num_classes` outputs.
    pub num_classes: usize,
    pub samples_per_task: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub test_fraction: f64,
    /// Distance of each task's region from the origin.
    pub separation: f32,
    /// Distance of each class cluster from its task's centre.
    pub cluster_radius: f32,
    pub noise: f32,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f32,
    /// Unlabelled per-task samples used for feature-space estimates.
    pub calibration_samples: usize,
    /// Size of the general probe used for layer sensitivity.
    pub probe_samples: usize,
    /// Task-agnostic samples per task slot for DSC-A.
    pub agnostic_samples: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            tasks: 4,
            input_dim: 16,
            num_classes: 4,
            samples_per_task: 500,
            hidden: vec![32, 32],
            seed: 0,
            epochs: 200,
            lr: 0.1,
            batch_size: 32,
            test_fraction: 0.2,
            separation: 4.0,
            cluster_radius: 2.0,
            noise: 0.5,
            pretrain_epochs: 1,
            pretrain_lr: 0.01,
            calibration_samples: 1,
            probe_samples: 64,
            agnostic_samples: 16,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("benchmark spec: {msg}")));
        if self.tasks == 0 {
            return bad("tasks must be ≥ 1");
        }
        if self.input_dim == 0 || self.num_classes < 2 || self.hidden.contains(&0) {
            return bad("dimensions must be positive and num_classes ≥ 2");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must be in (0, 1)");
        }
        let test = self.test_count();
        if test == 0 || test >= self.samples_per_task {
            return bad("samples_per_task too small for the train/test split");
        }
        if self.calibration_samples == 0 || self.calibration_samples > self.samples_per_task - test {
            return bad("calibration_samples must be in [1, train size]");
        }
        if self.probe_samples == 0 || self.agnostic_samples == 0 || self.batch_size == 0 {
            return bad("probe_samples, agnostic_samples and batch_size must be ≥ 1");
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) || !(self.noise >= 0.0) {
            return bad("learning rates must be > 0 and noise ≥ 0");
        }
        Ok(())
    }

    fn test_count(&self) -> usize {
        (self.samples_per_task as f64 * self.test_fraction).round() as usize
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("benchmark spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Clone, Debug)]
pub struct TaskData {
    pub specialist: ModelWeights,
    pub task_vector: TaskVector,
    pub train: LabeledBatch,
    pub test: LabeledBatch,
}

impl TaskData {
    /// The first `n` training inputs, unlabelled.
    pub fn calibration_batch(&self, n: usize) -> Result<LabeledBatch> {
        Ok(self.train.take(n)?.unlabeled())
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkSetup {
    pub spec: BenchmarkSpec,
    pub pretrained: ModelWeights,
    pub manifest: ModelManifest,
    pub tasks: Vec<TaskData>,
    /// General, task-agnostic inputs for layer sensitivity.
    pub probe: LabeledBatch,
    /// One task-agnostic batch per task slot, for DSC-A.
    pub agnostic: Vec<LabeledBatch>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let v = gaussian_vec(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
    v.into_iter().map(|x| x / norm).collect()
}

fn broad_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, scale: f32, id: &str) -> Result<LabeledBatch> {
    let data = gaussian_vec(rng, n * dim).into_iter().map(|x| x * scale).collect();
    LabeledBatch::new(Tensor::matrix(n, dim, data)?, None, id)
}

/// Draws every task's data from its own RNG stream so that task `k` does not
/// depend on how many tasks precede it.
fn task_samples(spec: &BenchmarkSpec, k: usize) -> Result<(LabeledBatch, LabeledBatch)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + k as u64);
    let d = spec.input_dim;
    let centre: Vec<f32> = unit_vec(&mut rng, d).into_iter().map(|x| x * spec.separation).collect();
    let means: Vec<Vec<f32>> = (0..spec.num_classes)
        .map(|_| {
            unit_vec(&mut rng, d)
                .iter()
                .zip(&centre)
                .map(|(u, c)| c + spec.cluster_radius * u)
                .collect()
        })
        .collect();
    let offset = k * spec.num_classes;
    let mut labels: Vec<usize> = (0..spec.samples_per_task).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(spec.samples_per_task * d);
    for &y in &labels {
        for (j, z) in gaussian_vec(&mut rng, d).into_iter().enumerate() {
            data.push(means[y][j] + spec.noise * z);
        }
    }
    let labels = labels.into_iter().map(|y| y + offset).collect();
    let id = format!("task{k}");
    let all = LabeledBatch::new(Tensor::matrix(spec.samples_per_task, d, data)?, Some(labels), id.clone())?
        .with_classes(offset..offset + spec.num_classes)?;
    let n_test = spec.test_count();
    let n_train = spec.samples_per_task - n_test;
    let train_rows: Vec<usize> = (0..n_train).collect();
    let test_rows: Vec<usize> = (n_train..spec.samples_per_task).collect();
    let mut train = all.subset(&train_rows)?;
    let mut test = all.subset(&test_rows)?;
    train.task_id = format!("{id}/train");
    test.task_id = format!("{id}/test");
    Ok((train, test))
}

/// Generates tasks, the pretrained model and one specialist per task.
/// Bit-identical for a fixed spec.
pub fn make_synthetic_tasks(spec: &BenchmarkSpec) -> Result<BenchmarkSetup> {
    spec.validate()?;
    let splits = (0..spec.tasks)
        .map(|k| task_samples(spec, k))
        .collect::<Result<Vec<_>>>()?;

    let (init, manifest) = network::init_mlp(
        spec.input_dim,
        &spec.hidden,
        spec.tasks * spec.num_classes,
        Activation::Relu,
        spec.seed,
    )?;
    let train_sets: Vec<LabeledBatch> = splits.iter().map(|(tr, _)| tr.clone()).collect();
    let pretrain = TrainConfig {
        epochs: spec.pretrain_epochs,
        lr: spec.pretrain_lr,
        batch_size: Some(spec.batch_size),
        seed: spec.seed ^ 0x5eed,
    };
    let pretrained = network::train_specialist(&init, &manifest, &train_sets, &pretrain)?;

    let tasks = splits
        .into_par_iter()
        .enumerate()
        .map(|(k, (train, test))| {
            let cfg = TrainConfig {
                epochs: spec.epochs,
                lr: spec.lr,
                batch_size: Some(spec.batch_size),
                seed: spec.seed.wrapping_mul(1000).wrapping_add(k as u64 + 1),
            };
            let specialist = network::train_specialist(&pretrained, &manifest, std::slice::from_ref(&train), &cfg)?;
            let task_vector = merge::task_vector(&pretrained, &specialist, &manifest)?;
            Ok(TaskData {
                specialist,
                task_vector,
                train,
                test,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let scale = spec.separation;
    let probe = broad_batch(&mut rng, spec.probe_samples, spec.input_dim, scale, "probe")?;
    let agnostic = (0..spec.tasks)
        .map(|k| broad_batch(&mut rng, spec.agnostic_samples, spec.input_dim, scale, &format!("agnostic{k}")))
        .collect::<Result<Vec<_>>>()?;

    Ok(BenchmarkSetup {
        spec: spec.clone(),
        pretrained,
        manifest,
        tasks,
        probe,
        agnostic,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    None,
    Wsc,
    Fsc,
    Dsc,
    DscA,
}

impl std::str::FromStr for Calibration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Calibration::None),
            "wsc" => Ok(Calibration::Wsc),
            "fsc" => Ok(Calibration::Fsc),
            "dsc" => Ok(Calibration::Dsc),
            "dsc_a" | "dsc-a" => Ok(Calibration::DscA),
            other => Err(Error::InvalidArgument(format!("unknown calibration {other:?}"))),
        }
    }
}

impl std::fmt::Display for Calibration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Calibration::None => "none",
            Calibration::Wsc => "wsc",
            Calibration::Fsc => "fsc",
            Calibration::Dsc => "dsc",
            Calibration::DscA => "dsc_a",
        })
    }
}

/// Calibration hyperparameters shared by every pipeline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub alpha: usize,
    pub epsilon: f64,
    pub metric: MetricKind,
    /// Overrides the spec's per-task calibration sample count.
    pub calibration_samples: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            alpha: calibrate::DEFAULT_ALPHA,
            epsilon: calibrate::DEFAULT_EPSILON,
            metric: MetricKind::NegEntropy,
            calibration_samples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub subset: Vec<usize>,
    pub per_task: Vec<f64>,
    pub mean: f64,
    pub plan: Option<CalibrationPlan>,
}

/// A merged and calibrated model for a subset of tasks.
pub fn build_model(
    setup: &BenchmarkSetup,
    subset: &[usize],
    merge_cfg: &MergeConfig,
    calibration: Calibration,
    opts: &RunOptions,
) -> Result<(CalibratedModel, Option<CalibrationPlan>)> {
    if subset.is_empty() || subset.iter().any(|&k| k >= setup.tasks.len()) {
        return Err(Error::InvalidArgument(format!("invalid task subset {subset:?}")));
    }
    let tvs: Vec<TaskVector> = subset.iter().map(|&k| setup.tasks[k].task_vector.clone()).collect();
    let n_cal = opts.calibration_samples.unwrap_or(setup.spec.calibration_samples);
    let batches = match calibration {
        Calibration::None | Calibration::Wsc => vec![],
        Calibration::DscA => subset.iter().map(|&k| setup.agnostic[k].clone()).collect(),
        Calibration::Fsc | Calibration::Dsc => subset
            .iter()
            .map(|&k| setup.tasks[k].calibration_batch(n_cal))
            .collect::<Result<Vec<_>>>()?,
    };
    merge_and_calibrate(
        &setup.pretrained,
        &setup.manifest,
        &tvs,
        merge_cfg,
        calibration,
        opts,
        &batches,
        &setup.probe,
    )
}

/// Merges `tvs` and applies one calibration scheme.
///
/// `task_batches` holds one batch per task vector and is only read by the
/// feature-space schemes; for DSC-A it should contain task-agnostic inputs.
/// `probe` is the general batch used to select sensitive layers.
#[allow(clippy::too_many_arguments)]
pub fn merge_and_calibrate(
    pre: &ModelWeights,
    m: &ModelManifest,
    tvs: &[TaskVector],
    merge_cfg: &MergeConfig,
    calibration: Calibration,
    opts: &RunOptions,
    task_batches: &[LabeledBatch],
    probe: &LabeledBatch,
) -> Result<(CalibratedModel, Option<CalibrationPlan>)> {
    let merged_tv = merge_cfg.merge(tvs)?;
    let lambda = merge_cfg.effective_lambda();
    if calibration == Calibration::None {
        return Ok((CalibratedModel::plain(merge::recompose(pre, m, &merged_tv, lambda)?), None));
    }
    let needs_batches = matches!(calibration, Calibration::Fsc | Calibration::Dsc | Calibration::DscA);
    if needs_batches && task_batches.len() != tvs.len() {
        return Err(Error::InvalidArgument(format!(
            "{calibration} needs one calibration batch per task: {} task vectors, {} batches",
            tvs.len(),
            task_batches.len()
        )));
    }
    let sensitive = || {
        calibrate::sensitive_set_from_average(pre, m, tvs, probe, opts.alpha, opts.epsilon, opts.metric)
            .map(|(a, _)| a)
    };

    match calibration {
        Calibration::None => unreachable!("handled above"),
        Calibration::Wsc => {
            let a = sensitive()?;
            let (tv, plan) = calibrate::apply_wsc(&merged_tv.scaled(lambda), tvs, &a)?;
            Ok((CalibratedModel::plain(merge::recompose(pre, m, &tv, 1.0)?), Some(plan)))
        }
        Calibration::Fsc => {
            let a: SensitiveSet = sensitive()?;
            let merged = merge::recompose(pre, m, &merged_tv, lambda)?;
            let pairs: Vec<_> = tvs.iter().cloned().zip(task_batches.iter().cloned()).collect();
            let plan = calibrate::fsc_coefficients(&pairs, &merged, pre, m, &a)?;
            let model = CalibratedModel {
                weights: merged,
                xi_feature: plan.xi_feature().map(<[f64]>::to_vec),
            };
            Ok((model, Some(plan)))
        }
        Calibration::Dsc | Calibration::DscA => {
            let dsc_cfg = DscConfig {
                alpha: opts.alpha,
                epsilon: opts.epsilon,
                lambda,
                metric: opts.metric,
            };
            let (weights, plan) = calibrate::apply_dsc(pre, m, &merged_tv, tvs, task_batches, probe, &dsc_cfg)?;
            let model = CalibratedModel {
                weights,
                xi_feature: plan.xi_feature().map(<[f64]>::to_vec),
            };
            Ok((model, Some(plan)))
        }
    }
}

/// Merges the subset's specialists, calibrates, and scores each task in the
/// subset on its own test split.
pub fn run_subset(
    setup: &BenchmarkSetup,
    subset: &[usize],
    merge_cfg: &MergeConfig,
    calibration: Calibration,
    opts: &RunOptions,
) -> Result<RunResult> {
    let (model, plan) = build_model(setup, subset, merge_cfg, calibration, opts)?;
    let per_task = subset
        .iter()
        .map(|&k| model.accuracy(&setup.pretrained, &setup.manifest, &setup.tasks[k].test))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(RunResult {
        subset: subset.to_vec(),
        per_task,
        mean,
        plan,
    })
}

pub fn run_benchmark(
    setup: &BenchmarkSetup,
    merge_cfg: &MergeConfig,
    calibration: Calibration,
    opts: &RunOptions,
) -> Result<RunResult> {
    let all: Vec<usize> = (0..setup.tasks.len()).collect();
    run_subset(setup, &all, merge_cfg, calibration, opts)
}

/// Accuracy of each specialist and of the pretrained model on every task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub specialist: Vec<f64>,
    pub pretrained: Vec<f64>,
}

pub fn baselines(setup: &BenchmarkSetup) -> Result<BaselineReport> {
    let acc = |w: &ModelWeights, b: &LabeledBatch| network::performance_metric(w, &setup.manifest, b, MetricKind::Accuracy);
    Ok(BaselineReport {
        specialist: setup
            .tasks
            .iter()
            .map(|t| acc(&t.specialist, &t.test))
            .collect::<Result<_>>()?,
        pretrained: setup
            .tasks
            .iter()
            .map(|t| acc(&setup.pretrained, &t.test))
            .collect::<Result<_>>()?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepLambda {
    /// The merge config's λ for every subset size.
    Fixed,
    /// λ = 1/|subset|, comparable to weight averaging.
    InverseSize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub subset: Vec<usize>,
    pub method: String,
    pub calibration: Calibration,
    pub lambda: f32,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t_statistic: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub t_statistic: f64,
    pub p_value: f64,
}

impl SweepResult {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(vec![]);
        let err = |e: csv::Error| Error::Report(e.to_string());
        w.write_record(["subset", "method", "calibration", "lambda", "before", "after"])
            .map_err(err)?;
        for r in &self.rows {
            let subset = r.subset.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" ");
            w.write_record([
                subset,
                r.method.clone(),
                r.calibration.to_string(),
                r.lambda.to_string(),
                r.before.to_string(),
                r.after.to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is UTF-8"))
    }
}

/// Student's paired two-sided t-test on `after − before`.
///
/// Fewer than two pairs, or all differences zero, give `t = 0, p = 1`;
/// constant non-zero differences give `t = ±∞, p = 0`.
pub fn paired_t_test(before: &[f64], after: &[f64]) -> Result<TTest> {
    if before.len() != after.len() {
        return Err(Error::InvalidArgument(format!(
            "paired samples differ in length: {} vs {}",
            before.len(),
            after.len()
        )));
    }
    let n = before.len();
    let diffs: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
    let mean = if n == 0 { 0.0 } else { diffs.iter().sum::<f64>() / n as f64 };
    let neutral = TTest {
        n,
        mean_diff: mean,
        t_statistic: 0.0,
        p_value: 1.0,
    };
    if n < 2 {
        return Ok(neutral);
    }
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    if se == 0.0 {
        if mean == 0.0 {
            return Ok(neutral);
        }
        return Ok(TTest {
            t_statistic: mean.signum() * f64::INFINITY,
            p_value: 0.0,
            ..neutral
        });
    }
    let t = mean / se;
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest {
        t_statistic: t,
        p_value: p,
        ..neutral
    })
}

/// Every non-empty subset of tasks, ordered by bitmask.
pub fn subsets(k: usize) -> Vec<Vec<usize>> {
    (1u32..(1 << k))
        .map(|mask| (0..k).filter(|&i| mask & (1 << i) != 0).collect())
        .collect()
}

/// Merges every non-empty subset of specialists and compares mean accuracy
/// before and after calibration with a paired t-test.
pub fn combo_sweep(
    setup: &BenchmarkSetup,
    merge_cfg: &MergeConfig,
    calibration: Calibration,
    opts: &RunOptions,
    lambda_mode: SweepLambda,
) -> Result<SweepResult> {
    let k = setup.tasks.len();
    if k > 8 {
        return Err(Error::InvalidArgument(format!("combo sweep supports at most 8 tasks, got {k}")));
    }
    let rows = subsets(k)
        .into_par_iter()
        .map(|subset| {
            let mut cfg = merge_cfg.clone();
            if lambda_mode == SweepLambda::InverseSize {
                cfg.lambda = 1.0 / subset.len() as f32;
            }
            let before = run_subset(setup, &subset, &cfg, Calibration::None, opts)?.mean;
            let after = if calibration == Calibration::None {
                before
            } else {
                run_subset(setup, &subset, &cfg, calibration, opts)?.mean
            };
            Ok(SweepRow {
                subset,
                method: cfg.method.to_string(),
                calibration,
                lambda: cfg.effective_lambda(),
                before,
                after,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let before: Vec<f64> = rows.iter().map(|r| r.before).collect();
    let after: Vec<f64> = rows.iter().map(|r| r.after).collect();
    let t = paired_t_test(&before, &after)?;
    Ok(SweepResult {
        rows,
        t_statistic: t.t_statistic,
        p_value: t.p_value,
    })
}
