//! Task vectors and the merge operators that combine them.
//!
//! Every operator returns an unscaled merged [`TaskVector`]; the global
//! coefficient λ is applied once, in [`recompose`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Fingerprint, ModelManifest, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Per-layer weight deltas against a fixed pretrained model.
///
/// Each layer's entry is the flattened weight delta followed by the
/// flattened bias delta.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub per_layer: BTreeMap<usize, Tensor>,
    pub base_fingerprint: Fingerprint,
}

impl TaskVector {
    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn layer(&self, l: usize) -> &Tensor {
        &self.per_layer[&l]
    }

    pub fn layer_norms(&self, p: u32) -> Vec<f64> {
        self.per_layer.values().map(|t| tensor::lp_norm(t, p)).collect()
    }

    /// Norm of the whole vector, all layers concatenated.
    pub fn norm(&self, p: u32) -> f64 {
        let s: f64 = self
            .per_layer
            .values()
            .map(|t| tensor::lp_norm(t, p).powi(p as i32))
            .sum();
        s.powf(1.0 / p as f64)
    }

    pub fn scaled(&self, alpha: f32) -> TaskVector {
        self.map_layers(|_, t| t.scale(alpha))
    }

    /// Copy with layer `l` multiplied by `factor`, other layers untouched.
    pub fn with_layer_scaled(&self, l: usize, factor: f32) -> TaskVector {
        let mut out = self.clone();
        if let Some(t) = out.per_layer.get_mut(&l) {
            *t = t.scale(factor);
        }
        out
    }

    pub fn with_layer_replaced(&self, l: usize, t: Tensor) -> Result<TaskVector> {
        let cur = self.per_layer.get(&l).ok_or_else(|| {
            Error::InvalidArgument(format!("task vector has no layer {l}"))
        })?;
        if cur.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "with_layer_replaced",
                left: cur.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        let mut out = self.clone();
        out.per_layer.insert(l, t);
        Ok(out)
    }

    /// Multiplies each layer by its own coefficient, rounding once per element.
    pub fn scaled_per_layer(&self, coefs: &[f64]) -> TaskVector {
        self.map_layers(|l, t| {
            let c = coefs[l];
            t.map(|v| (v as f64 * c) as f32)
        })
    }

    pub fn map_layers(&self, f: impl Fn(usize, &Tensor) -> Tensor) -> TaskVector {
        TaskVector {
            per_layer: self.per_layer.iter().map(|(&l, t)| (l, f(l, t))).collect(),
            base_fingerprint: self.base_fingerprint,
        }
    }

    pub fn zeros_like(&self) -> TaskVector {
        self.map_layers(|_, t| t.scale(0.0))
    }
}

/// Flattened weight (then bias) of layer `spec`.
fn layer_params(w: &ModelWeights, m: &ModelManifest, l: usize) -> Result<Vec<f32>> {
    let spec = &m.layers[l];
    let mut flat = w.get(&spec.weight_name)?.data().to_vec();
    if let Some(b) = &spec.bias_name {
        flat.extend_from_slice(w.get(b)?.data());
    }
    Ok(flat)
}

/// `tuned − pre`, layer by layer.
pub fn task_vector(pre: &ModelWeights, tuned: &ModelWeights, m: &ModelManifest) -> Result<TaskVector> {
    let mut per_layer = BTreeMap::new();
    for (l, spec) in m.layers.iter().enumerate() {
        let names = std::iter::once(&spec.weight_name).chain(spec.bias_name.as_ref());
        for name in names {
            let (a, b) = (pre.get(name)?, tuned.get(name)?);
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "task_vector",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
        }
        let base = layer_params(pre, m, l)?;
        let ft = layer_params(tuned, m, l)?;
        let delta = ft.iter().zip(&base).map(|(t, p)| t - p).collect();
        per_layer.insert(l, Tensor::from_vec(delta));
    }
    Ok(TaskVector {
        per_layer,
        base_fingerprint: pre.fingerprint(),
    })
}

/// `pre + λ·tv`; tensors the manifest does not mention are copied from `pre`.
pub fn recompose(pre: &ModelWeights, m: &ModelManifest, tv: &TaskVector, lambda: f32) -> Result<ModelWeights> {
    if pre.fingerprint() != tv.base_fingerprint {
        return Err(Error::BaseMismatch);
    }
    let mut out = pre.clone();
    out.source_path = None;
    for (l, spec) in m.layers.iter().enumerate() {
        let delta = tv.per_layer.get(&l).ok_or_else(|| {
            Error::InvalidArgument(format!("task vector has no layer {l}"))
        })?;
        let mut offset = 0;
        let names = std::iter::once(&spec.weight_name).chain(spec.bias_name.as_ref());
        for name in names {
            let t = out.tensors.get_mut(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            let n = t.numel();
            let part = delta.data().get(offset..offset + n).ok_or_else(|| Error::ShapeMismatch {
                op: "recompose",
                left: vec![delta.numel()],
                right: vec![offset + n],
            })?;
            for (p, &d) in t.data_mut().iter_mut().zip(part) {
                *p += lambda * d;
            }
            offset += n;
        }
        if offset != delta.numel() {
            return Err(Error::ShapeMismatch {
                op: "recompose",
                left: vec![delta.numel()],
                right: vec![offset],
            });
        }
    }
    Ok(out)
}

/// Checks that all task vectors share a base and a layer layout.
fn check_compatible(tvs: &[TaskVector]) -> Result<&TaskVector> {
    let first = tvs.first().ok_or(Error::EmptyInput)?;
    for tv in &tvs[1..] {
        if tv.base_fingerprint != first.base_fingerprint {
            return Err(Error::BaseMismatch);
        }
        if tv.per_layer.len() != first.per_layer.len() {
            return Err(Error::InvalidArgument("task vectors have different layer counts".into()));
        }
        for ((la, a), (lb, b)) in first.per_layer.iter().zip(&tv.per_layer) {
            if la != lb || a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "merge",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
        }
    }
    Ok(first)
}

/// Combines the K tensors of each layer coordinate-wise.
fn combine(tvs: &[TaskVector], f: impl Fn(usize, &[&Tensor]) -> Tensor) -> Result<TaskVector> {
    let first = check_compatible(tvs)?;
    let per_layer = first
        .per_layer
        .keys()
        .map(|&l| {
            let layer: Vec<&Tensor> = tvs.iter().map(|tv| tv.layer(l)).collect();
            (l, f(l, &layer))
        })
        .collect();
    Ok(TaskVector {
        per_layer,
        base_fingerprint: first.base_fingerprint,
    })
}

fn coordinate_sum(layer: &[&Tensor], scale: f64) -> Tensor {
    let n = layer[0].numel();
    let data = (0..n)
        .map(|i| {
            let s: f64 = layer.iter().map(|t| t.data()[i] as f64).sum();
            (s * scale) as f32
        })
        .collect();
    Tensor::from_vec(data)
}

pub fn merge_average(tvs: &[TaskVector]) -> Result<TaskVector> {
    let k = tvs.len() as f64;
    combine(tvs, |_, layer| {
        let n = layer[0].numel();
        Tensor::from_vec(
            (0..n)
                .map(|i| (layer.iter().map(|t| t.data()[i] as f64).sum::<f64>() / k) as f32)
                .collect(),
        )
    })
}

/// Σ Δθ_k; λ is applied at recompose.
pub fn merge_task_arithmetic(tvs: &[TaskVector]) -> Result<TaskVector> {
    combine(tvs, |_, layer| coordinate_sum(layer, 1.0))
}

/// Number of entries TIES keeps out of `n`.
pub fn ties_keep_count(n: usize, keep_fraction: f64) -> usize {
    // The small slack stops products like 0.2·10 landing one count high.
    (((keep_fraction * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

/// Zeroes all but the `⌈keep_fraction·n⌉` largest-magnitude entries; equal
/// magnitudes keep the lower index.
pub fn ties_trim(t: &Tensor, keep_fraction: f64) -> Tensor {
    let k = ties_keep_count(t.numel(), keep_fraction);
    let d = t.data();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[b].abs().total_cmp(&d[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0f32; d.len()];
    for &i in &order[..k] {
        out[i] = d[i];
    }
    Tensor::from_vec(out)
}

/// Per-coordinate sign (+1, −1 or 0) of the sum across tasks.
pub fn ties_elect(layer: &[&Tensor]) -> Vec<f32> {
    let n = layer[0].numel();
    (0..n)
        .map(|i| {
            let s: f64 = layer.iter().map(|t| t.data()[i] as f64).sum();
            if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Mean over tasks whose value carries the elected sign; 0 where none do.
pub fn disjoint_mean(layer: &[&Tensor], signs: &[f32]) -> Tensor {
    let data = signs
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let (sum, count) = layer
                .iter()
                .map(|t| t.data()[i])
                .filter(|&v| s != 0.0 && v != 0.0 && v.signum() == s)
                .fold((0.0f64, 0usize), |(acc, c), v| (acc + v as f64, c + 1));
            if count == 0 {
                0.0
            } else {
                (sum / count as f64) as f32
            }
        })
        .collect();
    Tensor::from_vec(data)
}

pub fn trim_task_vector(tv: &TaskVector, keep_fraction: f64) -> TaskVector {
    tv.map_layers(|_, t| ties_trim(t, keep_fraction))
}

/// Sign election plus disjoint mean, without trimming.
pub fn merge_disjoint(tvs: &[TaskVector]) -> Result<TaskVector> {
    combine(tvs, |_, layer| disjoint_mean(layer, &ties_elect(layer)))
}

fn check_fraction(keep_fraction: f64) -> Result<()> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep_fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    Ok(())
}

/// TIES: trim, elect sign, disjoint mean.
pub fn merge_ties(tvs: &[TaskVector], keep_fraction: f64) -> Result<TaskVector> {
    check_fraction(keep_fraction)?;
    check_compatible(tvs)?;
    let trimmed: Vec<TaskVector> = tvs.iter().map(|tv| trim_task_vector(tv, keep_fraction)).collect();
    merge_disjoint(&trimmed)
}

/// Random stream for (seed, task, layer); independent of evaluation order.
fn dare_rng(seed: u64, task: usize, layer: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((task as u64) << 32) | layer as u64);
    rng
}

/// DARE: drop each coordinate with probability `drop_prob`, rescale
/// survivors by `1/(1−drop_prob)`, then sum across tasks.
pub fn merge_dare(tvs: &[TaskVector], drop_prob: f64, seed: u64) -> Result<TaskVector> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::InvalidArgument(format!(
            "drop_prob must be in [0, 1), got {drop_prob}"
        )));
    }
    let rescale = 1.0 / (1.0 - drop_prob);
    combine(tvs, |l, layer| {
        let n = layer[0].numel();
        let mut acc = vec![0.0f64; n];
        for (k, t) in layer.iter().enumerate() {
            let mut rng = dare_rng(seed, k, l);
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                let u: f64 = rng.random();
                if u >= drop_prob {
                    *a += v as f64 * rescale;
                }
            }
        }
        Tensor::from_vec(acc.into_iter().map(|v| v as f32).collect())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
    Ties,
    Dare,
}

impl std::str::FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(MergeMethod::Average),
            "task_arithmetic" | "ta" => Ok(MergeMethod::TaskArithmetic),
            "ties" => Ok(MergeMethod::Ties),
            "dare" => Ok(MergeMethod::Dare),
            other => Err(Error::InvalidArgument(format!("unknown merge method {other:?}"))),
        }
    }
}

impl std::fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MergeMethod::Average => "average",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::Dare => "dare",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub method: MergeMethod,
    pub lambda: f32,
    pub ties_keep_fraction: f64,
    pub dare_drop_prob: f64,
    pub seed: u64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            method: MergeMethod::TaskArithmetic,
            lambda: 0.3,
            ties_keep_fraction: 0.2,
            dare_drop_prob: 0.5,
            seed: 0,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be > 0, got {}", self.lambda)));
        }
        check_fraction(self.ties_keep_fraction)?;
        if !(0.0..1.0).contains(&self.dare_drop_prob) {
            return Err(Error::InvalidArgument(format!(
                "dare_drop_prob must be in [0, 1), got {}",
                self.dare_drop_prob
            )));
        }
        Ok(())
    }

    /// Scale applied when recomposing the merged vector. Weight averaging
    /// is already a convex combination and ignores `lambda`.
    pub fn effective_lambda(&self) -> f32 {
        match self.method {
            MergeMethod::Average => 1.0,
            _ => self.lambda,
        }
    }

    /// Runs the configured operator; the result is still unscaled by λ.
    pub fn merge(&self, tvs: &[TaskVector]) -> Result<TaskVector> {
        self.validate()?;
        match self.method {
            MergeMethod::Average => merge_average(tvs),
            MergeMethod::TaskArithmetic => merge_task_arithmetic(tvs),
            MergeMethod::Ties => merge_ties(tvs, self.ties_keep_fraction),
            MergeMethod::Dare => merge_dare(tvs, self.dare_drop_prob, self.seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{Activation, LayerSpec};
    use proptest::prelude::*;

    fn fp() -> Fingerprint {
        Fingerprint([7; 32])
    }

    fn tv(layers: &[&[f32]]) -> TaskVector {
        TaskVector {
            per_layer: layers
                .iter()
                .enumerate()
                .map(|(l, d)| (l, Tensor::from_vec(d.to_vec())))
                .collect(),
            base_fingerprint: fp(),
        }
    }

    /// One weight-only layer of shape [1, n].
    fn tiny(values: &[f32]) -> (ModelWeights, ModelManifest) {
        let mut w = ModelWeights::new();
        w.insert("w", Tensor::matrix(1, values.len(), values.to_vec()).unwrap());
        let m = ModelManifest {
            layers: vec![LayerSpec {
                index: 0,
                weight_name: "w".into(),
                bias_name: None,
                activation: Activation::None,
                in_dim: Some(values.len()),
                out_dim: Some(1),
            }],
            input_dim: values.len(),
            num_classes: 1,
        };
        (w, m)
    }

    #[test]
    fn task_vector_examples() {
        let (pre, m) = tiny(&[1.0, 2.0]);
        let (tuned, _) = tiny(&[2.0, 4.0]);
        let d = task_vector(&pre, &tuned, &m).unwrap();
        assert_eq!(d.layer(0).data(), &[1.0, 2.0]);
        assert_eq!(recompose(&pre, &m, &d, 1.0).unwrap().tensors, tuned.tensors);
        let zero = task_vector(&pre, &pre, &m).unwrap();
        assert!(zero.layer(0).data().iter().all(|&v| v == 0.0));
        assert_eq!(recompose(&pre, &m, &zero, 0.3).unwrap().tensors, pre.tensors);
    }

    #[test]
    fn task_vector_concatenates_weight_and_bias() {
        let (mut pre, mut m) = tiny(&[1.0, 2.0]);
        pre.insert("b", Tensor::from_vec(vec![0.5]));
        m.layers[0].bias_name = Some("b".into());
        let mut tuned = pre.clone();
        tuned.insert("b", Tensor::from_vec(vec![1.5]));
        tuned.insert("w", Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap());
        let d = task_vector(&pre, &tuned, &m).unwrap();
        assert_eq!(d.layer(0).data(), &[0.0, 1.0, 1.0]);
        assert_eq!(recompose(&pre, &m, &d, 1.0).unwrap().tensors, tuned.tensors);
    }

    #[test]
    fn recompose_rejects_foreign_base() {
        let (pre, m) = tiny(&[1.0, 2.0]);
        let (other, _) = tiny(&[1.0, 2.5]);
        let d = task_vector(&pre, &pre, &m).unwrap();
        assert!(matches!(recompose(&other, &m, &d, 1.0), Err(Error::BaseMismatch)));
    }

    #[test]
    fn task_vector_rejects_shape_mismatch() {
        let (pre, m) = tiny(&[1.0, 2.0]);
        let mut tuned = pre.clone();
        tuned.insert("w", Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        assert!(matches!(task_vector(&pre, &tuned, &m), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn lambda_recompose_matches_eq_sum() {
        let (pre, m) = tiny(&[0.5, -1.0, 2.0]);
        let tvs = [tv(&[&[1.0, 2.0, -1.0]]), tv(&[&[0.5, -0.5, 0.25]]), tv(&[&[-2.0, 1.0, 1.0]])];
        let tvs: Vec<_> = tvs
            .into_iter()
            .map(|mut t| {
                t.base_fingerprint = pre.fingerprint();
                t
            })
            .collect();
        let merged = recompose(&pre, &m, &merge_task_arithmetic(&tvs).unwrap(), 0.3).unwrap();
        let got = merged.get("w").unwrap().data();
        for i in 0..3 {
            let sum: f32 = tvs.iter().map(|t| t.layer(0).data()[i]).sum();
            let want = pre.get("w").unwrap().data()[i] + 0.3 * sum;
            assert!((got[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn average_examples() {
        let a = tv(&[&[0.0, 2.0]]);
        let b = tv(&[&[2.0, 0.0]]);
        assert_eq!(merge_average(&[a.clone(), b]).unwrap().layer(0).data(), &[1.0, 1.0]);
        assert_eq!(merge_average(&[a.clone(), a.clone()]).unwrap(), a);
        let e1 = tv(&[&[1.0, 0.0]]);
        let e2 = tv(&[&[0.0, 1.0]]);
        let n = merge_average(&[e1, e2]).unwrap().norm(2);
        assert!((n - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert!(matches!(merge_average(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn merge_rejects_mixed_bases() {
        let a = tv(&[&[1.0]]);
        let mut b = tv(&[&[1.0]]);
        b.base_fingerprint = Fingerprint([9; 32]);
        assert!(matches!(merge_average(&[a.clone(), b.clone()]), Err(Error::BaseMismatch)));
        assert!(matches!(merge_task_arithmetic(&[a, b]), Err(Error::BaseMismatch)));
    }

    #[test]
    fn task_arithmetic_examples() {
        let a = tv(&[&[1.0, -2.0], &[0.5]]);
        assert_eq!(merge_task_arithmetic(&[a.clone()]).unwrap(), a);
        let neg = a.scaled(-1.0);
        let z = merge_task_arithmetic(&[a, neg]).unwrap();
        assert!(z.per_layer.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn ties_trim_keeps_single_largest() {
        let t = Tensor::from_vec(vec![0.5, -3.0, 1.0, 0.2, -0.1]);
        assert_eq!(ties_trim(&t, 0.2).data(), &[0.0, -3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_trim_breaks_ties_by_index() {
        let t = Tensor::from_vec(vec![1.0, -1.0, 1.0, 0.5]);
        assert_eq!(ties_trim(&t, 0.5).data(), &[1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn ties_keep_counts() {
        assert_eq!(ties_keep_count(5, 0.2), 1);
        assert_eq!(ties_keep_count(10, 0.2), 2);
        assert_eq!(ties_keep_count(11, 0.2), 3);
        assert_eq!(ties_keep_count(7, 1.0), 7);
        assert_eq!(ties_keep_count(3, 0.01), 1);
    }

    #[test]
    fn ties_hand_enumerated_case() {
        // trim with keep 1 is the identity; elect: 2-1=+1 -> +, -1-2=-3 -> -;
        // disjoint: coord 0 keeps {2} -> 2, coord 1 keeps {-1,-2} -> -1.5
        let a = tv(&[&[2.0, -1.0]]);
        let b = tv(&[&[-1.0, -2.0]]);
        let layer = [a.layer(0), b.layer(0)];
        assert_eq!(ties_elect(&layer), vec![1.0, -1.0]);
        assert_eq!(merge_ties(&[a, b], 1.0).unwrap().layer(0).data(), &[2.0, -1.5]);
    }

    #[test]
    fn ties_single_input_unchanged() {
        let a = tv(&[&[2.0, -1.0, 0.3], &[4.0]]);
        assert_eq!(merge_ties(&[a.clone()], 1.0).unwrap(), a);
        assert!(merge_ties(&[a.clone()], 0.0).is_err());
        assert!(merge_ties(&[a], 1.5).is_err());
    }

    #[test]
    fn dare_without_drop_is_task_arithmetic() {
        let a = tv(&[&[1.0, -2.0, 0.3], &[0.7]]);
        let b = tv(&[&[0.1, 0.2, -0.3], &[-1.7]]);
        let tvs = [a, b];
        assert_eq!(merge_dare(&tvs, 0.0, 3).unwrap(), merge_task_arithmetic(&tvs).unwrap());
        assert_eq!(merge_dare(&tvs, 0.7, 3).unwrap(), merge_dare(&tvs, 0.7, 3).unwrap());
        assert_ne!(merge_dare(&tvs, 0.7, 3).unwrap(), merge_dare(&tvs, 0.7, 4).unwrap());
        assert!(merge_dare(&tvs, 1.0, 0).is_err());
    }

    #[test]
    fn merge_config_dispatch() {
        let a = tv(&[&[1.0, -2.0]]);
        let b = tv(&[&[3.0, -1.0]]);
        let tvs = [a, b];
        let cfg = MergeConfig { method: MergeMethod::Average, ..Default::default() };
        assert_eq!(cfg.merge(&tvs).unwrap(), merge_average(&tvs).unwrap());
        let bad = MergeConfig { lambda: 0.0, ..Default::default() };
        assert!(bad.merge(&tvs).is_err());
    }

    fn same_sign_set() -> impl Strategy<Value = Vec<Vec<f32>>> {
        (1usize..6, 1usize..20).prop_flat_map(|(k, n)| {
            prop::collection::vec(prop::collection::vec(0.01f32..5.0, n), k)
        })
    }

    proptest! {
        #[test]
        fn ties_full_keep_same_sign_equals_average(set in same_sign_set(), neg in any::<bool>()) {
            let s = if neg { -1.0 } else { 1.0 };
            let tvs: Vec<TaskVector> = set
                .iter()
                .map(|v| tv(&[&v.iter().map(|x| s * x).collect::<Vec<_>>()]))
                .collect();
            prop_assert_eq!(merge_ties(&tvs, 1.0).unwrap(), merge_average(&tvs).unwrap());
        }

        #[test]
        fn operators_preserve_layout(set in same_sign_set()) {
            let tvs: Vec<TaskVector> = set.iter().map(|v| tv(&[v, &v[..1]])).collect();
            for out in [
                merge_average(&tvs).unwrap(),
                merge_task_arithmetic(&tvs).unwrap(),
                merge_ties(&tvs, 0.2).unwrap(),
                merge_dare(&tvs, 0.5, 1).unwrap(),
            ] {
                prop_assert_eq!(out.base_fingerprint, fp());
                for (l, t) in &out.per_layer {
                    prop_assert_eq!(t.shape(), tvs[0].layer(*l).shape());
                }
            }
        }
    }
}
