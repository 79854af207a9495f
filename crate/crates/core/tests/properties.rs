mod common;

use magic_core::calibrate::{self, SensitiveSet, SensitivityReport};
use magic_core::merge;
use magic_core::network::MetricKind;
use magic_core::tensor::Tensor;
use proptest::prelude::*;

fn report(s: Vec<f64>) -> SensitivityReport {
    SensitivityReport {
        per_layer_s: s,
        epsilon: 1.1,
        metric_kind: MetricKind::NegEntropy,
        probe_batch_id: "probe".into(),
    }
}

fn layer(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-3.0f32..3.0, len)
}

proptest! {
    #[test]
    fn gate_output_obeys_the_xor_contract(xi in 0.01f64..10.0, in_a: bool) {
        let g = calibrate::gate(xi, in_a);
        prop_assert!(g == 1.0 || ((g > 1.0) ^ in_a));
        prop_assert!(g == xi || g == 1.0);
    }

    #[test]
    fn selection_takes_the_alpha_least_sensitive(
        s in prop::collection::vec(-1.0f64..1.0, 1..24),
        alpha in 0usize..30,
    ) {
        let a = calibrate::select_sensitive_layers(&report(s.clone()), alpha);
        prop_assert_eq!(a.layers.len(), alpha.min(s.len()));
        for &l in &a.layers {
            for k in (0..s.len()).filter(|k| !a.layers.contains(k)) {
                prop_assert!(s[l] <= s[k]);
            }
        }
    }

    #[test]
    fn wsc_lands_on_the_hyperellipsoid(
        (tasks, lambda) in (1usize..6, 4usize..40).prop_flat_map(|(k, n)| {
            (prop::collection::vec(layer(n), k), 0.05f32..1.5)
        })
    ) {
        let tensors: Vec<Tensor> = tasks.iter().map(|d| Tensor::from_vec(d.clone())).collect();
        prop_assume!(tensors.iter().all(|t| t.l2_norm() > 1e-2));
        let tvs: Vec<_> = tasks.iter().map(|d| common::task_vector(vec![d.clone()])).collect();
        let merged = merge::merge_task_arithmetic(&tvs).unwrap().scaled(lambda);
        prop_assume!(merged.layer(0).l2_norm() > 1e-2);
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let xi = calibrate::wsc_coefficient(merged.layer(0), &refs).unwrap();
        let v = merged.layer(0).scale(xi as f32);
        let s = calibrate::hyperellipsoid_value(&v, &refs).unwrap();
        prop_assert!((s - 1.0).abs() < 1e-4, "S = {s}");

        let (_, plan) = calibrate::apply_wsc(&merged, &tvs, &SensitiveSet::empty()).unwrap();
        prop_assert!(plan.satisfies_gating());
    }

    #[test]
    fn closed_form_is_a_minimum(
        (dh, eps) in (2usize..30).prop_flat_map(|n| (layer(n), layer(n))),
        eta in 0.1f64..3.0,
        probe in -0.5f64..0.5,
    ) {
        let (dh, eps) = (Tensor::from_vec(dh), Tensor::from_vec(eps));
        let xi = calibrate::optimal_scale_closed_form(&dh, eta, &eps).unwrap();
        let loss = |x: f64| -> f64 {
            dh.data().iter().zip(eps.data()).map(|(&d, &e)| {
                let r = x * (eta * d as f64 + e as f64) - d as f64;
                r * r
            }).sum()
        };
        prop_assert!(loss(xi) <= loss(xi + probe) + 1e-9 * (1.0 + loss(xi)));
    }
}
