//! Fixtures shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeMap;

use magic_core::checkpoint::{Fingerprint, ModelWeights};
use magic_core::merge::TaskVector;
use magic_core::tensor::Tensor;
use magic_core::Error;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

pub fn gaussian_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), gaussian(rng, n, std)).unwrap()
}

/// A checkpoint with 1..6 tensors of rank 1..3, arbitrary finite values and
/// sometimes metadata.
pub fn random_weights(rng: &mut ChaCha8Rng) -> ModelWeights {
    let mut w = ModelWeights::new();
    for i in 0..rng.random_range(1..=6) {
        let rank = rng.random_range(1..=3);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=7)).collect();
        let n: usize = shape.iter().product();
        // Raw bit patterns cover subnormals, signed zeros and extreme exponents.
        let data = (0..n)
            .map(|_| loop {
                let v = f32::from_bits(rng.random());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        w.insert(format!("t{i}.{}", rng.random_range(0..1000)), Tensor::new(shape, data).unwrap());
    }
    if rng.random_bool(0.5) {
        w.metadata.insert("format".into(), "pt".into());
        w.metadata.insert("step".into(), rng.random_range(0..100u32).to_string());
    }
    w
}

/// Task vector with the given per-layer lengths, for tests that only need
/// layer arithmetic.
pub fn task_vector(layers: Vec<Vec<f32>>) -> TaskVector {
    TaskVector {
        per_layer: layers
            .into_iter()
            .enumerate()
            .map(|(l, d)| (l, Tensor::from_vec(d)))
            .collect::<BTreeMap<_, _>>(),
        base_fingerprint: Fingerprint([0; 32]),
    }
}

fn file(header: &str, data: &[u8]) -> Vec<u8> {
    let mut out = (header.len() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(data);
    out
}

pub type ErrorCheck = fn(&Error) -> bool;

fn malformed(e: &Error) -> bool {
    matches!(e, Error::MalformedHeader(_))
}

fn overlap(e: &Error) -> bool {
    matches!(e, Error::OffsetOverlap(_))
}

fn dtype(e: &Error) -> bool {
    matches!(e, Error::UnsupportedDtype { .. })
}

/// Broken checkpoint files, each with the error it must produce.
pub fn malformed_fixtures() -> Vec<(&'static str, Vec<u8>, ErrorCheck)> {
    let eight = [0u8; 8];
    let sixteen = [0u8; 16];
    let w = |offsets: &str| format!(r#"{{"w":{{"dtype":"F32","shape":[2],"data_offsets":{offsets}}}}}"#);
    let mut huge_len = u64::MAX.to_le_bytes().to_vec();
    huge_len.extend_from_slice(b"{}");
    let mut bad_utf8 = 4u64.to_le_bytes().to_vec();
    bad_utf8.extend_from_slice(&[0xff, 0xfe, 0x7b, 0x7d]);
    vec![
        ("truncated length prefix", vec![1, 2, 3], malformed as ErrorCheck),
        ("header longer than file", file("{}", &[])[..9].to_vec(), malformed),
        ("header length overflows", huge_len, malformed),
        ("header not UTF-8", bad_utf8, malformed),
        ("header not JSON", file("{not json", &[]), malformed),
        ("header is an array", file("[1,2]", &[]), malformed),
        ("entry missing dtype", file(r#"{"w":{"shape":[2],"data_offsets":[0,8]}}"#, &eight), malformed),
        ("entry is a string", file(r#"{"w":"F32"}"#, &eight), malformed),
        ("scalar shape", file(r#"{"w":{"dtype":"F32","shape":[],"data_offsets":[0,4]}}"#, &eight), malformed),
        ("byte count disagrees with shape", file(&w("[0,4]"), &eight), malformed),
        ("metadata not strings", file(r#"{"__metadata__":{"a":1}}"#, &[]), malformed),
        ("offsets past end of buffer", file(&w("[0,8]"), &[0; 4]), overlap),
        ("reversed offsets", file(&w("[8,0]"), &sixteen), overlap),
        (
            "overlapping regions",
            file(
                r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#,
                &sixteen,
            ),
            overlap,
        ),
        ("half precision", file(r#"{"w":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#, &eight), dtype),
        ("double precision", file(r#"{"w":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}}"#, &eight), dtype),
    ]
}
