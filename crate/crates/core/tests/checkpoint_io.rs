mod common;

use magic_core::checkpoint::{self, ModelManifest};
use magic_core::network;
use magic_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bits(w: &magic_core::checkpoint::ModelWeights) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    w.tensors
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn thousand_random_checkpoints_round_trip_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let w = common::random_weights(&mut rng);
        let bytes = checkpoint::to_bytes(&w);
        assert_eq!(bytes, checkpoint::to_bytes(&w), "serialisation must be deterministic");
        let back = checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(bits(&back), bits(&w));
        assert_eq!(back.metadata, w.metadata);
    }
}

#[test]
fn files_on_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..20 {
        let w = common::random_weights(&mut rng);
        let path = dir.path().join(format!("m{i}.safetensors"));
        checkpoint::save_safetensors(&w, &path).unwrap();
        let back = checkpoint::load_safetensors(&path).unwrap();
        assert_eq!(bits(&back), bits(&w));
        assert_eq!(back.source_path.as_deref(), Some(path.as_path()));
    }
    let missing = checkpoint::load_safetensors(dir.path().join("absent.safetensors"));
    assert!(matches!(missing, Err(Error::Io { .. })));
}

#[test]
fn malformed_fixtures_are_rejected() {
    for (name, bytes, check) in common::malformed_fixtures() {
        match checkpoint::from_bytes(&bytes) {
            Ok(_) => panic!("{name}: accepted"),
            Err(e) => assert!(check(&e), "{name}: wrong error {e}"),
        }
    }
}

#[test]
fn manifest_file_round_trip_and_binding() {
    let dir = tempfile::tempdir().unwrap();
    let (w, m) = network::init_mlp(4, &[8], 3, checkpoint::Activation::Relu, 1).unwrap();
    let path = dir.path().join("manifest.json");
    checkpoint::save_manifest(&m, &path).unwrap();
    assert_eq!(checkpoint::load_manifest(&path, Some(&w)).unwrap(), m);

    let other = ModelManifest::from_json(
        r#"{"input_dim": 4, "num_classes": 3, "layers": [
            {"weight": "layers.0.weight", "bias": "layers.0.bias", "activation": "relu"},
            {"weight": "missing", "activation": "none"}]}"#,
    )
    .unwrap();
    std::fs::write(&path, other.to_json()).unwrap();
    assert!(matches!(
        checkpoint::load_manifest(&path, Some(&w)),
        Err(Error::MissingTensor(name)) if name == "missing"
    ));
}
