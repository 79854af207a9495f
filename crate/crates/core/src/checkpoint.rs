//! Checkpoint I/O and network structure manifests.
//!
//! File layout (safetensors-compatible, little-endian throughout):
//!
//! ```text
//! [0..8)        u64 header length N
//! [8..8+N)      UTF-8 JSON: { name: {"dtype":"F32","shape":[..],"data_offsets":[b,e]}, ..,
//!                             "__metadata__": { key: value } }
//! [8+N..)       raw tensor bytes; offsets are relative to 8+N
//! ```
//!
//! Only `F32` is accepted. The writer sorts tensors by name, packs them
//! contiguously and pads the header with spaces to an 8-byte boundary, so
//! saving the same weights always produces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const METADATA_KEY: &str = "__metadata__";
const HEADER_ALIGN: usize = 8;

/// One checkpoint: named tensors in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelWeights {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
    pub source_path: Option<PathBuf>,
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Same tensors, names and shapes; ignores metadata and source path.
    pub fn same_tensors(&self, other: &ModelWeights) -> bool {
        self.tensors == other.tensors
    }

    /// SHA-256 over names, shapes and raw data, used to tie task vectors to
    /// the pretrained weights they were taken against.
    pub fn fingerprint(&self) -> Fingerprint {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        Fingerprint(h.finalize().into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub [u8; 32]);

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.0[..8] {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// Serialises `w` to bytes in the checkpoint layout.
pub fn to_bytes(w: &ModelWeights) -> Vec<u8> {
    let mut header = Map::new();
    let mut offset = 0usize;
    for (name, t) in &w.tensors {
        let end = offset + 4 * t.numel();
        header.insert(
            name.clone(),
            json!({ "dtype": "F32", "shape": t.shape(), "data_offsets": [offset, end] }),
        );
        offset = end;
    }
    if !w.metadata.is_empty() {
        header.insert(METADATA_KEY.to_string(), json!(w.metadata));
    }
    let mut header = serde_json::to_vec(&Value::Object(header)).expect("header is valid JSON");
    while !header.len().is_multiple_of(HEADER_ALIGN) {
        header.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in w.tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[derive(Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Parses a checkpoint from bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelWeights> {
    if bytes.len() < 8 {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let header_end = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_add(8))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            Error::MalformedHeader(format!(
                "header length {n} exceeds file size {}",
                bytes.len()
            ))
        })?;
    let text = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let header: Map<String, Value> = serde_json::from_str(text)
        .map_err(|e| Error::MalformedHeader(format!("header is not a JSON object: {e}")))?;
    let buffer = &bytes[header_end..];

    let mut weights = ModelWeights::new();
    let mut regions: Vec<(usize, usize, String)> = Vec::new();
    for (name, value) in header {
        if name == METADATA_KEY {
            weights.metadata = serde_json::from_value(value).map_err(|e| {
                Error::MalformedHeader(format!("__metadata__ must map strings to strings: {e}"))
            })?;
            continue;
        }
        let entry: TensorEntry = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(format!("entry {name:?}: {e}")))?;
        if entry.dtype != "F32" {
            return Err(Error::UnsupportedDtype {
                name,
                dtype: entry.dtype,
            });
        }
        let [begin, end] = entry.data_offsets;
        if begin > end || end > buffer.len() {
            return Err(Error::OffsetOverlap(format!(
                "{name:?} spans [{begin}, {end}) but the data buffer is {} bytes",
                buffer.len()
            )));
        }
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::MalformedHeader(format!("{name:?}: shape overflows")))?;
        if entry.shape.is_empty() || entry.shape.contains(&0) {
            return Err(Error::MalformedHeader(format!(
                "{name:?}: shape {:?} has no elements",
                entry.shape
            )));
        }
        if end - begin != 4 * numel {
            return Err(Error::MalformedHeader(format!(
                "{name:?}: {} bytes for shape {:?}",
                end - begin,
                entry.shape
            )));
        }
        let data = buffer[begin..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        regions.push((begin, end, name.clone()));
        weights.insert(name, Tensor::new(entry.shape, data)?);
    }

    regions.sort();
    for pair in regions.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::OffsetOverlap(format!(
                "{:?} and {:?} share bytes",
                pair[0].2, pair[1].2
            )));
        }
    }
    Ok(weights)
}

pub fn load_safetensors(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut w = from_bytes(&bytes)?;
    w.source_path = Some(path.to_path_buf());
    Ok(w)
}

pub fn save_safetensors(w: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(w)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
    None,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            "none" | "identity" | "linear" => Ok(Activation::None),
            other => Err(Error::UnknownActivation(other.to_string())),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
            Activation::None => "none",
        })
    }
}

/// One dense layer: `act(x·Wᵀ + b)` with `W: [out, in]`, `b: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub index: usize,
    pub weight_name: String,
    pub bias_name: Option<String>,
    pub activation: Activation,
    /// Declared dimensions; optional in the file, filled from weights on bind.
    pub in_dim: Option<usize>,
    pub out_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelManifest {
    pub layers: Vec<LayerSpec>,
    pub input_dim: usize,
    pub num_classes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    weight: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<String>,
    activation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_dim: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    input_dim: usize,
    num_classes: usize,
    layers: Vec<LayerFile>,
}

impl ModelManifest {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Parses the JSON manifest text and checks any declared dimensions.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ManifestFile = serde_json::from_str(text)
            .map_err(|e| Error::InvalidManifest(e.to_string()))?;
        let layers = file
            .layers
            .into_iter()
            .enumerate()
            .map(|(index, l)| {
                Ok(LayerSpec {
                    index,
                    weight_name: l.weight,
                    bias_name: l.bias,
                    activation: l.activation.parse()?,
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = ModelManifest {
            layers,
            input_dim: file.input_dim,
            num_classes: file.num_classes,
        };
        m.check_declared_dims()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let file = ManifestFile {
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    weight: l.weight_name.clone(),
                    bias: l.bias_name.clone(),
                    activation: l.activation.to_string(),
                    in_dim: l.in_dim,
                    out_dim: l.out_dim,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("manifest serialises")
    }

    /// Checks composition using whatever dimensions are declared.
    fn check_declared_dims(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::DimensionMismatch(
                "manifest needs at least one layer".into(),
            ));
        }
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::DimensionMismatch(
                "input_dim and num_classes must be positive".into(),
            ));
        }
        let mut incoming = Some(self.input_dim);
        for l in &self.layers {
            if let (Some(prev), Some(i)) = (incoming, l.in_dim) {
                if prev != i {
                    return Err(Error::DimensionMismatch(format!(
                        "layer {} expects {i} inputs but receives {prev}",
                        l.index
                    )));
                }
            }
            incoming = l.out_dim;
        }
        if let Some(out) = incoming {
            if out != self.num_classes {
                return Err(Error::DimensionMismatch(format!(
                    "last layer emits {out} outputs but num_classes is {}",
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Checks the manifest against concrete weights and fills in layer
    /// dimensions from the weight shapes.
    pub fn bind(&mut self, w: &ModelWeights) -> Result<()> {
        let mut incoming = self.input_dim;
        let last = self.layers.len() - 1;
        for (pos, l) in self.layers.iter_mut().enumerate() {
            let wt = w.get(&l.weight_name)?;
            if wt.rank() != 2 {
                return Err(Error::DimensionMismatch(format!(
                    "weight {:?} must be rank-2, has shape {:?}",
                    l.weight_name,
                    wt.shape()
                )));
            }
            let (out, inp) = (wt.shape()[0], wt.shape()[1]);
            if inp != incoming {
                return Err(Error::DimensionMismatch(format!(
                    "layer {} weight {:?} takes {inp} inputs but receives {incoming}",
                    l.index,
                    wt.shape()
                )));
            }
            if let Some(b) = &l.bias_name {
                let bt = w.get(b)?;
                if bt.shape() != [out] {
                    return Err(Error::DimensionMismatch(format!(
                        "bias {b:?} has shape {:?}, expected [{out}]",
                        bt.shape()
                    )));
                }
            }
            if l.in_dim.is_some_and(|d| d != inp) || l.out_dim.is_some_and(|d| d != out) {
                return Err(Error::DimensionMismatch(format!(
                    "layer {} declares {:?}->{:?} but weight is {:?}",
                    l.index,
                    l.in_dim,
                    l.out_dim,
                    wt.shape()
                )));
            }
            l.in_dim = Some(inp);
            l.out_dim = Some(out);
            if pos == last && out != self.num_classes {
                return Err(Error::DimensionMismatch(format!(
                    "last layer emits {out} outputs but num_classes is {}",
                    self.num_classes
                )));
            }
            incoming = out;
        }
        Ok(())
    }

    /// Layer output dimension; requires declared or bound dimensions.
    pub fn out_dim(&self, layer: usize) -> Option<usize> {
        self.layers.get(layer).and_then(|l| l.out_dim)
    }
}

/// Reads a manifest and, when `reference` is given, binds it to those weights.
pub fn load_manifest(
    path: impl AsRef<Path>,
    reference: Option<&ModelWeights>,
) -> Result<ModelManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = ModelManifest::from_json(&text)?;
    if let Some(w) = reference {
        m.bind(w)?;
    }
    Ok(m)
}

pub fn save_manifest(m: &ModelManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, m.to_json()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_tensor() -> ModelWeights {
        let mut w = ModelWeights::new();
        w.insert("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        w
    }

    /// Builds a file by hand, independent of the writer.
    fn raw_file(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    fn f32_bytes(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn parses_hand_built_file() {
        let bytes = raw_file(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}}"#,
            &f32_bytes(&[1.0, 2.0, 3.0, 4.0]),
        );
        let w = from_bytes(&bytes).unwrap();
        assert_eq!(w, one_tensor());
    }

    #[test]
    fn empty_weights_round_trip() {
        let bytes = to_bytes(&ModelWeights::new());
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + header_len);
        assert!(from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn data_section_is_four_bytes_per_element() {
        let bytes = to_bytes(&one_tensor());
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(header_len % HEADER_ALIGN, 0);
        assert_eq!(bytes.len() - 8 - header_len, 16);
    }

    #[test]
    fn metadata_survives() {
        let mut w = one_tensor();
        w.metadata.insert("format".into(), "pt".into());
        assert_eq!(from_bytes(&to_bytes(&w)).unwrap(), w);
    }

    #[test]
    fn rejects_offsets_past_buffer() {
        let bytes = raw_file(
            r#"{"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,32]}}"#,
            &f32_bytes(&[1.0, 2.0, 3.0, 4.0]),
        );
        assert!(matches!(from_bytes(&bytes), Err(Error::OffsetOverlap(_))));
    }

    #[test]
    fn rejects_overlapping_regions() {
        let bytes = raw_file(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#,
            &f32_bytes(&[1.0, 2.0, 3.0]),
        );
        assert!(matches!(from_bytes(&bytes), Err(Error::OffsetOverlap(_))));
    }

    #[test]
    fn rejects_other_dtypes() {
        let bytes = raw_file(
            r#"{"w":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#,
            &[0, 0, 0, 0],
        );
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::UnsupportedDtype { .. })
        ));
    }

    #[test]
    fn rejects_malformed_headers() {
        // shorter than the length prefix
        assert!(matches!(from_bytes(&[1, 2, 3]), Err(Error::MalformedHeader(_))));
        // header length beyond file
        let mut bytes = raw_file("{}", &[]);
        bytes[0] = 200;
        assert!(matches!(from_bytes(&bytes), Err(Error::MalformedHeader(_))));
        // not JSON
        let bytes = raw_file("{not json", &[]);
        assert!(matches!(from_bytes(&bytes), Err(Error::MalformedHeader(_))));
        // size disagrees with shape
        let bytes = raw_file(
            r#"{"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#,
            &f32_bytes(&[1.0, 2.0]),
        );
        assert!(matches!(from_bytes(&bytes), Err(Error::MalformedHeader(_))));
    }

    const MLP: &str = r#"{
        "input_dim": 4, "num_classes": 3,
        "layers": [
            {"weight": "l0.w", "bias": "l0.b", "activation": "relu"},
            {"weight": "l1.w", "bias": "l1.b", "activation": "none"}
        ]
    }"#;

    fn mlp_weights() -> ModelWeights {
        let mut w = ModelWeights::new();
        w.insert("l0.w", Tensor::zeros(&[8, 4]).unwrap());
        w.insert("l0.b", Tensor::zeros(&[8]).unwrap());
        w.insert("l1.w", Tensor::zeros(&[3, 8]).unwrap());
        w.insert("l1.b", Tensor::zeros(&[3]).unwrap());
        w
    }

    #[test]
    fn manifest_binds_to_matching_weights() {
        let mut m = ModelManifest::from_json(MLP).unwrap();
        assert_eq!(m.num_layers(), 2);
        assert_eq!(m.layers[0].activation, Activation::Relu);
        m.bind(&mlp_weights()).unwrap();
        assert_eq!(m.out_dim(0), Some(8));
        assert_eq!(ModelManifest::from_json(&m.to_json()).unwrap(), m);
    }

    #[test]
    fn manifest_bind_reports_missing_tensor() {
        let mut m = ModelManifest::from_json(MLP).unwrap();
        let mut w = mlp_weights();
        w.tensors.remove("l1.b");
        assert!(matches!(m.bind(&w), Err(Error::MissingTensor(n)) if n == "l1.b"));
    }

    #[test]
    fn manifest_rejects_non_composing_dims() {
        let declared = r#"{"input_dim": 4, "num_classes": 3, "layers": [
            {"weight": "a", "activation": "relu", "in_dim": 4, "out_dim": 8},
            {"weight": "b", "activation": "none", "in_dim": 7, "out_dim": 3}]}"#;
        assert!(matches!(
            ModelManifest::from_json(declared),
            Err(Error::DimensionMismatch(_))
        ));

        let mut m = ModelManifest::from_json(MLP).unwrap();
        let mut w = mlp_weights();
        w.insert("l1.w", Tensor::zeros(&[3, 7]).unwrap());
        assert!(matches!(m.bind(&w), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn manifest_rejects_unknown_activation() {
        let text = MLP.replace("\"relu\"", "\"swish\"");
        assert!(matches!(
            ModelManifest::from_json(&text),
            Err(Error::UnknownActivation(a)) if a == "swish"
        ));
    }
}
