//! Pipeline configuration for the `magic` command-line tool.
//!
//! A config file is a JSON object. Only the three model paths are required;
//! every other key has a default. Relative paths resolve against the config
//! file's directory.

use std::path::{Path, PathBuf};

use magic_core::bench::Calibration;
use magic_core::calibrate::{DEFAULT_ALPHA, DEFAULT_EPSILON, DEFAULT_LAMBDA};
use magic_core::merge::{MergeConfig, MergeMethod};
use magic_core::network::MetricKind;
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not a JSON object: {0}")]
    Parse(String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key:?} = {value} is out of range: expected {expected}")]
    OutOfRange { key: String, value: String, expected: String },
    #[error("config key {0:?} is required")]
    MissingRequired(String),
}

const KEYS: &[&str] = &[
    "pretrained",
    "specialists",
    "manifest",
    "method",
    "lambda",
    "ties_keep_fraction",
    "dare_drop_prob",
    "seed",
    "calibration",
    "alpha",
    "epsilon",
    "metric",
    "probe",
    "calibration_samples",
    "output_dir",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub pretrained: PathBuf,
    pub specialists: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub merge: MergeConfig,
    pub calibration: Calibration,
    pub alpha: usize,
    pub epsilon: f64,
    pub metric: MetricKind,
    pub probe: Option<PathBuf>,
    /// One unlabelled batch per specialist, in the same order.
    pub calibration_samples: Vec<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

fn out_of_range(key: &str, value: &Value, expected: &str) -> ConfigError {
    ConfigError::OutOfRange {
        key: key.to_string(),
        value: value.to_string(),
        expected: expected.to_string(),
    }
}

struct Reader<'a> {
    obj: &'a Map<String, Value>,
    base: &'a Path,
}

impl Reader<'_> {
    fn path(&self, key: &str) -> Result<Option<PathBuf>, ConfigError> {
        match self.obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) if !s.is_empty() => Ok(Some(self.base.join(s))),
            Some(v) => Err(out_of_range(key, v, "a non-empty path string")),
        }
    }

    fn paths(&self, key: &str) -> Result<Vec<PathBuf>, ConfigError> {
        match self.obj.get(key) {
            None | Some(Value::Null) => Ok(vec![]),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) if !s.is_empty() => Ok(self.base.join(s)),
                    _ => Err(out_of_range(key, v, "a list of path strings")),
                })
                .collect(),
            Some(v) => Err(out_of_range(key, v, "a list of path strings")),
        }
    }

    fn number(&self, key: &str, default: f64, ok: impl Fn(f64) -> bool, expected: &str) -> Result<f64, ConfigError> {
        match self.obj.get(key) {
            None => Ok(default),
            Some(v) => match v.as_f64() {
                Some(x) if x.is_finite() && ok(x) => Ok(x),
                _ => Err(out_of_range(key, v, expected)),
            },
        }
    }

    fn count(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.obj.get(key) {
            None => Ok(default),
            Some(v) => v.as_u64().ok_or_else(|| out_of_range(key, v, "a non-negative integer")),
        }
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T, expected: &str) -> Result<T, ConfigError> {
        match self.obj.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_str()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| out_of_range(key, v, expected)),
        }
    }
}

impl PipelineConfig {
    /// Parses a config from JSON text; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(ConfigError::Parse("top level must be an object".into()));
        };
        if let Some(key) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
        let r = Reader { obj: &obj, base };
        let required = |key: &str| ConfigError::MissingRequired(key.to_string());

        let pretrained = r.path("pretrained")?.ok_or_else(|| required("pretrained"))?;
        let manifest = r.path("manifest")?.ok_or_else(|| required("manifest"))?;
        let specialists = r.paths("specialists")?;
        if specialists.is_empty() {
            return Err(required("specialists"));
        }

        let defaults = MergeConfig::default();
        let merge = MergeConfig {
            method: r.parsed("method", defaults.method, "average | task_arithmetic | ties | dare")?,
            lambda: r.number("lambda", DEFAULT_LAMBDA as f64, |x| x > 0.0, "> 0")? as f32,
            ties_keep_fraction: r.number(
                "ties_keep_fraction",
                defaults.ties_keep_fraction,
                |x| x > 0.0 && x <= 1.0,
                "in (0, 1]",
            )?,
            dare_drop_prob: r.number("dare_drop_prob", defaults.dare_drop_prob, |x| (0.0..1.0).contains(&x), "in [0, 1)")?,
            seed: r.count("seed", defaults.seed)?,
        };
        let alpha = r.count("alpha", DEFAULT_ALPHA as u64)? as usize;
        Ok(PipelineConfig {
            pretrained,
            specialists,
            manifest,
            merge,
            calibration: r.parsed("calibration", Calibration::Dsc, "none | wsc | fsc | dsc | dsc_a")?,
            alpha,
            epsilon: r.number("epsilon", DEFAULT_EPSILON, |x| x > 0.0, "> 0")?,
            metric: r.parsed("metric", MetricKind::NegEntropy, "accuracy | neg_xent | neg_entropy")?,
            probe: r.path("probe")?,
            calibration_samples: r.paths("calibration_samples")?,
            output_dir: r.path("output_dir")?,
        })
    }

    /// Checks that every referenced input file exists.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        let named = [("pretrained", Some(&self.pretrained)), ("manifest", Some(&self.manifest)), ("probe", self.probe.as_ref())];
        let lists = [("specialists", &self.specialists), ("calibration_samples", &self.calibration_samples)];
        let missing = |key: &str, p: &Path| ConfigError::OutOfRange {
            key: key.to_string(),
            value: p.display().to_string(),
            expected: "an existing file".to_string(),
        };
        for (key, p) in named {
            if let Some(p) = p.filter(|p| !p.is_file()) {
                return Err(missing(key, p));
            }
        }
        for (key, ps) in lists {
            if let Some(p) = ps.iter().find(|p| !p.is_file()) {
                return Err(missing(key, p));
            }
        }
        Ok(())
    }

    pub fn method(&self) -> MergeMethod {
        self.merge.method
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<PipelineConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    PipelineConfig::from_json(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<PipelineConfig, ConfigError> {
        PipelineConfig::from_json(text, Path::new("/cfg"))
    }

    const MINIMAL: &str = r#"{"pretrained": "pre.safetensors", "specialists": ["a.safetensors"], "manifest": "m.json"}"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.merge.lambda, 0.3);
        assert_eq!(c.alpha, 10);
        assert_eq!(c.epsilon, 1.1);
        assert_eq!(c.calibration, Calibration::Dsc);
        assert_eq!(c.merge.method, MergeMethod::TaskArithmetic);
        assert_eq!(c.pretrained, PathBuf::from("/cfg/pre.safetensors"));
    }

    #[test]
    fn rejects_bad_values() {
        let with = |extra: &str| parse(&MINIMAL.replace('}', &format!(", {extra}}}")));
        assert!(matches!(with(r#""alpha": -1"#), Err(ConfigError::OutOfRange { key, .. }) if key == "alpha"));
        assert!(matches!(with(r#""lamda": 0.5"#), Err(ConfigError::UnknownKey(k)) if k == "lamda"));
        assert!(matches!(with(r#""epsilon": 0"#), Err(ConfigError::OutOfRange { .. })));
        assert!(matches!(with(r#""calibration": "magic""#), Err(ConfigError::OutOfRange { .. })));
        assert!(matches!(with(r#""dare_drop_prob": 1.0"#), Err(ConfigError::OutOfRange { .. })));
        assert!(with(r#""calibration": "dsc-a", "method": "ties""#).is_ok());
    }

    #[test]
    fn missing_required_keys() {
        assert!(matches!(parse(r#"{"manifest": "m.json", "specialists": ["a"]}"#),
            Err(ConfigError::MissingRequired(k)) if k == "pretrained"));
        assert!(matches!(parse(r#"{"pretrained": "p", "manifest": "m.json", "specialists": []}"#),
            Err(ConfigError::MissingRequired(k)) if k == "specialists"));
        assert!(matches!(parse("[1]"), Err(ConfigError::Parse(_))));
    }
}
