//! Run and synthetic-task configuration files.
//!
//! A run config may name a variant profile under `inherit`; the profile's
//! model spec, training defaults and search space form the base document and
//! the file's own keys are merged over it object by object.

use std::path::{Path, PathBuf};

use hybridseq::corpus::{Format, SyntheticConfig};
use hybridseq::embeddings::PseudoContextConfig;
use hybridseq::featurizer::FeaturizerConfigFile;
use hybridseq::model::{ModelSpec, PROFILE_NAMES};
use hybridseq::training::{profile_defaults, ProtocolConfig, SearchSpace, TrainingConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingPaths {
    #[serde(rename = "static", default, skip_serializing_if = "Option::is_none")]
    pub static_table: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contextual: Option<PathBuf>,
    /// Fine-tune a pretrained static table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inherit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub data: DataPaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub featurizer: Option<PathBuf>,
    #[serde(default)]
    pub embeddings: EmbeddingPaths,
    pub model: ModelSpec,
    pub training: TrainingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchSpace>,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// Profile defaults as a JSON document.
pub fn profile_document(name: &str) -> Option<Value> {
    let spec = ModelSpec::profile(name)?;
    let (training, search) = profile_defaults(name)?;
    Some(serde_json::json!({
        "model": spec,
        "training": training,
        "search": search,
    }))
}

/// Merge `over` into `base`; objects merge key by key, anything else replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn require_file(key: &str, p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::config(format!(
            "config key `{key}`: file not found: {}",
            p.display()
        )))
    }
}

impl RunConfig {
    /// Parse, apply inheritance, and resolve paths against the file's directory.
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let user: Value = serde_json::from_str(text)
            .map_err(|e| CliError::config(format!("invalid JSON: {e}")))?;
        let doc = match user.get("inherit") {
            None | Some(Value::Null) => user,
            Some(Value::String(name)) => {
                let mut doc = profile_document(name).ok_or_else(|| {
                    CliError::config(format!(
                        "config key `inherit`: unknown profile `{name}` (expected one of {})",
                        PROFILE_NAMES.join(", ")
                    ))
                })?;
                merge(&mut doc, user);
                doc
            }
            Some(_) => {
                return Err(CliError::config(
                    "config key `inherit` must be a profile name",
                ))
            }
        };
        let mut cfg: RunConfig = serde_json::from_value(doc)
            .map_err(|e| CliError::config(format!("invalid run config: {e}")))?;
        resolve(base, &mut cfg.data.train);
        for p in [
            cfg.data.test.as_mut(),
            cfg.featurizer.as_mut(),
            cfg.embeddings.static_table.as_mut(),
            cfg.embeddings.contextual.as_mut(),
            cfg.output.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
        let base = std::fs::canonicalize(parent.unwrap_or(Path::new(".")))
            .map_err(|e| CliError::config(format!("cannot resolve {}: {e}", path.display())))?;
        RunConfig::parse(&text, &base)
    }

    /// Let a command-line seed override the file; the result drives
    /// training, fold construction and search sampling.
    pub fn apply_seed(&mut self, seed: Option<u64>) -> u64 {
        let s = seed.or(self.seed).unwrap_or(self.training.seed);
        self.seed = Some(s);
        self.training.seed = s;
        self.protocol.seed = s;
        s
    }

    /// Check values and that every referenced file exists.
    pub fn validate(&self) -> CliResult<Option<FeaturizerConfigFile>> {
        self.model
            .validate()
            .map_err(|e| CliError::config(format!("config key `model`: {e}")))?;
        self.training
            .validate()
            .map_err(|e| CliError::config(format!("config key `training`: {e}")))?;
        if let Some(s) = &self.search {
            s.validate()
                .map_err(|e| CliError::config(format!("config key `search`: {e}")))?;
        }
        require_file("data.train", &self.data.train)?;
        if let Some(p) = &self.data.test {
            require_file("data.test", p)?;
        }
        if let Some(p) = &self.embeddings.static_table {
            require_file("embeddings.static", p)?;
        }
        if let Some(p) = &self.embeddings.contextual {
            require_file("embeddings.contextual", p)?;
        }
        use hybridseq::embeddings::EmbeddingKind as K;
        match self.model.embedding {
            K::PretrainedStatic if self.embeddings.static_table.is_none() => {
                return Err(CliError::config(
                    "config key `embeddings.static` is required for pretrained_static embeddings",
                ))
            }
            K::PrecomputedContextual if self.embeddings.contextual.is_none() => {
                return Err(CliError::config(
                    "config key `embeddings.contextual` is required for precomputed_contextual embeddings",
                ))
            }
            _ => {}
        }
        if !self.model.use_hb {
            return Ok(None);
        }
        let path = self.featurizer.as_ref().ok_or_else(|| {
            CliError::config("config key `featurizer` is required when model.use_hb is set")
        })?;
        require_file("featurizer", path)?;
        let file = FeaturizerConfigFile::read(path)
            .map_err(|e| CliError::config(format!("config key `featurizer`: {e}")))?
            .resolved(path.parent().unwrap_or(Path::new(".")));
        for (i, p) in file.cue_lexicons.iter().enumerate() {
            require_file(&format!("featurizer.cue_lexicons[{i}]"), p)?;
        }
        for (i, p) in file.span_lexicons.iter().enumerate() {
            require_file(&format!("featurizer.span_lexicons[{i}]"), p)?;
        }
        Ok(Some(file))
    }
}

fn four() -> usize {
    4
}

fn yes() -> bool {
    true
}

/// Featurizer settings emitted alongside a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizerSettings {
    #[serde(default = "four")]
    pub word_window: usize,
    #[serde(default = "four")]
    pub pos_window: usize,
    #[serde(default = "yes")]
    pub orthography: bool,
}

impl Default for FeaturizerSettings {
    fn default() -> Self {
        FeaturizerSettings {
            word_window: 4,
            pos_window: 4,
            orthography: true,
        }
    }
}

/// Input of the `synth` command: a generator config plus the artifacts to
/// emit next to the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTask {
    pub corpus: SyntheticConfig,
    #[serde(default)]
    pub featurizer: FeaturizerSettings,
    /// Stand-in contextual vectors for the generated corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contextual: Option<PseudoContextConfig>,
    #[serde(default)]
    pub seed: u64,
}

impl SynthTask {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read task {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::config(format!("invalid synthetic task {}: {e}", path.display()))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_is_recursive() {
        let mut a = json!({"a": {"x": 1, "y": 2}, "b": 3});
        merge(&mut a, json!({"a": {"y": 5, "z": 6}, "c": [1]}));
        assert_eq!(a, json!({"a": {"x": 1, "y": 5, "z": 6}, "b": 3, "c": [1]}));
    }

    #[test]
    fn inheritance_fills_profile_defaults() {
        let text =
            r#"{"inherit": "HB-CRF", "data": {"train": "d.jsonl"}, "training": {"epochs": 7}}"#;
        let cfg = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert!(cfg.model.use_hb && !cfg.model.use_lstm);
        assert_eq!(cfg.training.step_size, 1e-2);
        assert_eq!(cfg.training.epochs, 7);
        assert_eq!(cfg.search.unwrap().range_c1.len(), 5);
        assert_eq!(cfg.data.train, PathBuf::from("/base/d.jsonl"));
    }

    #[test]
    fn every_profile_parses() {
        for name in PROFILE_NAMES {
            let text = format!(r#"{{"inherit": "{name}", "data": {{"train": "x"}}}}"#);
            let cfg = RunConfig::parse(&text, Path::new(".")).unwrap();
            cfg.model.validate().unwrap();
        }
    }

    #[test]
    fn bad_configs() {
        let e = RunConfig::parse(
            r#"{"inherit": "nope", "data": {"train": "x"}}"#,
            Path::new("."),
        )
        .unwrap_err();
        assert!(e.message.contains("inherit"));
        assert!(RunConfig::parse(r#"{"data": {"train": "x"}}"#, Path::new(".")).is_err());
        let e = RunConfig::parse(
            r#"{"inherit": "HB-CRF", "data": {"train": "x"}, "trainig": {}}"#,
            Path::new("."),
        )
        .unwrap_err();
        assert!(e.message.contains("trainig"), "{}", e.message);
    }

    #[test]
    fn seed_precedence() {
        let mut cfg = RunConfig::parse(
            r#"{"inherit": "HB-CRF", "seed": 4, "data": {"train": "x"}}"#,
            Path::new("."),
        )
        .unwrap();
        assert_eq!(cfg.clone().apply_seed(None), 4);
        assert_eq!(cfg.apply_seed(Some(9)), 9);
        assert_eq!((cfg.training.seed, cfg.protocol.seed), (9, 9));
    }
}
