//! Run configuration: one JSON document with dotted-path overrides.

use std::path::{Path, PathBuf};

use conceptvae::conceptgen::{ConceptTable, DEFAULT_P, DEFAULT_PER_CONCEPT};
use conceptvae::model::ArchitectureConfig;
use conceptvae::training::{LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Subsampling, splits and concept generation.
    pub data: u64,
    pub init: u64,
    /// Minibatch order and reparameterization noise.
    pub noise: u64,
    pub cluster: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            data: seed,
            init: seed,
            noise: seed,
            cluster: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSettings {
    pub n_per_concept: usize,
    pub p_training_source: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub baseline_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSettings {
    pub digit_clusters: usize,
    pub concept_clusters: usize,
    pub grid_columns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FetchSettings {
    pub base_url: String,
    /// File name to expected byte length.
    pub files: Vec<(String, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stages {
    pub fetch: bool,
    pub baseline: bool,
    pub representatives: bool,
    pub augment: bool,
    pub train_with: bool,
    pub train_without: bool,
    pub analyze: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    /// `None` selects the built-in table.
    pub concept_table: Option<PathBuf>,
    pub seeds: Seeds,
    pub train_fraction: f64,
    /// Fraction of the original images kept; also scales `n_per_concept`.
    pub subset_fraction: f64,
    pub concepts: ConceptSettings,
    pub model: ArchitectureConfig,
    pub loss: LossConfig,
    pub train: TrainSettings,
    pub analysis: AnalysisSettings,
    pub fetch: FetchSettings,
    pub stages: Stages,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            data_dir: PathBuf::from("data/mnist"),
            run_dir: PathBuf::from("runs/default"),
            concept_table: None,
            seeds: Seeds::all(0),
            train_fraction: 0.7,
            subset_fraction: 1.0,
            concepts: ConceptSettings {
                n_per_concept: DEFAULT_PER_CONCEPT,
                p_training_source: DEFAULT_P,
            },
            model: ArchitectureConfig::default(),
            loss: LossConfig::default(),
            train: TrainSettings {
                epochs: t.epochs,
                baseline_epochs: t.epochs,
                batch_size: t.batch_size,
                learning_rate: t.learning_rate,
                checkpoint_every: t.checkpoint_every,
            },
            analysis: AnalysisSettings {
                digit_clusters: 10,
                concept_clusters: 18,
                grid_columns: 5,
            },
            fetch: FetchSettings {
                base_url: "https://storage.googleapis.com/cvdf-datasets/mnist".into(),
                files: vec![
                    ("train-images-idx3-ubyte".into(), 47_040_016),
                    ("train-labels-idx1-ubyte".into(), 60_008),
                    ("t10k-images-idx3-ubyte".into(), 7_840_016),
                    ("t10k-labels-idx1-ubyte".into(), 10_008),
                ],
            },
            stages: Stages {
                fetch: false,
                baseline: true,
                representatives: true,
                augment: true,
                train_with: true,
                train_without: true,
                analyze: true,
            },
        }
    }
}

/// Parses an override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a JSON document. Every path segment must already
/// exist; array elements are addressed by index.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let mut node = doc;
    for key in path.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(key),
            Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| CliError::Config(format!("unknown config key `{path}`")))?;
    }
    *node = parse_value(raw);
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file at `path` (a partial document is merged
    /// key-by-key), then each override in order.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let file: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut doc, file);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} not in (0, 1)", self.train_fraction));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return bad(format!("subset_fraction {} not in (0, 1]", self.subset_fraction));
        }
        if !(0.0..=1.0).contains(&self.concepts.p_training_source) {
            return bad("concepts.p_training_source not in [0, 1]".into());
        }
        if self.train.epochs == 0 || self.train.baseline_epochs == 0 || self.train.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.train.learning_rate > 0.0) {
            return bad("train.learning_rate must be positive".into());
        }
        if self.analysis.grid_columns == 0 || self.analysis.digit_clusters != 10 {
            return bad("analysis needs grid_columns >= 1 and digit_clusters = 10".into());
        }
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.loss.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(p) = &self.concept_table {
            if !p.is_file() {
                return bad(format!("concept table {} does not exist", p.display()));
            }
        }
        self.concept_table()?;
        Ok(())
    }

    pub fn concept_table(&self) -> Result<ConceptTable, CliError> {
        match &self.concept_table {
            Some(p) => ConceptTable::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display()))),
            None => Ok(ConceptTable::default_table()),
        }
    }

    /// Concept samples generated per concept after subsetting.
    pub fn per_concept(&self) -> usize {
        (self.concepts.n_per_concept as f64 * self.subset_fraction).round() as usize
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.seeds.noise,
            checkpoint_every: self.train.checkpoint_every,
        }
    }

    /// SHA-256 of the canonical JSON form without the location fields
    /// (`data_dir`, `run_dir`) and stage toggles, which do not affect
    /// results. A custom concept table contributes its content.
    pub fn hash(&self) -> String {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        let map = doc.as_object_mut().expect("object");
        map.remove("data_dir");
        map.remove("run_dir");
        map.remove("stages");
        if let Ok(table) = self.concept_table() {
            map.insert("concept_table".into(), serde_json::to_value(table).expect("table serializes"));
        }
        let canonical = serde_json::to_string(&sort_keys(doc)).expect("serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let sorted: std::collections::BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, sort_keys(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.per_concept(), 3000);
        assert_eq!(cfg.train.epochs, 50);
    }

    #[test]
    fn dotted_overrides() {
        let cfg = RunConfig::resolve(None, &["train.epochs=3".into(), "seeds.cluster=9".into(), "loss.recon_mode=mse".into(), "run_dir=/tmp/x".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.seeds.cluster, 9);
        assert_eq!(cfg.loss.recon_mode, conceptvae::training::ReconMode::Mse);
        assert_eq!(cfg.run_dir, PathBuf::from("/tmp/x"));
        let cfg = RunConfig::resolve(None, &["model.encoder.0.out_channels=16".into(), "model.encoder.1.in_channels=16".into()]).unwrap();
        assert_eq!(cfg.model.encoder[0].out_channels, 16);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        for o in ["train.epoch=3", "train.epochs", "train.epochs=zero", "train_fraction=1.5", "model.encoder.0.out_channels=16"] {
            assert!(matches!(RunConfig::resolve(None, &[o.into()]), Err(CliError::Config(_))), "{o}");
        }
    }

    #[test]
    fn hash_ignores_locations_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.run_dir = "elsewhere".into();
        b.data_dir = "also-elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seeds.noise = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn partial_file_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"epochs": 2}, "subset_fraction": 0.1}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["train.epochs=4".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 4);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.per_concept(), 300);
        std::fs::write(&path, r#"{"trian": {}}"#).unwrap();
        assert!(RunConfig::resolve(Some(&path), &[]).is_err());
    }
}
