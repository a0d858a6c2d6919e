//! Declarative run configuration read from TOML.

use std::path::{Path, PathBuf};

use caes_core::causepairs::SyntheticPairConfig;
use caes_core::imaging::{ClassifierSpec, ClassifierTrainConfig, EffectVariable};
use caes_core::ncc::NccTrainConfig;
use caes_core::nn::checkpoint::sha256_hex;
use caes_core::rng::derive_seed;
use caes_core::saliency::{MaskSource, DEFAULT_RETAIN_FRACTION};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
}

impl ConfigError {
    pub fn invalid(field: &str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub global: u64,
    /// Dataset and pair-corpus generation, splits.
    pub data: Option<u64>,
    /// Model initialisation and batch order.
    pub train: Option<u64>,
}

impl Seeds {
    pub fn data(&self) -> u64 {
        self.data.unwrap_or_else(|| derive_seed(self.global, "data"))
    }

    pub fn train(&self) -> u64 {
        self.train.unwrap_or_else(|| derive_seed(self.global, "train"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic,
    Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Dataset root when `source = "path"`.
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetSource::Synthetic,
            path: None,
            classes: 4,
            per_class: 100,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Desk,
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub backbone: Backbone,
    /// Number of last-block maps; the backbone's own value when unset.
    pub feature_maps: Option<usize>,
    pub input_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub checkpoint: PathBuf,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        let t = ClassifierTrainConfig::default();
        ClassifierConfig {
            backbone: Backbone::Desk,
            feature_maps: None,
            input_size: 64,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            checkpoint: PathBuf::from("classifier.ckpt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NccConfig {
    pub corpus_size: usize,
    pub synthetic: SyntheticPairConfig,
    pub train: NccTrainConfig,
    pub checkpoint: PathBuf,
    /// Benchmark directory used by `eval-ncc`.
    pub tubingen_dir: PathBuf,
}

impl Default for NccConfig {
    fn default() -> Self {
        NccConfig {
            corpus_size: 10_000,
            synthetic: SyntheticPairConfig::default(),
            train: NccTrainConfig::default(),
            checkpoint: PathBuf::from("ncc.ckpt"),
            tubingen_dir: PathBuf::from("data/tubingen"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskChoice {
    Human,
    Gradcam,
    Both,
}

impl MaskChoice {
    pub fn sources(self) -> Vec<MaskSource> {
        match self {
            MaskChoice::Human => vec![MaskSource::Human],
            MaskChoice::Gradcam => vec![MaskSource::Gradcam],
            MaskChoice::Both => MaskSource::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyConfig {
    pub retain_fraction: f64,
    pub mask_source: MaskChoice,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig {
            retain_fraction: DEFAULT_RETAIN_FRACTION,
            mask_source: MaskChoice::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaesConfig {
    pub fraction: f64,
    pub effect_variable: EffectVariable,
    /// Image groups whose NCC scores are averaged per feature.
    pub batches: usize,
}

impl Default for CaesConfig {
    fn default() -> Self {
        CaesConfig {
            fraction: caes_core::caes::DEFAULT_FRACTION,
            effect_variable: EffectVariable::Prob,
            batches: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: Option<String>,
    pub output_dir: PathBuf,
    pub seeds: Seeds,
    pub dataset: DatasetConfig,
    pub classifier: ClassifierConfig,
    pub ncc: NccConfig,
    pub saliency: SaliencyConfig,
    pub caes: CaesConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: None,
            output_dir: PathBuf::from("runs/default"),
            seeds: Seeds::default(),
            dataset: DatasetConfig::default(),
            classifier: ClassifierConfig::default(),
            ncc: NccConfig::default(),
            saliency: SaliencyConfig::default(),
            caes: CaesConfig::default(),
        }
    }
}

/// Parse a `--set` value as a TOML value, falling back to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::invalid(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::invalid(key, "empty path segment"));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::invalid(key, format!("{part} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Read `path` (or start from defaults) and apply `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| ConfigError::Parse(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks that do not depend on files existing.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.dataset;
        if d.source == DatasetSource::Path && d.path.is_none() {
            return Err(ConfigError::invalid("dataset.path", "required when source = \"path\""));
        }
        if d.source == DatasetSource::Synthetic {
            if d.classes < 2 {
                return Err(ConfigError::invalid("dataset.classes", "need at least 2 classes"));
            }
            if d.per_class < 1 {
                return Err(ConfigError::invalid("dataset.per_class", "must be positive"));
            }
        }
        if !(d.train_fraction > 0.0 && d.val_fraction > 0.0 && d.train_fraction + d.val_fraction <= 1.0) {
            return Err(ConfigError::invalid(
                "dataset.train_fraction",
                "train and val fractions must be positive and sum to at most 1",
            ));
        }
        self.classifier_spec(2)
            .validate()
            .map_err(|e| ConfigError::invalid("classifier", e.to_string()))?;
        self.classifier_train()
            .validate()
            .map_err(|e| ConfigError::invalid("classifier", e.to_string()))?;
        if self.ncc.corpus_size < 2 || self.ncc.corpus_size % 2 != 0 {
            return Err(ConfigError::invalid("ncc.corpus_size", "must be even and at least 2"));
        }
        self.ncc
            .synthetic
            .validate()
            .map_err(|e| ConfigError::invalid("ncc.synthetic", e.to_string()))?;
        self.ncc
            .train
            .validate()
            .map_err(|e| ConfigError::invalid("ncc.train", e.to_string()))?;
        let r = self.saliency.retain_fraction;
        if !(r > 0.0 && r < 1.0) {
            return Err(ConfigError::invalid("saliency.retain_fraction", "must lie in (0, 1)"));
        }
        let f = self.caes.fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(ConfigError::invalid("caes.fraction", "must lie in (0, 1]"));
        }
        if self.caes.batches < 1 {
            return Err(ConfigError::invalid("caes.batches", "must be positive"));
        }
        Ok(())
    }

    pub fn classifier_spec(&self, num_classes: usize) -> ClassifierSpec {
        let mut spec = match self.classifier.backbone {
            Backbone::Desk => ClassifierSpec::desk(num_classes),
            Backbone::Standard => ClassifierSpec::standard(num_classes),
        };
        spec.input_size = self.classifier.input_size;
        if let Some(l) = self.classifier.feature_maps {
            *spec.backbone.channels.last_mut().expect("backbone has blocks") = l;
        }
        spec
    }

    pub fn classifier_train(&self) -> ClassifierTrainConfig {
        ClassifierTrainConfig {
            epochs: self.classifier.epochs,
            learning_rate: self.classifier.learning_rate,
            batch_size: self.classifier.batch_size,
            seed: self.seeds.train(),
        }
    }

    pub fn pair_config(&self) -> SyntheticPairConfig {
        SyntheticPairConfig {
            rng_seed: self.seeds.data(),
            ..self.ncc.synthetic.clone()
        }
    }

    pub fn ncc_train(&self) -> NccTrainConfig {
        NccTrainConfig {
            rng_seed: self.seeds.train(),
            ..self.ncc.train.clone()
        }
    }

    /// Resolve a configured path against the output directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output_dir.join(p)
        }
    }

    pub fn classifier_checkpoint(&self) -> PathBuf {
        self.resolve(&self.classifier.checkpoint)
    }

    pub fn ncc_checkpoint(&self) -> PathBuf {
        self.resolve(&self.ncc.checkpoint)
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Configured run id, or a digest of the configuration.
    pub fn run_id(&self) -> String {
        if let Some(id) = &self.run_id {
            return id.clone();
        }
        let digest = sha256_hex(self.snapshot().to_string().as_bytes());
        format!("run-{}", &digest[..12])
    }
}
