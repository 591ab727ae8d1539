//! Experiment configuration files.
//!
//! TOML with an optional top-level `preset` and six sections: `model`,
//! `federation`, `optimizer`, `data`, `embeddings`, `pretrain`. Every key is
//! optional in the file; unset keys take the preset's value, then the
//! defaults below. Unknown keys and type mismatches are errors that name the
//! offending key. Relative paths are resolved against the config file's
//! directory.
//!
//! | key | default |
//! |-----|---------|
//! | `preset` | none (`"small"`, `"large"` or `"adaptive-baseline"`) |
//! | `model.embedding_dim` / `lstm_units` / `dense_units` | small preset: 100 / 256 / 100 |
//! | `model.max_seq_len` | 20 |
//! | `federation.clients_per_round` | 10 (adaptive-baseline: 50) |
//! | `federation.batch_size` | 16 |
//! | `federation.total_rounds` | 800 (adaptive-baseline: 1500) |
//! | `federation.local_epochs` | 1 (only supported value) |
//! | `federation.per_client_cap` | 5000 (adaptive-baseline: 128) |
//! | `federation.eval_samples` | 20000 (adaptive-baseline: 10000) |
//! | `federation.eval_every` | 1 |
//! | `federation.eval_batch_size` | 64 |
//! | `federation.rng_seed` | 0 |
//! | `optimizer.lr` / `beta1` / `beta2` / `epsilon` | 0.001 / 0.9 / 0.999 / 1e-7 |
//! | `optimizer.clip_norm` | none |
//! | `data.train_corpus` | required by `federate` |
//! | `data.eval_corpus` | none (no validation) |
//! | `data.vocab` | none (built from the training corpus) |
//! | `data.num_words` | 10000 |
//! | `embeddings.path` | none (random embeddings) |
//! | `pretrain.corpus` | required by `pretrain` |
//! | `pretrain.epochs` | 50 |
//! | `pretrain.batch_size` | `federation.batch_size` |
//! | `pretrain.num_words` | `data.num_words` |
//! | `pretrain.checkpoint` / `pretrain.vocab` | none; when set, `federate` warm-starts from them |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::federation::FederatedConfig;
use crate::model::{ModelConfig, Preset};
use crate::optim::AdamHyper;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config error at `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("missing required config key `{0}`")]
    Missing(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embedding_dim: Option<usize>,
    pub lstm_units: Option<usize>,
    pub dense_units: Option<usize>,
    pub max_seq_len: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub clients_per_round: Option<usize>,
    pub batch_size: Option<usize>,
    pub total_rounds: Option<usize>,
    pub local_epochs: Option<usize>,
    pub per_client_cap: Option<usize>,
    pub eval_samples: Option<usize>,
    pub eval_every: Option<usize>,
    pub eval_batch_size: Option<usize>,
    pub rng_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub num_words: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingsSection {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub corpus: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub num_words: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

/// The file as written.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub preset: Option<Preset>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub embeddings: EmbeddingsSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
}

/// Model sizes apart from the vocabulary, which comes from data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub embedding_dim: usize,
    pub lstm_units: usize,
    pub dense_units: usize,
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    pub train_corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub num_words: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub corpus: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub num_words: usize,
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

/// Fully resolved configuration; what run manifests record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: Option<Preset>,
    pub model: ModelDims,
    pub federation: FederatedConfig,
    pub optimizer: AdamHyper,
    pub clip_norm: Option<f64>,
    pub data: DataSettings,
    pub embeddings_path: Option<PathBuf>,
    pub pretrain: PretrainConfig,
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Parses config text. `base_dir` anchors relative paths.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| invalid("<file>", e.to_string()))?;
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        invalid(&key, e.into_inner().to_string())
    })?;
    resolve(raw, base_dir)
}

/// Reads and resolves a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config(&text, base)
}

fn anchor(base: &Path, p: Option<PathBuf>) -> Option<PathBuf> {
    p.map(|p| if p.is_absolute() { p } else { base.join(p) })
}

/// Applies preset values and defaults, then validates.
pub fn resolve(raw: RawConfig, base_dir: &Path) -> Result<ExperimentConfig> {
    let preset_model = ModelConfig::preset(raw.preset.unwrap_or(Preset::Small));
    let m = &raw.model;
    let model = ModelDims {
        embedding_dim: m.embedding_dim.unwrap_or(preset_model.embedding_dim),
        lstm_units: m.lstm_units.unwrap_or(preset_model.lstm_units),
        dense_units: m.dense_units.unwrap_or(preset_model.dense_units),
        max_seq_len: m.max_seq_len.unwrap_or(preset_model.max_seq_len),
    };
    for (key, v) in [
        ("model.embedding_dim", model.embedding_dim),
        ("model.lstm_units", model.lstm_units),
        ("model.dense_units", model.dense_units),
        ("model.max_seq_len", model.max_seq_len),
    ] {
        if v == 0 {
            return Err(invalid(key, "must be positive"));
        }
    }

    let base_fed = match raw.preset {
        Some(Preset::AdaptiveBaseline) => FederatedConfig::adaptive_baseline(),
        _ => FederatedConfig::default(),
    };
    let f = &raw.federation;
    let federation = FederatedConfig {
        clients_per_round: f.clients_per_round.unwrap_or(base_fed.clients_per_round),
        batch_size: f.batch_size.unwrap_or(base_fed.batch_size),
        total_rounds: f.total_rounds.unwrap_or(base_fed.total_rounds),
        local_epochs: f.local_epochs.unwrap_or(base_fed.local_epochs),
        per_client_cap: f.per_client_cap.unwrap_or(base_fed.per_client_cap),
        eval_samples: f.eval_samples.unwrap_or(base_fed.eval_samples),
        eval_every: f.eval_every.unwrap_or(base_fed.eval_every),
        eval_batch_size: f.eval_batch_size.unwrap_or(base_fed.eval_batch_size),
        rng_seed: f.rng_seed.unwrap_or(base_fed.rng_seed),
    };
    for (key, ok) in [
        (
            "federation.clients_per_round",
            federation.clients_per_round >= 1,
        ),
        ("federation.batch_size", federation.batch_size >= 1),
        ("federation.local_epochs", federation.local_epochs == 1),
        ("federation.per_client_cap", federation.per_client_cap >= 1),
        ("federation.eval_every", federation.eval_every >= 1),
        (
            "federation.eval_batch_size",
            federation.eval_batch_size >= 1,
        ),
    ] {
        if !ok {
            let msg = if key == "federation.local_epochs" {
                "only 1 local epoch per round is supported"
            } else {
                "must be >= 1"
            };
            return Err(invalid(key, msg));
        }
    }

    let d = AdamHyper::default();
    let o = &raw.optimizer;
    let optimizer = AdamHyper {
        lr: o.lr.unwrap_or(d.lr),
        beta1: o.beta1.unwrap_or(d.beta1),
        beta2: o.beta2.unwrap_or(d.beta2),
        epsilon: o.epsilon.unwrap_or(d.epsilon),
    };
    if optimizer.lr.is_nan() || optimizer.lr <= 0.0 {
        return Err(invalid("optimizer.lr", "must be > 0"));
    }
    if !(0.0..1.0).contains(&optimizer.beta1) {
        return Err(invalid("optimizer.beta1", "must be in [0, 1)"));
    }
    if !(0.0..1.0).contains(&optimizer.beta2) {
        return Err(invalid("optimizer.beta2", "must be in [0, 1)"));
    }
    if optimizer.epsilon.is_nan() || optimizer.epsilon <= 0.0 {
        return Err(invalid("optimizer.epsilon", "must be > 0"));
    }
    if let Some(c) = o.clip_norm {
        if c.is_nan() || c <= 0.0 {
            return Err(invalid("optimizer.clip_norm", "must be > 0"));
        }
    }

    let num_words = raw.data.num_words.unwrap_or(10_000);
    if num_words == 0 {
        return Err(invalid("data.num_words", "must be >= 1"));
    }
    let data = DataSettings {
        train_corpus: anchor(base_dir, raw.data.train_corpus),
        eval_corpus: anchor(base_dir, raw.data.eval_corpus),
        vocab: anchor(base_dir, raw.data.vocab),
        num_words,
    };

    let p = raw.pretrain;
    let pretrain = PretrainConfig {
        corpus: anchor(base_dir, p.corpus),
        epochs: p
            .epochs
            .unwrap_or(crate::warmstart::DEFAULT_PRETRAIN_EPOCHS),
        batch_size: p.batch_size.unwrap_or(federation.batch_size),
        num_words: p.num_words.unwrap_or(num_words),
        checkpoint: anchor(base_dir, p.checkpoint),
        vocab: anchor(base_dir, p.vocab),
    };
    if pretrain.batch_size == 0 {
        return Err(invalid("pretrain.batch_size", "must be >= 1"));
    }
    if pretrain.num_words == 0 {
        return Err(invalid("pretrain.num_words", "must be >= 1"));
    }
    if pretrain.checkpoint.is_some() != pretrain.vocab.is_some() {
        return Err(invalid(
            "pretrain.checkpoint",
            "pretrain.checkpoint and pretrain.vocab must be set together",
        ));
    }

    Ok(ExperimentConfig {
        preset: raw.preset,
        model,
        federation,
        optimizer,
        clip_norm: o.clip_norm,
        data,
        embeddings_path: anchor(base_dir, raw.embeddings.path),
        pretrain,
    })
}

impl ExperimentConfig {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embedding_dim: self.model.embedding_dim,
            lstm_units: self.model.lstm_units,
            dense_units: self.model.dense_units,
            max_seq_len: self.model.max_seq_len,
        }
    }

    /// Hex SHA-256 of the resolved configuration's JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }
}
