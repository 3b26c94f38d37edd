//! Experiment configuration files.
//!
//! A config is TOML with four sections. Every key can be overridden by a
//! dotted `section.key` assignment, which is how command-line flags are
//! applied on top of a file:
//!
//! ```toml
//! [data]
//! corpus = "synthetic"   # "desk", "synthetic", or a path
//! max_vocab = 200
//!
//! [synth]
//! tokens = 100000
//!
//! [model]
//! kernels = "lin,rbf:gamma=0.5"
//! d = 32
//!
//! [train]
//! optimizer = "adam"
//! max_epochs = 20
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{desk_corpus, generate_synthetic, read_corpus, SplitOptions, SynthConfig};
use crate::error::{Error, Result};
use crate::kernels::parse_kernel_list;
use crate::model::ModelConfig;
use crate::output_layer::{MixtureConfig, VarianceMode};
use crate::scalar::Scalar;
use crate::training::{OptimizerKind, TrainConfig};

/// Environment variable consulted for the seed when neither a flag nor the
/// config file sets one.
pub const SEED_ENV: &str = "KSOFTMAX_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `"desk"`, `"synthetic"`, or a corpus file path.
    pub corpus: String,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub max_vocab: usize,
    pub min_count: usize,
    pub lowercase: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SplitOptions::default();
        Self {
            corpus: "synthetic".into(),
            dev_fraction: s.dev_fraction,
            test_fraction: s.test_fraction,
            split_seed: s.seed,
            max_vocab: s.max_vocab,
            min_count: s.min_count,
            lowercase: s.lowercase,
        }
    }
}

impl DataSection {
    pub fn split_options(&self) -> SplitOptions {
        SplitOptions {
            dev_fraction: self.dev_fraction,
            test_fraction: self.test_fraction,
            seed: self.split_seed,
            max_vocab: self.max_vocab,
            min_count: self.min_count,
            lowercase: self.lowercase,
        }
    }

    /// Loads the configured corpus lines. Relative paths resolve against `base`.
    pub fn load_lines(&self, synth: &SynthConfig, base: Option<&Path>) -> Result<Vec<String>> {
        match self.corpus.as_str() {
            "desk" => Ok(desk_corpus()),
            "synthetic" => generate_synthetic(synth),
            path => {
                let p = PathBuf::from(path);
                let p = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p,
                };
                read_corpus(&p)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Comma-separated kernel specs, one per mixture component.
    pub kernels: String,
    pub d: usize,
    pub embed_dim: usize,
    pub context: usize,
    pub rho: f64,
    pub variance_mode: VarianceMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kernels: "lin".into(),
            d: 32,
            embed_dim: 32,
            context: 3,
            rho: 0.1,
            variance_mode: VarianceMode::PerDatum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 64,
            clip_norm: 5.0,
            max_epochs: 20,
            patience: 5,
            seed: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub train: TrainSection,
}

/// Parses a command-line value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Overrides one `section.key` with a value written as on the command line.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override `{key}` must have the form section.key")))?;
        let mut doc = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let table = doc
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::Config(format!("unknown config section `{section}` in `{key}`")))?;
        let mut value = parse_value(raw);
        // strings that happen to look like numbers or booleans
        if matches!(table.get(field), Some(toml::Value::String(_))) && !value.is_str() {
            value = toml::Value::String(raw.to_string());
        }
        table.insert(field.to_string(), value);
        *self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("`{key} = {raw}`: {e}")))?;
        Ok(())
    }

    /// Seed precedence: explicit flag, then config file, then the
    /// `KSOFTMAX_SEED` environment variable, then 0.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let env = std::env::var(SEED_ENV).ok();
        let seed = resolve_seed(flag, self.train.seed, env.as_deref())?;
        self.train.seed = Some(seed);
        Ok(seed)
    }

    pub fn seed(&self) -> u64 {
        self.train.seed.unwrap_or(0)
    }

    /// Model and training settings for a vocabulary of `vocab` ids.
    pub fn train_config<T: Scalar>(&self, vocab: usize) -> Result<TrainConfig<T>> {
        let m = &self.model;
        let t = &self.train;
        let mut mixture = MixtureConfig::new(parse_kernel_list::<T>(&m.kernels)?, m.d, vocab).with_rho(T::lit(m.rho));
        mixture.variance_mode = m.variance_mode;
        let config = TrainConfig {
            model: ModelConfig {
                context: m.context,
                embed_dim: m.embed_dim,
                mixture,
            },
            optimizer: t.optimizer,
            learning_rate: T::lit(t.learning_rate),
            batch_size: t.batch_size,
            clip_norm: T::lit(t.clip_norm),
            max_epochs: t.max_epochs,
            patience: t.patience,
            seed: self.seed(),
            beta1: T::lit(t.beta1),
            beta2: T::lit(t.beta2),
            epsilon: T::lit(t.epsilon),
        };
        config.validate()?;
        Ok(config)
    }
}

pub fn resolve_seed(flag: Option<u64>, file: Option<u64>, env: Option<&str>) -> Result<u64> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        None => Ok(0),
    }
}
