//! Checkpoint files.
//!
//! A checkpoint is a TOML header (format version, configuration echo, batch
//! RNG position, trainer counters and the name and shape of every tensor),
//! terminated by the line `# end of header`, followed by the tensors as
//! row-major little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochSums, Optimizer, OptimizerKind, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::kernels::parse_kernel_list;
use crate::model::{ModelConfig, Parameters};
use crate::output_layer::{MixtureConfig, VarianceMode};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "ksoftmax-checkpoint";
const END_OF_HEADER: &str = "# end of header\n";

/// Serializable echo of a [`TrainConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigRecord {
    pub kernels: String,
    pub d: usize,
    pub vocab: usize,
    pub context: usize,
    pub embed_dim: usize,
    pub rho: f64,
    pub variance_mode: VarianceMode,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl TrainConfigRecord {
    pub fn from_config<T: Scalar>(c: &TrainConfig<T>) -> Self {
        let m = &c.model.mixture;
        Self {
            kernels: m.components.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            d: m.d,
            vocab: m.vocab,
            context: c.model.context,
            embed_dim: c.model.embed_dim,
            rho: m.rho.as_f64(),
            variance_mode: m.variance_mode,
            optimizer: c.optimizer,
            learning_rate: c.learning_rate.as_f64(),
            batch_size: c.batch_size,
            clip_norm: c.clip_norm.as_f64(),
            max_epochs: c.max_epochs,
            patience: c.patience,
            seed: c.seed,
            beta1: c.beta1.as_f64(),
            beta2: c.beta2.as_f64(),
            epsilon: c.epsilon.as_f64(),
        }
    }

    pub fn to_config<T: Scalar>(&self) -> Result<TrainConfig<T>> {
        let mut mixture =
            MixtureConfig::new(parse_kernel_list(&self.kernels)?, self.d, self.vocab).with_rho(T::lit(self.rho));
        mixture.variance_mode = self.variance_mode;
        let config = TrainConfig {
            model: ModelConfig {
                context: self.context,
                embed_dim: self.embed_dim,
                mixture,
            },
            optimizer: self.optimizer,
            learning_rate: T::lit(self.learning_rate),
            batch_size: self.batch_size,
            clip_norm: T::lit(self.clip_norm),
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            beta1: T::lit(self.beta1),
            beta2: T::lit(self.beta2),
            epsilon: T::lit(self.epsilon),
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngRecord {
    algorithm: String,
    seed: u64,
    /// Stream selector: the epoch whose batch order is in progress.
    stream: u64,
    batches_consumed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateRecord {
    epoch: u64,
    batch_in_epoch: u64,
    step: u64,
    best_dev_ppl: f64,
    best_epoch: u64,
    stale_epochs: u64,
    optimizer_steps: u64,
    epoch_loss_sum: f64,
    epoch_regularizer_sum: f64,
    epoch_pi_sums: Vec<f64>,
    epoch_targets: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    format_version: u32,
    config: TrainConfigRecord,
    rng: RngRecord,
    state: StateRecord,
    tensors: Vec<TensorRecord>,
}

fn slot_names(prefix: &str, names: &[String]) -> Vec<String> {
    names.iter().map(|n| format!("{prefix}.{n}")).collect()
}

/// Flat views of every tensor of a state, in file order.
fn state_tensors<T: Scalar>(state: &TrainState<T>) -> Vec<(String, Vec<usize>, &[T])> {
    let params = state.model.tensors();
    let names: Vec<String> = params.iter().map(|t| t.name.clone()).collect();
    let shapes: Vec<Vec<usize>> = params.iter().map(|t| t.shape.clone()).collect();
    let mut out: Vec<(String, Vec<usize>, &[T])> = params.into_iter().map(|t| (t.name, t.shape, t.data)).collect();
    if state.optimizer.kind == OptimizerKind::Adam {
        for (prefix, slots) in [
            ("adam.m", &state.optimizer.first_moment),
            ("adam.v", &state.optimizer.second_moment),
        ] {
            for ((name, shape), data) in slot_names(prefix, &names).into_iter().zip(&shapes).zip(slots) {
                out.push((name, shape.clone(), data.as_slice()));
            }
        }
    }
    out
}

pub fn save_checkpoint<T: Scalar>(path: &Path, config: &TrainConfig<T>, state: &TrainState<T>) -> Result<()> {
    let tensors = state_tensors(state);
    let header = Header {
        format: MAGIC.into(),
        format_version: FORMAT_VERSION,
        config: TrainConfigRecord::from_config(config),
        rng: RngRecord {
            algorithm: "chacha8".into(),
            seed: config.seed,
            stream: state.epoch,
            batches_consumed: state.batch_in_epoch,
        },
        state: StateRecord {
            epoch: state.epoch,
            batch_in_epoch: state.batch_in_epoch,
            step: state.step,
            best_dev_ppl: state.best_dev_ppl.as_f64(),
            best_epoch: state.best_epoch,
            stale_epochs: state.stale_epochs,
            optimizer_steps: state.optimizer.steps,
            epoch_loss_sum: state.sums.loss.as_f64(),
            epoch_regularizer_sum: state.sums.regularizer.as_f64(),
            epoch_pi_sums: state.sums.pi.iter().map(|x| x.as_f64()).collect(),
            epoch_targets: state.sums.targets,
        },
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorRecord {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let payload: usize = tensors.iter().map(|t| t.2.len()).sum();
    let mut bytes = Vec::with_capacity(text.len() + END_OF_HEADER.len() + 8 * payload);
    bytes.extend_from_slice(text.as_bytes());
    bytes.extend_from_slice(END_OF_HEADER.as_bytes());
    for (_, _, data) in &tensors {
        for x in data.iter() {
            bytes.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(TrainConfig<T>, TrainState<T>)> {
    let bytes = fs::read(path)?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let split = bytes
        .windows(END_OF_HEADER.len())
        .position(|w| w == END_OF_HEADER.as_bytes())
        .ok_or_else(|| bad("missing end-of-header marker".into()))?;
    let text = std::str::from_utf8(&bytes[..split]).map_err(|e| bad(e.to_string()))?;
    let header: Header = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
    if header.format != MAGIC {
        return Err(bad(format!("not a checkpoint (format {:?})", header.format)));
    }
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let config: TrainConfig<T> = header.config.to_config()?;
    let mut state = TrainState::init(&config)?;
    let s = &header.state;
    state.epoch = s.epoch;
    state.batch_in_epoch = s.batch_in_epoch;
    state.step = s.step;
    state.best_dev_ppl = T::lit(s.best_dev_ppl);
    state.best_epoch = s.best_epoch;
    state.stale_epochs = s.stale_epochs;
    state.optimizer.steps = s.optimizer_steps;
    state.sums = EpochSums {
        loss: T::lit(s.epoch_loss_sum),
        regularizer: T::lit(s.epoch_regularizer_sum),
        pi: s.epoch_pi_sums.iter().map(|&x| T::lit(x)).collect(),
        targets: s.epoch_targets,
    };
    if state.sums.pi.len() != config.model.mixture.k() {
        return Err(bad("epoch mixture sums do not match the component count".into()));
    }

    let expected: Vec<(String, Vec<usize>)> = state_tensors(&state).into_iter().map(|(n, s, _)| (n, s)).collect();
    let found: Vec<(String, Vec<usize>)> = header.tensors.into_iter().map(|t| (t.name, t.shape)).collect();
    if expected != found {
        return Err(bad("tensor list does not match the configured model".into()));
    }
    let mut payload = &bytes[split + END_OF_HEADER.len()..];
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != 8 * total {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            8 * total,
            payload.len()
        )));
    }
    let mut read = |dst: &mut [T]| {
        for x in dst.iter_mut() {
            let (head, rest) = payload.split_at(8);
            *x = T::lit(f64::from_le_bytes(head.try_into().expect("8 bytes")));
            payload = rest;
        }
    };
    for t in state.model.tensors_mut() {
        read(t.data);
    }
    let TrainState { optimizer, .. } = &mut state;
    let Optimizer {
        first_moment,
        second_moment,
        ..
    } = optimizer;
    for slot in first_moment.iter_mut().chain(second_moment.iter_mut()) {
        read(slot);
    }
    Ok((config, state))
}
