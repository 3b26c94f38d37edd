//! One complete training run with its on-disk artifacts.
//!
//! ```text
//! <out>/config.toml    effective configuration
//! <out>/metrics.csv    one row per epoch
//! <out>/train.log      progress; only the first line carries a timestamp
//! <out>/best/          checkpoint, vocab.txt and config.toml of the best dev epoch
//! <out>/last/          the most recent finite state
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{load_checkpoint, metrics_header, save_checkpoint, EpochMetrics, TrainConfig, TrainState, Trainer};
use crate::config::ExperimentConfig;
use crate::data::{CorpusSplit, Vocabulary};
use crate::error::{Error, Result};
use crate::eval;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "config.toml";

/// Locations of a run's artifacts.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("train.log")
    }
    pub fn best(&self) -> PathBuf {
        self.root.join("best")
    }
    pub fn last(&self) -> PathBuf {
        self.root.join("last")
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub vocab_size: usize,
    pub metrics: Vec<EpochMetrics<f64>>,
    pub best_dev_ppl: f64,
    pub best_epoch: u64,
    /// Mean mixture-weight variance of the best model on dev.
    pub dev_pi_variance: f64,
    /// Mean mixture weight per component of the best model on dev.
    pub dev_pi_mean: Vec<f64>,
    /// Dev perplexity of the freshly initialized model.
    pub initial_dev_ppl: f64,
    /// Set when training stopped on a non-finite value.
    pub divergence: Option<Divergence>,
}

/// Where a run hit a non-finite value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Divergence {
    pub step: u64,
    pub component: Option<usize>,
}

impl Divergence {
    pub fn to_error(self) -> Error {
        Error::DivergenceDetected {
            step: self.step,
            component: self.component,
        }
    }
}

impl std::fmt::Display for Divergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.to_error())
    }
}

fn save_dir(
    dir: &Path,
    config: &TrainConfig<f64>,
    state: &TrainState<f64>,
    vocab: &Vocabulary,
    exp: &ExperimentConfig,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), config, state)?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    fs::write(dir.join(CONFIG_FILE), exp.to_toml_string())?;
    Ok(())
}

/// Loads the corpus, trains, and (when `out` is given) writes all artifacts.
/// Divergence is reported in the outcome rather than as an error.
pub fn run_experiment(exp: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutcome> {
    let lines = exp.data.load_lines(&exp.synth, None)?;
    let (vocab, split) = CorpusSplit::build(&lines, &exp.data.split_options())?;
    let config = exp.train_config::<f64>(vocab.len())?;
    let paths = out.map(RunPaths::new);
    let mut metrics_file = None;
    let mut log_file = None;
    if let Some(p) = &paths {
        fs::create_dir_all(&p.root)?;
        fs::write(p.config(), exp.to_toml_string())?;
        let mut m = fs::File::create(p.metrics())?;
        writeln!(m, "{}", metrics_header(config.model.mixture.k()))?;
        metrics_file = Some(m);
        let mut l = fs::File::create(p.log())?;
        let now = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        writeln!(l, "started unix_time={now}")?;
        writeln!(
            l,
            "vocab={} train_tokens={} dev_tokens={} test_tokens={} kernels={}",
            vocab.len(),
            CorpusSplit::num_tokens(&split.train),
            CorpusSplit::num_tokens(&split.dev),
            CorpusSplit::num_tokens(&split.test),
            exp.model.kernels
        )?;
        log_file = Some(l);
    }

    let mut trainer = Trainer::new(config.clone(), &split)?;
    let initial_dev_ppl = eval::perplexity(&trainer.state.model, &split.dev, super::EVAL_BATCH)?;
    let mut metrics = Vec::new();
    let mut divergence = None;
    while !trainer.finished() {
        match trainer.run_epoch() {
            Ok(m) => {
                if let Some(f) = metrics_file.as_mut() {
                    writeln!(f, "{}", m.csv_row())?;
                    f.flush()?;
                }
                if let Some(l) = log_file.as_mut() {
                    writeln!(l, "epoch {} train_loss {} dev_ppl {}", m.epoch, m.train_loss, m.dev_ppl)?;
                }
                if let Some(p) = &paths {
                    if trainer.state.best_epoch == m.epoch {
                        save_dir(&p.best(), &config, &trainer.state, &vocab, exp)?;
                    }
                    save_dir(&p.last(), &config, &trainer.state, &vocab, exp)?;
                }
                metrics.push(m);
            }
            Err(Error::DivergenceDetected { step, component }) => {
                let d = Divergence { step, component };
                if let Some(l) = log_file.as_mut() {
                    writeln!(l, "{d}")?;
                }
                if let Some(p) = &paths {
                    save_dir(&p.last(), &config, &trainer.state, &vocab, exp)?;
                }
                divergence = Some(d);
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let (dev_pi_mean, dev_pi_variance) = match &trainer.best {
        Some(best) => {
            let r = eval::evaluate(&best.model, &split.dev, super::EVAL_BATCH)?;
            (r.pi_mean, r.pi_variance)
        }
        None => (Vec::new(), f64::NAN),
    };
    Ok(RunOutcome {
        vocab_size: vocab.len(),
        metrics,
        best_dev_ppl: trainer.state.best_dev_ppl,
        best_epoch: trainer.state.best_epoch,
        dev_pi_variance,
        dev_pi_mean,
        initial_dev_ppl,
        divergence,
    })
}

/// A saved checkpoint directory together with the data it was trained on.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub experiment: ExperimentConfig,
    pub vocab: Vocabulary,
    pub config: TrainConfig<f64>,
    pub state: TrainState<f64>,
}

impl LoadedRun {
    /// Rebuilds the corpus split under the saved vocabulary.
    pub fn split(&self) -> Result<CorpusSplit> {
        let lines = self.experiment.data.load_lines(&self.experiment.synth, None)?;
        CorpusSplit::with_vocab(&lines, &self.vocab, &self.experiment.data.split_options())
    }
}

/// Loads a checkpoint directory written by [`run_experiment`].
pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let experiment = ExperimentConfig::from_file(&dir.join(CONFIG_FILE))?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE), experiment.data.lowercase)?;
    let (config, state) = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    if config.model.mixture.vocab != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary {} does not match {} entries in {VOCAB_FILE}",
            config.model.mixture.vocab,
            vocab.len()
        )));
    }
    Ok(LoadedRun {
        experiment,
        vocab,
        config,
        state,
    })
}
