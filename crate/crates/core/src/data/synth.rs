//! Seeded synthetic corpus with Zipfian unigram statistics and first-order
//! Markov structure.
//!
//! Word type `t` (named `w{t}`) has base weight `1 / (t + 1)^s`. Each type
//! owns a random set of `successors` favoured follow-up types whose weights
//! are multiplied by `boost` when drawing the next token. Sentence starts are
//! drawn from the plain Zipf weights and lengths are uniform in
//! `[min_len, max_len]`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::RESERVED;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Zipf exponent.
    pub zipf_s: f64,
    /// Vocabulary size including the two reserved ids.
    pub vocab: usize,
    /// Total number of tokens to emit.
    pub tokens: usize,
    pub seed: u64,
    pub successors: usize,
    pub boost: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            zipf_s: 1.1,
            vocab: 200,
            tokens: 100_000,
            seed: 0,
            successors: 4,
            boost: 30.0,
            min_len: 6,
            max_len: 20,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, value: f64, reason| Err(Error::InvalidHyperparameter { name, value, reason });
        if !(self.zipf_s.is_finite() && self.zipf_s > 0.0) {
            return bad("zipf_s", self.zipf_s, "must be positive");
        }
        if self.vocab <= RESERVED {
            return bad("vocab", self.vocab as f64, "must exceed the two reserved ids");
        }
        if self.tokens == 0 {
            return bad("tokens", 0.0, "must be positive");
        }
        if self.successors > self.vocab - RESERVED {
            return bad(
                "successors",
                self.successors as f64,
                "cannot exceed the number of word types",
            );
        }
        if !(self.boost.is_finite() && self.boost >= 1.0) {
            return bad("boost", self.boost, "must be at least 1");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("min_len", self.min_len as f64, "need 1 <= min_len <= max_len");
        }
        Ok(())
    }
}

/// Generates the corpus as lines of space-separated tokens.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<String>> {
    config.validate()?;
    let m = config.vocab - RESERVED;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let base: Vec<f64> = (0..m).map(|t| ((t + 1) as f64).powf(-config.zipf_s)).collect();
    let start = WeightedIndex::new(&base).expect("positive weights");
    let transitions: Vec<WeightedIndex<f64>> = (0..m)
        .map(|_| {
            let mut w = base.clone();
            for s in rand::seq::index::sample(&mut rng, m, config.successors) {
                w[s] *= config.boost;
            }
            WeightedIndex::new(&w).expect("positive weights")
        })
        .collect();

    let mut lines = Vec::new();
    let mut remaining = config.tokens;
    while remaining > 0 {
        let len = rng.random_range(config.min_len..=config.max_len).min(remaining);
        let mut t = start.sample(&mut rng);
        let mut line = format!("w{t}");
        for _ in 1..len {
            t = transitions[t].sample(&mut rng);
            line.push_str(&format!(" w{t}"));
        }
        lines.push(line);
        remaining -= len;
    }
    Ok(lines)
}
