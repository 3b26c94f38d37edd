//! Corpus ingestion, vocabulary, deterministic splits and window batching.
//!
//! Corpora are UTF-8 text with one whitespace-tokenized sentence per line.

mod batch;
mod synth;
mod vocab;

pub use batch::{batch_windows, ordered_windows, Batch, Batches};
pub use synth::{generate_synthetic, SynthConfig};
pub use vocab::{build_vocab, Vocabulary, BOS, BOS_TOKEN, RESERVED, UNK, UNK_TOKEN};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static DESK_CORPUS: &str = include_str!("../../data/moby_dick.txt");

/// The bundled public-domain English corpus (Moby-Dick), one sentence per line.
pub fn desk_corpus() -> Vec<String> {
    DESK_CORPUS.lines().map(str::to_string).collect()
}

/// Reads non-empty lines of a corpus file.
pub fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<String> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect();
    if lines.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(lines)
}

/// How a line corpus is divided and tokenized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitOptions {
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub max_vocab: usize,
    pub min_count: usize,
    pub lowercase: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            dev_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
            max_vocab: 5000,
            min_count: 1,
            lowercase: true,
        }
    }
}

/// Token-id sentences of the train, dev and test portions. Lines are assigned
/// whole, so the portions are disjoint by line.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Vec<usize>>,
    pub dev: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    pub options: SplitOptions,
}

/// Which portion of a [`CorpusSplit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "dev" => Ok(Self::Dev),
            "test" => Ok(Self::Test),
            _ => Err(Error::InvalidArgument(format!(
                "unknown split {s:?} (expected train, dev or test)"
            ))),
        }
    }
}

/// Partitions line indices into (train, dev, test), each kept in corpus order.
pub fn split_indices(n: usize, dev_fraction: f64, test_fraction: f64, seed: u64) -> Result<[Vec<usize>; 3]> {
    let ok = |f: f64| (0.0..1.0).contains(&f);
    if !ok(dev_fraction) || !ok(test_fraction) || dev_fraction + test_fraction >= 1.0 {
        return Err(Error::InvalidHyperparameter {
            name: "dev_fraction + test_fraction",
            value: dev_fraction + test_fraction,
            reason: "fractions must be in [0, 1) and leave a training portion",
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_dev = (n as f64 * dev_fraction).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut dev = order[n_test..n_test + n_dev].to_vec();
    let mut train = order[n_test + n_dev..].to_vec();
    for part in [&mut train, &mut dev, &mut test] {
        part.sort_unstable();
    }
    Ok([train, dev, test])
}

impl CorpusSplit {
    /// Splits `lines`, builds the vocabulary on the training portion and
    /// encodes every portion with it.
    pub fn build(lines: &[String], options: &SplitOptions) -> Result<(Vocabulary, Self)> {
        let lines: Vec<&String> = lines.iter().filter(|l| !l.trim().is_empty()).collect();
        if lines.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let [train, dev, test] = split_indices(lines.len(), options.dev_fraction, options.test_fraction, options.seed)?;
        if train.is_empty() {
            return Err(Error::EmptySplit("train"));
        }
        let vocab = Vocabulary::build(
            train.iter().map(|&i| lines[i].as_str()),
            options.max_vocab,
            options.min_count,
            options.lowercase,
        )?;
        let split = Self::encode(&vocab, &lines, [&train, &dev, &test], options.clone());
        Ok((vocab, split))
    }

    /// Re-derives the split of `lines` under an existing vocabulary.
    pub fn with_vocab(lines: &[String], vocab: &Vocabulary, options: &SplitOptions) -> Result<Self> {
        let lines: Vec<&String> = lines.iter().filter(|l| !l.trim().is_empty()).collect();
        if lines.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let [train, dev, test] = split_indices(lines.len(), options.dev_fraction, options.test_fraction, options.seed)?;
        Ok(Self::encode(vocab, &lines, [&train, &dev, &test], options.clone()))
    }

    fn encode(vocab: &Vocabulary, lines: &[&String], parts: [&Vec<usize>; 3], options: SplitOptions) -> Self {
        let enc = |idx: &Vec<usize>| -> Vec<Vec<usize>> {
            idx.iter()
                .map(|&i| vocab.encode_line(lines[i]))
                .filter(|s| !s.is_empty())
                .collect()
        };
        Self {
            train: enc(parts[0]),
            dev: enc(parts[1]),
            test: enc(parts[2]),
            options,
        }
    }

    pub fn part(&self, name: SplitName) -> &[Vec<usize>] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }

    pub fn num_tokens(sentences: &[Vec<usize>]) -> usize {
        sentences.iter().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("tok{} common tok{}", i % 7, i % 3)).collect()
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let [a, b, c] = split_indices(101, 0.1, 0.2, 5).unwrap();
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!((b.len(), c.len()), (10, 20));
    }

    #[test]
    fn split_is_seeded() {
        let opts = SplitOptions::default();
        let (v1, s1) = CorpusSplit::build(&lines(50), &opts).unwrap();
        let (v2, s2) = CorpusSplit::build(&lines(50), &opts).unwrap();
        assert_eq!((v1, s1), (v2, s2));
        let other = SplitOptions { seed: 9, ..opts };
        let (_, s3) = CorpusSplit::build(&lines(50), &other).unwrap();
        assert_ne!(
            CorpusSplit::build(&lines(50), &SplitOptions::default()).unwrap().1.dev,
            s3.dev
        );
    }

    #[test]
    fn bad_fractions_rejected() {
        assert!(split_indices(10, 0.6, 0.5, 0).is_err());
    }

    #[test]
    fn desk_corpus_is_bundled() {
        let c = desk_corpus();
        assert!(c.len() > 8000);
        let tokens: usize = c.iter().map(|l| l.split_whitespace().count()).sum();
        assert!((200_000..300_000).contains(&tokens));
    }
}
