use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const UNK: usize = 1;
pub const BOS_TOKEN: &str = "<s>";
pub const UNK_TOKEN: &str = "<unk>";
/// Number of ids reserved ahead of real tokens.
pub const RESERVED: usize = 2;

/// Token ↔ id bijection. Ids are assigned by descending frequency with
/// lexicographic tie-breaking, after the reserved `BOS` and `UNK`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    lowercase: bool,
}

impl Vocabulary {
    /// Builds a vocabulary of at most `max_size` ids (reserved ids included)
    /// from whitespace-tokenized lines.
    pub fn build<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        max_size: usize,
        min_count: usize,
        lowercase: bool,
    ) -> Result<Self> {
        if max_size <= RESERVED {
            return Err(Error::InvalidHyperparameter {
                name: "max_vocab",
                value: max_size as f64,
                reason: "must leave room for at least one token beyond <s> and <unk>",
            });
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for tok in line.split_whitespace() {
                *counts.entry(normalize(tok, lowercase)).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !is_reserved(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED);
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t), lowercase))
    }

    fn from_tokens(words: impl IntoIterator<Item = String>, lowercase: bool) -> Self {
        let tokens: Vec<String> = [BOS_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(words)
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            index,
            lowercase,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    /// Id of `token`, or `UNK` when absent.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(&normalize(token, self.lowercase)).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i).unwrap_or(UNK_TOKEN)).collect()
    }

    /// Writes one token per line; line `i` holds id `i + 2`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for t in &self.tokens[RESERVED..] {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path, lowercase: bool) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        let mut seen = std::collections::HashSet::new();
        for w in &words {
            if w.is_empty() || w.contains(char::is_whitespace) || is_reserved(w) || !seen.insert(w) {
                return Err(Error::Config(format!(
                    "{}: invalid or duplicate vocabulary entry {w:?}",
                    path.display()
                )));
            }
        }
        Ok(Self::from_tokens(words, lowercase))
    }
}

fn is_reserved(t: &str) -> bool {
    t == BOS_TOKEN || t == UNK_TOKEN
}

fn normalize(token: &str, lowercase: bool) -> String {
    if lowercase {
        token.to_lowercase()
    } else {
        token.to_string()
    }
}

/// Vocabulary with lowercasing on, as used by default.
pub fn build_vocab<'a>(
    lines: impl IntoIterator<Item = &'a str>,
    max_size: usize,
    min_count: usize,
) -> Result<Vocabulary> {
    Vocabulary::build(lines, max_size, min_count, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order() {
        let v = build_vocab(["a a b"], 4, 1).unwrap();
        assert_eq!(v.tokens(), ["<s>", "<unk>", "a", "b"]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = build_vocab(["b a"], 10, 1).unwrap();
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);
    }

    #[test]
    fn truncation_and_unknowns() {
        let v = build_vocab(["a a b c c c"], 4, 1).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v.id("C"), 2);
    }

    #[test]
    fn min_count_filters() {
        let v = build_vocab(["a a b"], 10, 2).unwrap();
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn empty_corpus() {
        assert!(matches!(build_vocab(["", "  "], 10, 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn case_preserved_when_asked() {
        let v = Vocabulary::build(["The the"], 10, 1, false).unwrap();
        assert_eq!(v.len(), 4);
        assert_ne!(v.id("The"), v.id("the"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(["x y y z z z"], 10, 1).unwrap();
        v.save(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "z\ny\nx\n");
        assert_eq!(Vocabulary::load(&path, true).unwrap(), v);
    }
}
