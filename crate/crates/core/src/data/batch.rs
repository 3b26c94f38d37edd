use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::BOS;

/// `B×n` context windows and the `B` tokens that follow them.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub windows: Array2<usize>,
    pub targets: Vec<usize>,
}

/// Iterator over the batches of one pass through a split.
#[derive(Debug, Clone)]
pub struct Batches<'a> {
    sentences: &'a [Vec<usize>],
    positions: Vec<(u32, u32)>,
    n: usize,
    batch_size: usize,
    next: usize,
}

impl<'a> Batches<'a> {
    fn new(sentences: &'a [Vec<usize>], n: usize, batch_size: usize) -> Self {
        assert!(n >= 1, "context length must be at least 1");
        assert!(batch_size >= 1, "batch size must be at least 1");
        let positions = sentences
            .iter()
            .enumerate()
            .flat_map(|(s, sent)| (0..sent.len()).map(move |p| (s as u32, p as u32)))
            .collect();
        Self {
            sentences,
            positions,
            n,
            batch_size,
            next: 0,
        }
    }

    pub fn num_batches(&self) -> usize {
        self.positions.len().div_ceil(self.batch_size)
    }

    pub fn num_targets(&self) -> usize {
        self.positions.len()
    }

    /// Skips the first `k` batches.
    pub fn skip_batches(mut self, k: usize) -> Self {
        self.next = (self.next + k * self.batch_size).min(self.positions.len());
        self
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.positions.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.positions.len());
        let chunk = &self.positions[self.next..end];
        self.next = end;
        let mut windows = Array2::from_elem((chunk.len(), self.n), BOS);
        let mut targets = Vec::with_capacity(chunk.len());
        for (row, &(s, p)) in chunk.iter().enumerate() {
            let sent = &self.sentences[s as usize];
            let p = p as usize;
            // window slot j holds the token at position p - n + j
            for j in 0..self.n {
                if let Some(src) = (p + j).checked_sub(self.n) {
                    windows[[row, j]] = sent[src];
                }
            }
            targets.push(sent[p]);
        }
        Some(Batch { windows, targets })
    }
}

/// One epoch of shuffled windows. The order is a pure function of `seed`
/// and `epoch`; every token of every sentence is a target exactly once.
pub fn batch_windows(sentences: &[Vec<usize>], n: usize, batch_size: usize, seed: u64, epoch: u64) -> Batches<'_> {
    let mut b = Batches::new(sentences, n, batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    b.positions.shuffle(&mut rng);
    b
}

/// Windows in corpus order, for evaluation.
pub fn ordered_windows(sentences: &[Vec<usize>], n: usize, batch_size: usize) -> Batches<'_> {
    Batches::new(sentences, n, batch_size)
}
