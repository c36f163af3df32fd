use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::TokenBatch;

static BUNDLED: &[u8] = include_bytes!("../../data/moby_dick.txt");

/// Fraction of the corpus held out for diagnostic probes.
pub const HOLDOUT_FRACTION: f64 = 0.1;

/// Raw-byte token stream. The final tenth is reserved for probe batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    bytes: Vec<u8>,
    split: usize,
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::CorpusTooSmall {
                have: bytes.len(),
                need: 4,
            });
        }
        let split = ((bytes.len() as f64) * (1.0 - HOLDOUT_FRACTION)).round() as usize;
        Ok(Self { bytes, split })
    }

    /// The public-domain text shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_bytes(BUNDLED.to_vec()).expect("bundled corpus is non-empty")
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_bytes(std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn train_tokens(&self) -> &[u8] {
        &self.bytes[..self.split]
    }

    pub fn holdout_tokens(&self) -> &[u8] {
        &self.bytes[self.split..]
    }

    /// Seeded stream of random training windows.
    pub fn batches(&self, seed: u64, batch: usize, seq: usize) -> Result<Batches<'_>> {
        let need = seq + 1;
        if self.train_tokens().len() < need {
            return Err(Error::CorpusTooSmall {
                have: self.train_tokens().len(),
                need,
            });
        }
        if batch == 0 || seq == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(Batches {
            tokens: self.train_tokens(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch,
            seq,
        })
    }

    /// `n` evenly spaced windows from the held-out tail; identical for every call.
    pub fn probe_batch(&self, n: usize, seq: usize) -> Result<TokenBatch> {
        let tokens = self.holdout_tokens();
        let need = seq + 1;
        if tokens.len() < need {
            return Err(Error::CorpusTooSmall {
                have: tokens.len(),
                need,
            });
        }
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let span = tokens.len() - need;
        let windows: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let start = if n == 1 { 0 } else { i * span / (n - 1) };
                tokens[start..start + need].iter().map(|&b| b as usize).collect()
            })
            .collect();
        TokenBatch::from_windows(&windows)
    }
}

pub struct Batches<'a> {
    tokens: &'a [u8],
    rng: ChaCha8Rng,
    batch: usize,
    seq: usize,
}

impl Batches<'_> {
    pub fn next_batch(&mut self) -> TokenBatch {
        let span = self.tokens.len() - self.seq;
        let mut inputs = Vec::with_capacity(self.batch * self.seq);
        let mut targets = Vec::with_capacity(self.batch * self.seq);
        for _ in 0..self.batch {
            let start = self.rng.random_range(0..span);
            let w = &self.tokens[start..start + self.seq + 1];
            inputs.extend(w[..self.seq].iter().map(|&b| b as usize));
            targets.extend(w[1..].iter().map(|&b| b as usize));
        }
        TokenBatch {
            batch: self.batch,
            seq: self.seq,
            inputs,
            targets,
        }
    }
}
