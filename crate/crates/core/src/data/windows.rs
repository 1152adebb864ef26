use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TokenizedCorpus;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Fixed-length token windows cut from a corpus, with their start offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSet {
    pub split: Split,
    pub seed: u64,
    context_len: usize,
    offsets: Vec<usize>,
    tokens: Vec<u16>,
}

impl WindowSet {
    fn cut(
        corpus: &TokenizedCorpus,
        split: Split,
        seed: u64,
        context_len: usize,
        offsets: Vec<usize>,
    ) -> Self {
        let mut tokens = Vec::with_capacity(offsets.len() * context_len);
        for &o in &offsets {
            tokens.extend_from_slice(&corpus.tokens()[o..o + context_len]);
        }
        WindowSet {
            split,
            seed,
            context_len,
            offsets,
            tokens,
        }
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn window(&self, i: usize) -> &[u16] {
        &self.tokens[i * self.context_len..(i + 1) * self.context_len]
    }

    /// Window `i` as model input indices.
    pub fn indices(&self, i: usize) -> Vec<usize> {
        self.window(i).iter().map(|&t| t as usize).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u16]> {
        self.tokens.chunks_exact(self.context_len)
    }

    /// First `n` windows.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        WindowSet {
            split: self.split,
            seed: self.seed,
            context_len: self.context_len,
            offsets: self.offsets[..n].to_vec(),
            tokens: self.tokens[..n * self.context_len].to_vec(),
        }
    }

    /// SHA-256 over context length, offsets and tokens.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.context_len as u64).to_le_bytes());
        for &o in &self.offsets {
            h.update((o as u64).to_le_bytes());
        }
        for &t in &self.tokens {
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Samples `n` windows of `context_len` tokens.
///
/// `max(1, floor(n * val_fraction))` validation windows are laid end to end
/// in a tail segment of the corpus; the training windows start at seeded
/// uniform offsets in the remaining head, so no token position is shared
/// between the splits. The tail covers at least `val_fraction` of the
/// corpus.
pub fn sample_windows(
    corpus: &TokenizedCorpus,
    context_len: usize,
    n: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<(WindowSet, WindowSet)> {
    let len = corpus.len();
    if context_len == 0 {
        return Err(Error::Data("context_len must be positive".into()));
    }
    if len < context_len {
        return Err(Error::Data(format!(
            "corpus has {len} tokens, shorter than the context length {context_len}"
        )));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Data(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let n_val = ((n as f64 * val_fraction).floor() as usize).max(1);
    if n <= n_val {
        return Err(Error::Data(format!(
            "{n} windows leave none for training after {n_val} validation windows"
        )));
    }
    let tail = (n_val * context_len).max((len as f64 * val_fraction).ceil() as usize);
    if tail + context_len > len {
        return Err(Error::Data(format!(
            "corpus of {len} tokens cannot hold a {tail}-token validation tail plus one training window"
        )));
    }
    let head = len - tail;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_offsets = (0..n - n_val)
        .map(|_| rng.random_range(0..=head - context_len))
        .collect();
    let val_offsets = (0..n_val).map(|k| head + k * context_len).collect();
    Ok((
        WindowSet::cut(corpus, Split::Train, seed, context_len, train_offsets),
        WindowSet::cut(corpus, Split::Val, seed, context_len, val_offsets),
    ))
}
