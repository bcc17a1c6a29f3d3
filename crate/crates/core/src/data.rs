//! Byte-level corpora and contiguous-block batching.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RngState, DATA_STREAM};

/// Vocabulary of the byte tokenizer.
pub const BYTE_VOCAB: usize = 256;

/// Maps each byte to the token id of the same value.
pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`tokenize_bytes`]. Ids outside the byte range are rejected.
pub fn detokenize(tokens: &[usize]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::IndexOutOfRange {
                what: "byte vocabulary",
                index: t,
                size: BYTE_VOCAB,
            })
        })
        .collect()
}

/// Where a file landed in the concatenated token stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub path: PathBuf,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
    pub vocab_size: usize,
    pub sources: Vec<SourceFile>,
}

impl Corpus {
    pub fn from_tokens(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::IndexOutOfRange {
                what: "vocabulary",
                index: bad,
                size: vocab_size,
            });
        }
        Ok(Self {
            tokens,
            vocab_size,
            sources: Vec::new(),
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self {
            tokens: tokenize_bytes(bytes),
            vocab_size: BYTE_VOCAB,
            sources: Vec::new(),
        }
    }

    /// Reads and concatenates `paths` in order.
    pub fn load(paths: &[PathBuf]) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut sources = Vec::with_capacity(paths.len());
        for path in paths {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            sources.push(SourceFile {
                path: path.clone(),
                offset: tokens.len(),
                len: bytes.len(),
            });
            tokens.extend(tokenize_bytes(&bytes));
        }
        Ok(Self {
            tokens,
            vocab_size: BYTE_VOCAB,
            sources,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Rows starting at each of `offsets`, wrapping at the end of the stream.
    pub fn batch_at(&self, offsets: &[usize], seq_len: usize) -> Result<Batch> {
        self.check_len(seq_len)?;
        let n = self.len();
        let mut inputs = Vec::with_capacity(offsets.len() * seq_len);
        let mut targets = Vec::with_capacity(offsets.len() * seq_len);
        for &o in offsets {
            for t in 0..seq_len {
                inputs.push(self.tokens[(o + t) % n]);
                targets.push(self.tokens[(o + t + 1) % n]);
            }
        }
        Ok(Batch {
            inputs,
            targets,
            batch: offsets.len(),
            seq_len,
            offsets: offsets.to_vec(),
        })
    }

    /// `batch` rows at uniformly drawn offsets.
    pub fn next_batch(&self, batch: usize, seq_len: usize, rng: &mut impl Rng) -> Result<Batch> {
        self.check_len(seq_len)?;
        let offsets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.len())).collect();
        self.batch_at(&offsets, seq_len)
    }

    /// Training batch for `step`: offsets come from the data stream at that
    /// counter, so batches do not depend on what ran before.
    pub fn batch_for_step(&self, batch: usize, seq_len: usize, seed: u64, step: u64) -> Result<Batch> {
        self.next_batch(batch, seq_len, &mut RngState::at(seed, step).stream(DATA_STREAM))
    }

    /// Non-overlapping blocks covering the stream front to back, without
    /// wraparound; the tail shorter than one block is dropped.
    pub fn sequential_blocks(&self, batch: usize, seq_len: usize) -> Result<Vec<Batch>> {
        self.check_len(seq_len)?;
        let offsets: Vec<usize> = (0..(self.len() - 1) / seq_len).map(|i| i * seq_len).collect();
        offsets.chunks(batch.max(1)).map(|c| self.batch_at(c, seq_len)).collect()
    }

    fn check_len(&self, seq_len: usize) -> Result<()> {
        if self.len() < seq_len + 1 {
            return Err(Error::CorpusTooSmall {
                len: self.len(),
                needed: seq_len + 1,
            });
        }
        Ok(())
    }
}

/// `[B, L]` inputs with next-token targets, both row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
    pub offsets: Vec<usize>,
}

impl Batch {
    pub fn tokens(&self) -> usize {
        self.inputs.len()
    }
}

/// Splits off the last `⌈val_fraction·len⌉` tokens as validation. Each side
/// must hold at least one `seq_len + 1` block.
pub fn split_corpus(corpus: &Corpus, val_fraction: f64, seq_len: usize) -> Result<(Corpus, Corpus)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config(format!("val_fraction must be in (0, 1), got {val_fraction}")));
    }
    let n = corpus.len();
    let block = seq_len + 1;
    if n < 2 * block {
        return Err(Error::CorpusTooSmall { len: n, needed: 2 * block });
    }
    let n_val = (val_fraction * n as f64).ceil() as usize;
    let n_train = n - n_val;
    if n_val < block || n_train < block {
        return Err(Error::CorpusTooSmall {
            len: n_val.min(n_train),
            needed: block,
        });
    }
    let part = |range: std::ops::Range<usize>| Corpus {
        tokens: corpus.tokens[range].to_vec(),
        vocab_size: corpus.vocab_size,
        sources: corpus.sources.clone(),
    };
    Ok((part(0..n_train), part(n_train..n)))
}

/// Deterministic pseudo-text: words drawn from a fixed vocabulary with a
/// skewed distribution, `len` bytes long.
pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    const WORDS: &[&str] = &[
        "the", "of", "and", "a", "to", "in", "is", "that", "for", "it", "as", "was", "with", "be", "by", "on",
        "not", "he", "this", "are", "or", "his", "from", "at", "which", "but", "have", "an", "had", "they",
        "you", "were", "their", "one", "all", "we", "can", "her", "has", "there", "been", "if", "more", "when",
        "will", "would", "who", "so", "no", "model", "layer", "latent", "signal", "river", "stone", "light",
        "number", "garden", "window", "theory", "market", "winter", "machine", "letter", "history", "energy",
    ];
    let mut rng = RngState::new(seed).stream(DATA_STREAM);
    let mut out = Vec::with_capacity(len + 16);
    let mut since_stop = 0;
    while out.len() < len {
        // squaring a uniform favours the frequent words at the front
        let u: f64 = rng.random();
        let w = WORDS[((u * u) * WORDS.len() as f64) as usize];
        if since_stop == 0 {
            let mut cs = w.chars();
            if let Some(c) = cs.next() {
                out.extend(c.to_uppercase().to_string().bytes());
                out.extend(cs.as_str().bytes());
            }
        } else {
            out.extend(w.bytes());
        }
        since_stop += 1;
        if since_stop > 4 && rng.random::<f64>() < 0.15 {
            out.extend(b".\n");
            since_stop = 0;
        } else {
            out.push(b' ');
        }
    }
    out.truncate(len);
    out
}

/// Writes [`synthetic_text`] to `path` and returns the path.
pub fn write_synthetic_corpus(path: &Path, len: usize, seed: u64) -> Result<PathBuf> {
    std::fs::write(path, synthetic_text(len, seed)).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}
