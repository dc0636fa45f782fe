//! Character vocabulary, fixed-length packing and seeded batching.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
const RESERVED: usize = 3;

/// Character table with reserved pad, mask and end-of-sequence ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub pad: u32,
    pub mask: u32,
    pub eos: u32,
    /// Characters in id order, starting after the reserved ids.
    pub chars: Vec<char>,
    #[serde(skip)]
    index: BTreeMap<char, u32>,
}

impl Vocab {
    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, (i + RESERVED) as u32)).collect();
        Self { pad: PAD_ID, mask: MASK_ID, eos: EOS_ID, chars, index }
    }

    /// Sorted unique characters of `corpus` plus the reserved ids.
    pub fn build(corpus: &str) -> Self {
        Self::from_chars(corpus.chars().collect::<BTreeSet<_>>().into_iter().collect())
    }

    pub fn size(&self) -> usize {
        self.chars.len() + RESERVED
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| self.index.get(&c).copied().ok_or_else(|| Error::Data(format!("character {c:?} is not in the vocabulary"))))
            .collect()
    }

    /// Reserved ids render as nothing (pad, eos) or `_` (mask).
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| match id {
                PAD_ID | EOS_ID => None,
                MASK_ID => Some('_'),
                id => self.chars.get(id as usize - RESERVED).copied(),
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let raw: Vocab = serde_json::from_str(json)?;
        if (raw.pad, raw.mask, raw.eos) != (PAD_ID, MASK_ID, EOS_ID) {
            return Err(Error::Data("vocabulary reserved ids differ from pad=0, mask=1, eos=2".into()));
        }
        let v = Self::from_chars(raw.chars);
        if v.index.len() != v.chars.len() {
            return Err(Error::Data("vocabulary lists a character twice".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_text(path)?)
    }
}

/// Reads a file, reporting a missing path as missing input.
pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(format!("{} not found", path.display())),
        _ => e.into(),
    })
}

/// Loads a corpus: one UTF-8 file, or every file of a directory in name order.
/// Each file is one document.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.is_file());
        files.sort();
        files.iter().map(|p| read_text(p)).collect()
    } else {
        Ok(vec![read_text(path)?])
    }
}

/// Splits a document into non-empty lines.
pub fn lines(text: &str) -> Vec<String> {
    text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned).collect()
}

/// Appends `eos` after each document, concatenates, and cuts into length-`len`
/// rows; the last row is padded.
pub fn pack_sequences(docs: &[Vec<u32>], len: usize) -> Result<Vec<Vec<u32>>> {
    if len == 0 {
        return Err(Error::Config("sequence length must be positive".into()));
    }
    let stream: Vec<u32> = docs.iter().flat_map(|d| d.iter().copied().chain([EOS_ID])).collect();
    Ok(stream
        .chunks(len)
        .map(|c| {
            let mut row = c.to_vec();
            row.resize(len, PAD_ID);
            row
        })
        .collect())
}

/// Fixed-length token rows with loss-eligibility flags (false on pad).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<Vec<u32>>,
    pub eligible: Vec<Vec<bool>>,
}

impl TokenBatch {
    pub fn new(tokens: Vec<Vec<u32>>) -> Self {
        let eligible = tokens.iter().map(|r| r.iter().map(|&t| t != PAD_ID).collect()).collect();
        Self { tokens, eligible }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Endless seeded batches: a fresh permutation each epoch, partial tail dropped.
pub struct BatchIterator {
    sequences: Vec<Vec<u32>>,
    batch: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl BatchIterator {
    pub fn new(sequences: Vec<Vec<u32>>, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || batch > sequences.len() {
            return Err(Error::Config(format!("batch size {batch} needs between 1 and {} sequences", sequences.len())));
        }
        let order = (0..sequences.len()).collect();
        let mut it = Self { sequences, batch, rng: ChaCha8Rng::seed_from_u64(seed), order, cursor: 0, epoch: 0 };
        it.order.shuffle(&mut it.rng);
        Ok(it)
    }

    /// Completed passes over the data.
    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

impl Iterator for BatchIterator {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        if self.cursor + self.batch > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let picked = &self.order[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        Some(TokenBatch::new(picked.iter().map(|&i| self.sequences[i].clone()).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_basics() {
        let v = Vocab::build("ab");
        assert_eq!(v.size(), 5);
        assert_eq!(Vocab::build("ba"), v);
        let text = "abba";
        assert_eq!(v.decode(&v.encode(text).unwrap()), text);
        assert!(matches!(v.encode("abc"), Err(Error::Data(_))));
        let back = Vocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.encode("ba").unwrap(), v.encode("ba").unwrap());
    }

    #[test]
    fn packing() {
        let rows = pack_sequences(&[vec![5, 6]], 4).unwrap();
        assert_eq!(rows, vec![vec![5, 6, EOS_ID, PAD_ID]]);
        let docs = vec![vec![3, 4, 5], vec![6], vec![7, 8, 9, 10]];
        let rows = pack_sequences(&docs, 3).unwrap();
        assert!(rows.iter().all(|r| r.len() == 3));
        let flat: Vec<u32> = rows.concat().into_iter().filter(|&t| t != PAD_ID).collect();
        let original: usize = docs.iter().map(Vec::len).sum();
        assert_eq!(flat.len(), original + docs.len());
        let unpacked: Vec<u32> = flat.into_iter().filter(|&t| t != EOS_ID).collect();
        assert_eq!(unpacked, docs.concat());
    }

    #[test]
    fn batches_are_seeded_epochs() {
        let seqs: Vec<Vec<u32>> = (0..10).map(|i| vec![i]).collect();
        let a: Vec<_> = BatchIterator::new(seqs.clone(), 3, 7).unwrap().take(6).collect();
        let b: Vec<_> = BatchIterator::new(seqs.clone(), 3, 7).unwrap().take(6).collect();
        assert_eq!(a, b);
        let epoch = |batches: &[TokenBatch]| {
            let mut ids: Vec<u32> = batches.iter().flat_map(|b| b.tokens.iter().map(|r| r[0])).collect();
            let n = ids.len();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), n);
            ids
        };
        epoch(&a[..3]);
        epoch(&a[3..]);
        let first: Vec<_> = a[..3].iter().map(|b| b.tokens.clone()).collect();
        let second: Vec<_> = a[3..].iter().map(|b| b.tokens.clone()).collect();
        assert_ne!(first, second);
        assert!(BatchIterator::new(seqs, 11, 0).is_err());
    }

    #[test]
    fn pad_is_ineligible() {
        let b = TokenBatch::new(vec![vec![4, EOS_ID, PAD_ID]]);
        assert_eq!(b.eligible[0], vec![true, true, false]);
    }
}
