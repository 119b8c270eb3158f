use std::path::Path;

use crate::error::{Error, Result};
use crate::projection::streams;
use crate::tensor::RngStream;

/// Byte-level token stream over a vocabulary of at most 256 ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    tokens: Vec<u8>,
    vocab: usize,
}

impl Corpus {
    /// Maps bytes to ids by descending frequency (ties by byte value). When
    /// the text has more distinct bytes than `vocab`, the last id is an
    /// unknown-byte bucket.
    pub fn from_bytes(bytes: &[u8], vocab: usize) -> Result<Self> {
        if !(2..=256).contains(&vocab) {
            return Err(Error::Config(format!("vocab must be in 2..=256, got {vocab}")));
        }
        if bytes.len() < 2 {
            return Err(Error::Config("corpus needs at least two bytes".into()));
        }
        let mut counts = [0usize; 256];
        for &b in bytes {
            counts[b as usize] += 1;
        }
        let mut ranked: Vec<usize> = (0..256).filter(|&b| counts[b] > 0).collect();
        ranked.sort_by_key(|&b| (std::cmp::Reverse(counts[b]), b));
        let unk = vocab - 1;
        let keep = if ranked.len() <= vocab { ranked.len() } else { vocab - 1 };
        let mut table = [unk as u8; 256];
        for (id, &b) in ranked.iter().take(keep).enumerate() {
            table[b] = id as u8;
        }
        Ok(Self {
            tokens: bytes.iter().map(|&b| table[b as usize]).collect(),
            vocab,
        })
    }

    pub fn from_file(path: &Path, vocab: usize) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, vocab)
    }

    /// `len` bytes of word-level Markov text over a random lexicon.
    pub fn synthetic(vocab: usize, len: usize, seed: u64) -> Result<Self> {
        Self::from_bytes(&synthetic_text(len, seed), vocab)
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

const LEXICON: usize = 96;
const SUCCESSORS: [f64; 4] = [0.5, 0.25, 0.15, 0.1];

/// Lowercase words separated by spaces, sentences ended by ". ".
pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = RngStream::derived(seed, &[streams::DATA, 0x7e47]);
    let words: Vec<Vec<u8>> = (0..LEXICON)
        .map(|_| {
            let n = 1 + rng.below(7);
            (0..n).map(|_| b'a' + rng.below(26) as u8).collect()
        })
        .collect();
    let next: Vec<[usize; 4]> = (0..LEXICON)
        .map(|_| [0; 4].map(|_| rng.below(LEXICON)))
        .collect();
    let mut out = Vec::with_capacity(len + 16);
    let mut word = rng.below(LEXICON);
    let mut in_sentence = 0;
    while out.len() < len {
        out.extend_from_slice(&words[word]);
        in_sentence += 1;
        if in_sentence >= 4 && rng.uniform() < 0.2 {
            out.extend_from_slice(b". ");
            in_sentence = 0;
        } else {
            out.push(b' ');
        }
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut pick = SUCCESSORS.len() - 1;
        for (i, p) in SUCCESSORS.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        word = next[word][pick];
    }
    out.truncate(len);
    out
}
