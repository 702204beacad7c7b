//! Sparse `query [SEP] context` feature vectors.
//!
//! Layout of the feature space, with `S = |vocab| + oov_buckets`:
//!
//! | range          | meaning                                  |
//! |----------------|------------------------------------------|
//! | `[0, S)`       | query segment (vocab ids, then OOV hash) |
//! | `[S, 2S)`      | context segment                          |
//! | `2S`           | separator, always 1                      |
//! | `2S + 1`       | bias, always 1                           |

use crate::corpus::{Document, Query, Vocabulary};

pub const DEFAULT_OOV_BUCKETS: usize = 1 << 15;
pub const DEFAULT_HASH_SALT: u64 = 0x5eed_cafe_f00d_0001;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpace {
    vocab: Vocabulary,
    oov_buckets: usize,
    salt: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Query,
    Context,
}

impl FeatureSpace {
    pub fn new(vocab: Vocabulary, oov_buckets: usize, salt: u64) -> Self {
        assert!(oov_buckets >= 1, "at least one OOV bucket is required");
        FeatureSpace {
            vocab,
            oov_buckets,
            salt,
        }
    }

    pub fn with_defaults(vocab: Vocabulary) -> Self {
        Self::new(vocab, DEFAULT_OOV_BUCKETS, DEFAULT_HASH_SALT)
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn oov_buckets(&self) -> usize {
        self.oov_buckets
    }

    pub fn salt(&self) -> u64 {
        self.salt
    }

    pub fn segment_size(&self) -> usize {
        self.vocab.len() + self.oov_buckets
    }

    pub fn dim(&self) -> usize {
        2 * self.segment_size() + 2
    }

    pub fn separator_index(&self) -> usize {
        2 * self.segment_size()
    }

    pub fn bias_index(&self) -> usize {
        2 * self.segment_size() + 1
    }

    fn slot(&self, token: &str) -> usize {
        match self.vocab.get(token) {
            Some(i) => i,
            None => self.vocab.len() + (self.hash(token) % self.oov_buckets as u64) as usize,
        }
    }

    /// Salted FNV-1a.
    fn hash(&self, token: &str) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0100_0000_01b3;
        self.salt
            .to_le_bytes()
            .iter()
            .chain(token.as_bytes())
            .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
    }

    pub fn feature_index(&self, segment: Segment, token: &str) -> usize {
        match segment {
            Segment::Query => self.slot(token),
            Segment::Context => self.segment_size() + self.slot(token),
        }
    }

    pub fn encode_tokens<Q, C>(&self, query: &[Q], context: &[C]) -> InputVector
    where
        Q: AsRef<str>,
        C: AsRef<str>,
    {
        let mut idx: Vec<u32> = query
            .iter()
            .map(|t| self.feature_index(Segment::Query, t.as_ref()) as u32)
            .chain(
                context
                    .iter()
                    .map(|t| self.feature_index(Segment::Context, t.as_ref()) as u32),
            )
            .collect();
        idx.push(self.separator_index() as u32);
        idx.push(self.bias_index() as u32);
        idx.sort_unstable();
        idx.dedup();
        InputVector {
            entries: idx.into_iter().map(|i| (i, 1.0)).collect(),
        }
    }

    pub fn encode_pair(&self, query: &Query, doc: &Document) -> InputVector {
        self.encode_tokens(&query.tokens(), &doc.tokens)
    }
}

/// Sparse binary-presence vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct InputVector {
    entries: Vec<(u32, f64)>,
}

impl InputVector {
    /// Builds a vector from arbitrary entries, summing duplicate indices.
    pub fn from_entries(mut entries: Vec<(u32, f64)>) -> Self {
        entries.sort_by_key(|e| e.0);
        let mut out: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
        for (i, w) in entries {
            match out.last_mut() {
                Some(last) if last.0 == i => last.1 += w,
                _ => out.push((i, w)),
            }
        }
        InputVector { entries: out }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn max_index(&self) -> Option<u32> {
        self.entries.last().map(|e| e.0)
    }
}
