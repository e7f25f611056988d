//! Text ingestion: character vocabulary, encoding/decoding, batch windows.
//!
//! Tokenization is character-level. The vocabulary appends one distinguished
//! absorbing (mask) symbol past the real characters; clean data never
//! contains it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown character {ch:?} at position {pos}")]
    UnknownChar { ch: char, pos: usize },
    #[error("token id {id} out of range (size_augmented {size})")]
    IdOutOfRange { id: usize, size: usize },
    #[error("sequence length {seq_len} exceeds corpus length {corpus_len}")]
    SequenceTooLong { seq_len: usize, corpus_len: usize },
}

/// Character inventory plus the absorbing mask symbol.
///
/// `mask_id` is one past the last real symbol, so real ids live in
/// `[0, mask_id)` and the augmented vocabulary has `mask_id + 1` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    /// Printable stand-in for the mask symbol when decoding partially
    /// denoised sequences.
    pub mask_marker: char,
}

impl Vocabulary {
    /// Builds the vocabulary from a corpus: sorted distinct characters, mask
    /// symbol appended last.
    pub fn build(corpus_text: &str) -> Result<Self, CorpusError> {
        if corpus_text.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut symbols: Vec<char> = corpus_text.chars().collect();
        symbols.sort_unstable();
        symbols.dedup();
        Ok(Self { symbols, mask_marker: '_' })
    }

    /// Rebuilds a vocabulary from its symbol list (checkpoint restore).
    pub fn from_symbols(symbols: Vec<char>) -> Result<Self, CorpusError> {
        if symbols.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        Ok(Self { symbols, mask_marker: '_' })
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Id of the absorbing symbol: one past the last real symbol.
    pub fn mask_id(&self) -> usize {
        self.symbols.len()
    }

    /// Real symbols plus the mask symbol.
    pub fn size_augmented(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, CorpusError> {
        text.chars()
            .enumerate()
            .map(|(pos, ch)| {
                self.symbols
                    .binary_search(&ch)
                    .map_err(|_| CorpusError::UnknownChar { ch, pos })
            })
            .collect()
    }

    /// Decodes ids back to text; the mask id renders as [`Self::mask_marker`].
    pub fn decode(&self, ids: &[usize]) -> Result<String, CorpusError> {
        ids.iter()
            .map(|&id| {
                if id < self.symbols.len() {
                    Ok(self.symbols[id])
                } else if id == self.mask_id() {
                    Ok(self.mask_marker)
                } else {
                    Err(CorpusError::IdOutOfRange { id, size: self.size_augmented() })
                }
            })
            .collect()
    }
}

/// Deterministic stream of fixed-length training batches.
///
/// The corpus is cut into non-overlapping length-L windows whose order is
/// reshuffled every epoch from the seed; with `random_offset` each element is
/// instead an independent random crop. Identical (corpus, L, batch_size,
/// seed) always yields the identical stream.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    corpus: Vec<usize>,
    seq_len: usize,
    batch_size: usize,
    random_offset: bool,
    rng: ChaCha8Rng,
    window_order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(
        corpus: Vec<usize>,
        seq_len: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, CorpusError> {
        if seq_len == 0 || corpus.len() < seq_len {
            return Err(CorpusError::SequenceTooLong { seq_len, corpus_len: corpus.len() });
        }
        assert!(batch_size > 0, "batch_size must be positive");
        Ok(Self {
            corpus,
            seq_len,
            batch_size,
            random_offset: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            window_order: Vec::new(),
            cursor: 0,
        })
    }

    /// Switch from non-overlapping windows to independent random crops.
    pub fn with_random_offset(mut self, on: bool) -> Self {
        self.random_offset = on;
        self
    }

    /// Number of non-overlapping windows the corpus provides.
    pub fn window_count(&self) -> usize {
        self.corpus.len() / self.seq_len
    }

    fn next_sequence(&mut self) -> Vec<usize> {
        if self.random_offset {
            let start = self.rng.random_range(0..=self.corpus.len() - self.seq_len);
            return self.corpus[start..start + self.seq_len].to_vec();
        }
        if self.cursor == self.window_order.len() {
            self.window_order = (0..self.window_count()).collect();
            self.window_order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let w = self.window_order[self.cursor];
        self.cursor += 1;
        self.corpus[w * self.seq_len..(w + 1) * self.seq_len].to_vec()
    }

    /// Next batch of `batch_size` sequences.
    pub fn next_batch(&mut self) -> Vec<Vec<usize>> {
        (0..self.batch_size).map(|_| self.next_sequence()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_vocabulary_distinct_sorted() {
        let v = Vocabulary::build("abba").unwrap();
        assert_eq!(v.symbols(), &['a', 'b']);
        assert_eq!(v.mask_id(), 2);
        assert_eq!(v.size_augmented(), 3);
    }

    #[test]
    fn build_vocabulary_singleton() {
        let v = Vocabulary::build("z").unwrap();
        assert_eq!(v.symbols(), &['z']);
        assert_eq!(v.mask_id(), 1);
    }

    #[test]
    fn build_vocabulary_text8_style_alphabet() {
        // 26 letters + space, any order/multiplicity in the corpus.
        let corpus = "the quick brown fox jumps over the lazy dog";
        let v = Vocabulary::build(corpus).unwrap();
        assert_eq!(v.symbols().len(), 27);
        assert_eq!(v.mask_id(), 27);
    }

    #[test]
    fn build_vocabulary_rejects_empty() {
        assert!(matches!(Vocabulary::build(""), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocabulary::build("ab").unwrap();
        assert_eq!(v.encode("ab").unwrap(), vec![0, 1]);
        assert_eq!(v.decode(&[0, 1]).unwrap(), "ab");
    }

    #[test]
    fn decode_mask_renders_marker() {
        let v = Vocabulary::build("ab").unwrap();
        assert_eq!(v.decode(&[2]).unwrap(), "_");
    }

    #[test]
    fn encode_unknown_char_reports_position() {
        let v = Vocabulary::build("ab").unwrap();
        match v.encode("abxa") {
            Err(CorpusError::UnknownChar { ch: 'x', pos: 2 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let v = Vocabulary::build("ab").unwrap();
        assert!(v.decode(&[3]).is_err());
    }

    #[test]
    fn windows_are_contiguous_and_non_overlapping() {
        let v = Vocabulary::build("abcdef").unwrap();
        let ids = v.encode("abcdef").unwrap();
        let mut s = BatchSampler::new(ids, 3, 2, 0).unwrap();
        assert_eq!(s.window_count(), 2);
        let mut batch = s.next_batch();
        batch.sort();
        assert_eq!(
            batch,
            vec![v.encode("abc").unwrap(), v.encode("def").unwrap()]
        );
    }

    #[test]
    fn window_count_is_floor_of_corpus_over_len() {
        // 10 full windows plus a 37-char tail that must be dropped.
        let text: String = "abcdefgh".chars().cycle().take(256 * 10 + 37).collect();
        let v = Vocabulary::build(&text).unwrap();
        let ids = v.encode(&text).unwrap();
        let s = BatchSampler::new(ids, 256, 1, 0).unwrap();
        assert_eq!(s.window_count(), 10);
    }

    #[test]
    fn same_seed_yields_identical_stream() {
        let text: String = "abcdefgh".chars().cycle().take(800).collect();
        let v = Vocabulary::build(&text).unwrap();
        let ids = v.encode(&text).unwrap();
        let mut a = BatchSampler::new(ids.clone(), 16, 4, 7).unwrap();
        let mut b = BatchSampler::new(ids, 16, 4, 7).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn random_offset_stream_is_seeded_too() {
        let text: String = "abcdefgh".chars().cycle().take(300).collect();
        let v = Vocabulary::build(&text).unwrap();
        let ids = v.encode(&text).unwrap();
        let mut a = BatchSampler::new(ids.clone(), 16, 2, 9).unwrap().with_random_offset(true);
        let mut b = BatchSampler::new(ids, 16, 2, 9).unwrap().with_random_offset(true);
        assert_eq!(a.next_batch(), b.next_batch());
    }

    #[test]
    fn rejects_sequence_longer_than_corpus() {
        let v = Vocabulary::build("abc").unwrap();
        let ids = v.encode("abc").unwrap();
        assert!(BatchSampler::new(ids, 4, 1, 0).is_err());
    }

    #[test]
    fn batches_never_contain_mask() {
        let text: String = "abcdefgh".chars().cycle().take(400).collect();
        let v = Vocabulary::build(&text).unwrap();
        let ids = v.encode(&text).unwrap();
        let mask = v.mask_id();
        let mut s = BatchSampler::new(ids, 8, 4, 3).unwrap();
        for _ in 0..30 {
            for seq in s.next_batch() {
                assert!(seq.iter().all(|&id| id < mask));
            }
        }
    }
}
