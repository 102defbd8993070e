//! Hashing word tokenizer with two reserved ids.

use crate::text::{fnv1a, word_tokens};

pub const BOS: usize = 0;
pub const SEP: usize = 1;
pub const RESERVED: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tokenizer {
    vocab_size: usize,
}

impl Tokenizer {
    /// `vocab_size` must exceed [`RESERVED`].
    pub fn new(vocab_size: usize) -> Option<Self> {
        (vocab_size > RESERVED).then_some(Self { vocab_size })
    }

    pub fn token_id(&self, word: &str) -> usize {
        RESERVED + (fnv1a(word.as_bytes()) % (self.vocab_size - RESERVED) as u64) as usize
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        word_tokens(text).iter().map(|w| self.token_id(w)).collect()
    }

    /// `[BOS] question [SEP] choice`, at most `max_len` ids. Question tokens
    /// are dropped from the end first, then choice tokens.
    pub fn encode_pair(&self, question: &str, choice: &str, max_len: usize) -> Vec<usize> {
        let q = self.encode(question);
        let mut c = self.encode(choice);
        let budget = max_len.saturating_sub(2);
        c.truncate(budget);
        let q_len = q.len().min(budget - c.len());
        let mut out = Vec::with_capacity(2 + q_len + c.len());
        out.push(BOS);
        out.extend_from_slice(&q[..q_len]);
        out.push(SEP);
        out.extend(c);
        out.truncate(max_len.max(1));
        out
    }
}
