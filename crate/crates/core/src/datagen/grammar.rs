use rand::Rng;

use crate::seeding;

pub const MIN_TOKENS: usize = 5;
pub const MAX_TOKENS: usize = 12;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SPACE: usize = 14 * 5 * 14 * 5;

/// Successors per word in the bigram table.
const FAN_OUT: u64 = 6;

// CVCV words that also occur in captions or labels.
const RESERVED: &[&str] = &["tone", "male"];

pub(crate) const MAX_VOCAB: usize = SPACE - RESERVED.len();

fn cvcv(idx: usize) -> String {
    let c1 = CONSONANTS[idx / 350];
    let v1 = VOWELS[(idx / 70) % 5];
    let c2 = CONSONANTS[(idx / 5) % 14];
    let v2 = VOWELS[idx % 5];
    String::from_utf8(vec![c1, v1, c2, v2]).expect("ascii")
}

/// The first `size` transcript words. Prefixes agree across sizes.
pub fn transcript_vocabulary(size: usize) -> Vec<String> {
    // 37 is coprime to SPACE, so the walk visits every word once.
    (0..SPACE)
        .map(|i| cvcv((i * 37 + 11) % SPACE))
        .filter(|w| !RESERVED.contains(&w.as_str()))
        .take(size)
        .collect()
}

/// Bigram grammar: uniform start word, then a uniform pick among a fixed
/// hashed successor list. Lengths are uniform in `[MIN_TOKENS, MAX_TOKENS]`.
#[derive(Clone, Debug)]
pub struct TranscriptGrammar {
    words: Vec<String>,
}

impl TranscriptGrammar {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            words: transcript_vocabulary(vocab_size),
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn successor(&self, word: usize, j: u64) -> usize {
        (seeding::derive_path(0xB16_4A11, &[word as u64, j]) % self.words.len() as u64) as usize
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<String> {
        let n = rng.random_range(MIN_TOKENS..=MAX_TOKENS);
        let mut cur = rng.random_range(0..self.words.len());
        let mut out = Vec::with_capacity(n);
        out.push(self.words[cur].clone());
        for _ in 1..n {
            cur = self.successor(cur, rng.random_range(0..FAN_OUT));
            out.push(self.words[cur].clone());
        }
        out
    }
}
