use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::emotion::Emotion;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const SLOT_CONTENT: &str = "<content>";
pub const SLOT_DESC: &str = "<descriptor>";

pub const SPECIALS: [&str; 6] = [PAD, BOS, EOS, SEP, SLOT_CONTENT, SLOT_DESC];

pub const TASK_KEY: &str = "task:";
pub const CONTENT_KEY: &str = "content:";
pub const DESCRIPTOR_KEY: &str = "descriptor:";
pub const RESPONSE_KEY: &str = "response:";
pub const TRANSCRIPT_KEY: &str = "transcript:";
pub const EMOTION_KEY: &str = "emotion:";

const KEYWORDS: [&str; 6] = [TASK_KEY, CONTENT_KEY, DESCRIPTOR_KEY, RESPONSE_KEY, TRANSCRIPT_KEY, EMOTION_KEY];

/// Token-string ↔ id map. Ids are dense from 0: specials first, then the
/// template keywords, task names and emotion labels, then every other word
/// in sorted order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VocabError {
    #[error("duplicate token `{0}`")]
    Duplicate(String),
    #[error("vocabulary must start with the special tokens")]
    MissingSpecials,
}

impl Vocab {
    /// Builds the vocabulary over the fixed tokens plus `words`.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().chain(&KEYWORDS).map(|s| s.to_string()).collect();
        tokens.extend(super::Task::ALL.iter().map(|t| t.as_str().to_string()));
        tokens.extend(Emotion::ALL.iter().map(|e| e.as_str().to_string()));
        let fixed: BTreeSet<String> = tokens.iter().cloned().collect();
        let extra: BTreeSet<&str> = words.into_iter().filter(|w| !fixed.contains(*w)).collect();
        tokens.extend(extra.into_iter().map(str::to_string));
        Self::try_from(tokens).expect("fixed tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of a token that is always present (specials, keywords, labels).
    pub fn fixed(&self, token: &str) -> usize {
        self.index[token]
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    pub fn bos(&self) -> usize {
        self.fixed(BOS)
    }

    pub fn eos(&self) -> usize {
        self.fixed(EOS)
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = VocabError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(VocabError::MissingSpecials);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
