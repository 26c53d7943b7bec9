use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::vocab::{Vocabulary, EOS, PAD, SOS};
use crate::error::{Error, Result};

/// `[SOS] ids.. [EOS]` followed by `[PAD]` up to the model's maximum length.
///
/// Serialized as the array of non-PAD ids only; [`TokenSequence::pad_to`]
/// restores the fixed length after loading.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub true_len: usize,
}

impl TokenSequence {
    /// Builds a sequence from already framed ids (`SOS .. EOS`).
    pub fn from_active(active: Vec<u32>, max_seq: usize) -> Result<Self> {
        if active.len() > max_seq {
            return Err(Error::SequenceTooLong {
                len: active.len(),
                max_seq,
            });
        }
        let true_len = active.len();
        let mut s = TokenSequence {
            ids: active,
            true_len,
        };
        s.ids.resize(max_seq, PAD);
        Ok(s)
    }

    pub fn active(&self) -> &[u32] {
        &self.ids[..self.true_len]
    }

    pub fn max_seq(&self) -> usize {
        self.ids.len()
    }

    pub fn pad_to(mut self, max_seq: usize) -> Result<Self> {
        if self.true_len > max_seq {
            return Err(Error::SequenceTooLong {
                len: self.true_len,
                max_seq,
            });
        }
        self.ids.truncate(self.true_len);
        self.ids.resize(max_seq, PAD);
        Ok(self)
    }

    /// Instruction tokens between `[SOS]` and `[EOS]`.
    pub fn decode(&self, vocab: &Vocabulary) -> Vec<String> {
        let active = self.active();
        let inner = if active.len() >= 2 {
            &active[1..active.len() - 1]
        } else {
            &[]
        };
        inner
            .iter()
            .map(|&i| vocab.token_of(i).unwrap_or("[UNK]").to_string())
            .collect()
    }
}

/// `[SOS] + ids + [EOS]`, padded to `max_seq`. Unknown tokens map to `[UNK]`.
pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_seq: usize) -> Result<TokenSequence> {
    if tokens.len() + 2 > max_seq {
        return Err(Error::SequenceTooLong {
            len: tokens.len() + 2,
            max_seq,
        });
    }
    let mut ids = Vec::with_capacity(max_seq);
    ids.push(SOS);
    ids.extend(tokens.iter().map(|t| vocab.lookup(t.as_ref())));
    ids.push(EOS);
    TokenSequence::from_active(ids, max_seq)
}

impl Serialize for TokenSequence {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.active().serialize(s)
    }
}

impl<'de> Deserialize<'de> for TokenSequence {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let ids = Vec::<u32>::deserialize(d)?;
        if ids.len() < 2 || ids[0] != SOS || ids[ids.len() - 1] != EOS {
            return Err(serde::de::Error::custom(
                "token sequence must start with [SOS] and end with [EOS]",
            ));
        }
        let true_len = ids.len();
        Ok(TokenSequence { ids, true_len })
    }
}
