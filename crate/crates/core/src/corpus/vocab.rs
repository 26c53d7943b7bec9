use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::normalizer::NormalizedFunction;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const SOS: u32 = 3;
pub const EOS: u32 = 4;
pub const NUM_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[MASK]", "[SOS]", "[EOS]"];

/// Token string to id bijection. Ids 0..5 are the special tokens; the rest
/// are assigned by descending frequency, ties broken lexicographically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build(nfs: &[NormalizedFunction]) -> Self {
        let counts = nfs
            .par_iter()
            .fold(HashMap::new, |mut acc: HashMap<&str, u64>, nf| {
                for t in &nf.tokens {
                    *acc.entry(t.as_str()).or_default() += 1;
                }
                acc
            })
            .reduce(HashMap::new, |mut a, b| {
                for (k, v) in b {
                    *a.entry(k).or_default() += v;
                }
                a
            });
        Self::from_counts(counts.into_iter().map(|(k, v)| (k.to_string(), v)))
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (String, u64)>) -> Self {
        let mut entries: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut cs = vec![0; NUM_SPECIAL];
        for (t, c) in entries {
            tokens.push(t);
            cs.push(c);
        }
        Self::from_parts(tokens, cs)
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            counts,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_SPECIAL
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id for `token`, `[UNK]` when absent.
    pub fn lookup(&self, token: &str) -> u32 {
        self.id_of(token).unwrap_or(UNK)
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, token: &str) -> u64 {
        self.id_of(token)
            .map(|i| self.counts[i as usize])
            .unwrap_or(0)
    }

    /// Non-special tokens with their counts, in id order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, u64)> {
        self.tokens
            .iter()
            .zip(&self.counts)
            .skip(NUM_SPECIAL)
            .map(|(t, c)| (t.as_str(), *c))
    }

    /// TSV form: one `token\tcount` line per id, specials first with count 0.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            let _ = writeln!(s, "{t}\t{c}");
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::schema(i + 1, "expected token<TAB>count"))?;
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|_| Error::schema(i + 1, format!("bad count {count:?}")))?;
            if i < NUM_SPECIAL {
                if tok != SPECIAL_TOKENS[i] || count != 0 {
                    return Err(Error::schema(
                        i + 1,
                        format!("expected {}\\t0", SPECIAL_TOKENS[i]),
                    ));
                }
            } else if SPECIAL_TOKENS.contains(&tok) {
                return Err(Error::schema(i + 1, format!("special token {tok} out of place")));
            }
            tokens.push(tok.to_string());
            counts.push(count);
        }
        if tokens.len() < NUM_SPECIAL {
            return Err(Error::schema(tokens.len() + 1, "missing special tokens"));
        }
        let vocab = Self::from_parts(tokens, counts);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::schema(0, "duplicate token in vocabulary"));
        }
        Ok(vocab)
    }

    /// Hex SHA-256 of the TSV form; ties checkpoints to datasets.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::nf;

    #[test]
    fn empty_corpus_has_only_specials() {
        let v = Vocabulary::build(&[]);
        assert_eq!(v.len(), NUM_SPECIAL);
        assert_eq!(v.to_tsv(), "[PAD]\t0\n[UNK]\t0\n[MASK]\t0\n[SOS]\t0\n[EOS]\t0\n");
    }

    #[test]
    fn counts_and_frequency_order() {
        let v = Vocabulary::build(&[nf(&["a", "b", "a"])]);
        assert_eq!(v.id_of("a"), Some(5));
        assert_eq!(v.id_of("b"), Some(6));
        assert_eq!(v.count("a"), 2);
        assert_eq!(v.count("b"), 1);
        // ties go lexicographic
        let v = Vocabulary::build(&[nf(&["z", "y", "x", "x"])]);
        let order: Vec<&str> = v.entries().map(|(t, _)| t).collect();
        assert_eq!(order, vec!["x", "y", "z"]);
    }

    #[test]
    fn tsv_round_trip_and_stable_hash() {
        let corpus = [nf(&["mov_reg8_reg8", "call_innerfunc", "mov_reg8_reg8"]), nf(&["ret"])];
        let v = Vocabulary::build(&corpus);
        let again = Vocabulary::from_tsv(&v.to_tsv()).unwrap();
        assert_eq!(v, again);
        assert_eq!(Vocabulary::build(&corpus).hash(), v.hash());
        for i in 0..v.len() as u32 {
            assert_eq!(v.id_of(v.token_of(i).unwrap()), Some(i));
        }
    }

    #[test]
    fn rejects_malformed_tsv() {
        assert!(Vocabulary::from_tsv("[PAD]\t0\n").is_err());
        assert!(Vocabulary::from_tsv("[UNK]\t0\n[PAD]\t0\n[MASK]\t0\n[SOS]\t0\n[EOS]\t0\n").is_err());
        let ok = "[PAD]\t0\n[UNK]\t0\n[MASK]\t0\n[SOS]\t0\n[EOS]\t0\n";
        assert!(Vocabulary::from_tsv(&format!("{ok}a\t1\na\t1\n")).is_err());
        assert!(Vocabulary::from_tsv(&format!("{ok}a\tx\n")).is_err());
    }
}
