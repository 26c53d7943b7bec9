use std::collections::BTreeMap;

use serde::Serialize;

use crate::ingest::FunctionRecord;
use crate::normalizer::NormalizedFunction;

/// Bag-of-signature key. Numeric constants and string literals live in
/// separate namespaces, so `72` and `"72"` never collide.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum BosKey {
    Const(i64),
    Str(String),
}

/// Multiset of a function's constants and string literals.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BosVector {
    entries: BTreeMap<BosKey, u32>,
}

impl BosVector {
    pub fn from_parts<'a>(
        consts: impl IntoIterator<Item = &'a i64>,
        strings: impl IntoIterator<Item = &'a String>,
    ) -> Self {
        let mut entries = BTreeMap::new();
        for &c in consts {
            *entries.entry(BosKey::Const(c)).or_insert(0) += 1;
        }
        for s in strings {
            *entries.entry(BosKey::Str(s.clone())).or_insert(0) += 1;
        }
        BosVector { entries }
    }

    pub fn of_normalized(nf: &NormalizedFunction) -> Self {
        Self::from_parts(&nf.bos_constants, &nf.bos_strings)
    }

    pub fn count(&self, key: &BosKey) -> u32 {
        self.entries.get(key).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of items (sum of counts).
    pub fn total(&self) -> u64 {
        self.entries.values().map(|&c| c as u64).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BosKey, u32)> {
        self.entries.iter().map(|(k, &c)| (k, c))
    }
}

pub fn extract_bos(f: &FunctionRecord) -> BosVector {
    BosVector::from_parts(&f.bos_constants, &f.bos_strings)
}

/// Cosine of the two count vectors over the union of keys; 0 when either
/// bag is empty.
pub fn bos_cosine(v: &BosVector, w: &BosVector) -> f64 {
    if v.is_empty() || w.is_empty() {
        return 0.0;
    }
    let dot: f64 = v
        .entries
        .iter()
        .map(|(k, &c)| c as f64 * w.count(k) as f64)
        .sum();
    let norm = |b: &BosVector| b.entries.values().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
    (dot / (norm(v) * norm(w))).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bag(consts: &[i64], strings: &[&str]) -> BosVector {
        let s: Vec<String> = strings.iter().map(|s| s.to_string()).collect();
        BosVector::from_parts(consts, &s)
    }

    #[test]
    fn counts_duplicates() {
        let v = bag(&[1, 0x12, 8, 8, 8], &["Hello"]);
        assert_eq!(v.count(&BosKey::Const(1)), 1);
        assert_eq!(v.count(&BosKey::Const(0x12)), 1);
        assert_eq!(v.count(&BosKey::Const(8)), 3);
        assert_eq!(v.count(&BosKey::Str("Hello".into())), 1);
        assert_eq!(v.len(), 4);
        assert_eq!(v.total(), 6);
    }

    #[test]
    fn worked_cosine() {
        let v = bag(&[1, 0x12, 8, 8, 8], &["Hello"]);
        let w = bag(&[0x12, 8, 8], &["Hello"]);
        let s = bos_cosine(&v, &w);
        // (1,1,3,1)·(0,1,2,1) = 8; |v| = sqrt 12, |w| = sqrt 6
        assert!((s - 8.0 / (12f64.sqrt() * 6f64.sqrt())).abs() < 1e-12);
        assert!((s - 0.943).abs() < 1e-3);
    }

    #[test]
    fn edge_cases() {
        let v = bag(&[1, 2, 2], &["a"]);
        assert!((bos_cosine(&v, &v) - 1.0).abs() < 1e-12);
        assert_eq!(bos_cosine(&v, &bag(&[3], &["b"])), 0.0);
        assert_eq!(bos_cosine(&v, &BosVector::default()), 0.0);
        assert_eq!(bos_cosine(&bag(&[72], &[]), &bag(&[], &["72"])), 0.0);
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in proptest::collection::vec(0i64..6, 0..12),
                                 b in proptest::collection::vec(0i64..6, 0..12)) {
            let (v, w) = (bag(&a, &[]), bag(&b, &[]));
            let s = bos_cosine(&v, &w);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s, bos_cosine(&w, &v));
        }
    }
}
