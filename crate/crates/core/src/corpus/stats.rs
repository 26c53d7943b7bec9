use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::ingest::FunctionRecord;
use crate::normalizer::NormalizedFunction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankFreq {
    pub rank: usize,
    pub token: String,
    pub count: u64,
    pub ratio: f64,
    pub cumulative: f64,
}

/// Mean / median / population standard deviation of a sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Summary::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len().is_multiple_of(2) {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        } else {
            sorted[mid]
        };
        Summary {
            n: values.len(),
            mean,
            median,
            std: var.sqrt(),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub functions: usize,
    pub total_tokens: u64,
    pub distinct_tokens: usize,
    pub rank_freq: Vec<RankFreq>,
    /// Fraction of held-out token occurrences absent from the training
    /// vocabulary; `None` without a held-out split.
    pub oov_rate: Option<f64>,
    /// Instructions per function.
    pub if_stats: Summary,
    /// Basic blocks per function, when block ids are present.
    pub bf_stats: Option<Summary>,
    /// Instructions per basic block, when block ids are present.
    pub ib_stats: Option<Summary>,
}

pub fn corpus_stats(
    nfs: &[NormalizedFunction],
    records: &[FunctionRecord],
    heldout: Option<&[NormalizedFunction]>,
) -> StatsReport {
    let vocab = Vocabulary::build(nfs);
    let total: u64 = vocab.entries().map(|(_, c)| c).sum();
    let mut cumulative = 0u64;
    let rank_freq = vocab
        .entries()
        .enumerate()
        .map(|(i, (token, count))| {
            cumulative += count;
            RankFreq {
                rank: i + 1,
                token: token.to_string(),
                count,
                ratio: count as f64 / total as f64,
                cumulative: cumulative as f64 / total as f64,
            }
        })
        .collect();

    let oov_rate = heldout.map(|held| {
        let seen: HashSet<&str> = nfs.iter().flat_map(|f| f.tokens.iter().map(String::as_str)).collect();
        let (mut unseen, mut all) = (0u64, 0u64);
        for t in held.iter().flat_map(|f| f.tokens.iter()) {
            all += 1;
            if !seen.contains(t.as_str()) {
                unseen += 1;
            }
        }
        if all == 0 {
            0.0
        } else {
            unseen as f64 / all as f64
        }
    });

    let per_function: Vec<f64> = nfs.iter().map(|f| f.len() as f64).collect();

    let mut blocks_per_fn = Vec::new();
    let mut ins_per_block = Vec::new();
    for r in records {
        let mut sizes: BTreeMap<u64, usize> = BTreeMap::new();
        for ins in &r.instructions {
            if let Some(bb) = ins.basic_block_id {
                *sizes.entry(bb).or_default() += 1;
            }
        }
        if !sizes.is_empty() {
            blocks_per_fn.push(sizes.len() as f64);
            ins_per_block.extend(sizes.values().map(|&n| n as f64));
        }
    }
    let has_blocks = !blocks_per_fn.is_empty();

    StatsReport {
        functions: nfs.len(),
        total_tokens: total,
        distinct_tokens: nfs
            .iter()
            .flat_map(|f| f.tokens.iter())
            .collect::<BTreeSet<_>>()
            .len(),
        rank_freq,
        oov_rate,
        if_stats: Summary::of(&per_function),
        bf_stats: has_blocks.then(|| Summary::of(&blocks_per_fn)),
        ib_stats: has_blocks.then(|| Summary::of(&ins_per_block)),
    }
}
