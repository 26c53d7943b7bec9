//! Corpus preparation: size filtering, vocabulary, fixed-length id
//! sequences, corpus statistics, bags of signature and the labeled
//! fine-tuning datasets.

mod bos;
mod dataset;
mod sequence;
mod stats;
mod vocab;

pub use bos::{bos_cosine, extract_bos, BosKey, BosVector};
pub use dataset::{
    binary_root, make_pairs, make_toolchain, split, PairExample, ToolchainDataset,
    ToolchainExample, ToolchainTask, DEFAULT_SPLIT,
};
pub use sequence::{encode, TokenSequence};
pub use stats::{corpus_stats, RankFreq, StatsReport, Summary};
pub use vocab::{Vocabulary, EOS, MASK, NUM_SPECIAL, PAD, SOS, SPECIAL_TOKENS, UNK};

use crate::normalizer::NormalizedFunction;

/// Functions with at most this many instructions are too small to train on.
pub const MIN_TOKENS_EXCLUSIVE: usize = 5;
/// Functions with more instructions than this are dropped.
pub const MAX_TOKENS: usize = 250;

/// Keeps functions with `5 < len <= 250` instructions.
pub fn filter_functions(nfs: Vec<NormalizedFunction>) -> Vec<NormalizedFunction> {
    nfs.into_iter()
        .filter(|nf| nf.len() > MIN_TOKENS_EXCLUSIVE && nf.len() <= MAX_TOKENS)
        .collect()
}
