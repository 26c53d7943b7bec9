use rand::Rng;

use super::config::EncoderConfig;
use crate::corpus::{TokenSequence, MASK, NUM_SPECIAL};

/// Target value at positions that are not predicted.
pub const NO_TARGET: u32 = u32::MAX;

/// Masked-LM inputs for a batch of padded sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct MLMBatch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    pub mask_positions: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
}

impl MLMBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask_positions.iter().flatten().filter(|&&m| m).count()
    }

    pub fn push(&mut self, row: MaskedSequence) {
        self.inputs.push(row.inputs);
        self.targets.push(row.targets);
        self.mask_positions.push(row.mask_positions);
        self.lengths.push(row.length);
    }

    pub fn from_rows(rows: impl IntoIterator<Item = MaskedSequence>) -> Self {
        let mut b = MLMBatch {
            inputs: Vec::new(),
            targets: Vec::new(),
            mask_positions: Vec::new(),
            lengths: Vec::new(),
        };
        rows.into_iter().for_each(|r| b.push(r));
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask_positions: Vec<bool>,
    pub length: usize,
}

/// Selects each regular-token position with probability `mask_rate`; a
/// selected token becomes `[MASK]` 80% of the time, a uniformly drawn
/// regular token 10%, and stays unchanged 10%. Special tokens are never
/// selected.
pub fn mask_sequence<R: Rng + ?Sized>(
    seq: &TokenSequence,
    mask_rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> MaskedSequence {
    let n = seq.ids.len();
    let mut inputs = seq.ids.clone();
    let mut targets = vec![NO_TARGET; n];
    let mut mask_positions = vec![false; n];
    for t in 0..seq.true_len {
        let id = seq.ids[t];
        if (id as usize) < NUM_SPECIAL || rng.random::<f64>() >= mask_rate {
            continue;
        }
        mask_positions[t] = true;
        targets[t] = id;
        let r = rng.random::<f64>();
        if r < 0.8 {
            inputs[t] = MASK;
        } else if r < 0.9 {
            inputs[t] = rng.random_range(NUM_SPECIAL as u32..vocab_size as u32);
        }
    }
    MaskedSequence {
        inputs,
        targets,
        mask_positions,
        length: seq.true_len,
    }
}

pub fn mask_batch<R: Rng + ?Sized>(seqs: &[TokenSequence], cfg: &EncoderConfig, rng: &mut R) -> MLMBatch {
    MLMBatch::from_rows(
        seqs.iter()
            .map(|s| mask_sequence(s, cfg.mask_rate, cfg.vocab_size, rng)),
    )
}
