//! Masked-LM objective and the pre-training loop.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, OptimizerConfig};
use super::masking::{mask_sequence, MLMBatch, MaskedSequence};
use super::model::{dropout_stream, EncoderModel};
use super::optim::{clip_grad_norm, Adam, LinearSchedule};
use super::params::Grads;
use super::tensor::{log_sum_exp, Mat};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::rng;

/// Upper bound on the number of gradient partial sums per batch. Rows are
/// split into this many contiguous chunks regardless of thread count, and
/// the partial sums are added in chunk order, so results are reproducible
/// bit for bit.
pub const GRAD_CHUNKS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Mean cross-entropy over all masked positions of the epoch.
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Fraction of masked positions predicted correctly.
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MlmStats {
    pub loss_sum: f64,
    pub masked: usize,
    pub correct: usize,
}

impl MlmStats {
    fn add(&mut self, o: &MlmStats) {
        self.loss_sum += o.loss_sum;
        self.masked += o.masked;
        self.correct += o.correct;
    }

    pub fn loss(&self) -> f64 {
        self.loss_sum / self.masked.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.masked.max(1) as f64
    }
}

/// Loss statistics of one masked row; with `grads`, also accumulates the
/// gradient of `scale · Σ CE`.
fn row_mlm(
    model: &EncoderModel,
    row: &MaskedSequence,
    drop: Option<&mut rand_chacha::ChaCha8Rng>,
    grads: Option<(&mut Grads, f64)>,
) -> Result<MlmStats> {
    let n = row.length;
    let masked: Vec<usize> = (0..n).filter(|&t| row.mask_positions[t]).collect();
    let mut stats = MlmStats::default();
    if masked.is_empty() {
        return Ok(stats);
    }
    let (hidden, cache) = model.forward_seq(&row.inputs[..n], n, drop)?;
    let mut hm = Mat::zeros(masked.len(), hidden.cols);
    for (i, &t) in masked.iter().enumerate() {
        hm.row_mut(i).copy_from_slice(hidden.row(t));
    }
    let logits = model.mlm_logits(&hm);
    let mut dlogits = Mat::zeros(logits.rows, logits.cols);
    for (i, &t) in masked.iter().enumerate() {
        let target = row.targets[t] as usize;
        let l = logits.row(i);
        let lse = log_sum_exp(l);
        stats.loss_sum += lse - l[target];
        stats.masked += 1;
        let best = (0..l.len())
            .max_by(|&a, &b| l[a].total_cmp(&l[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        stats.correct += usize::from(best == target);
        for (d, &v) in dlogits.row_mut(i).iter_mut().zip(l) {
            *d = (v - lse).exp();
        }
        dlogits.row_mut(i)[target] -= 1.0;
    }
    if let Some((g, scale)) = grads {
        dlogits.data.iter_mut().for_each(|v| *v *= scale);
        let dhm = model.mlm_backward(&hm, &dlogits, g);
        let mut dh = Mat::zeros(hidden.rows, hidden.cols);
        for (i, &t) in masked.iter().enumerate() {
            dh.row_mut(t).copy_from_slice(dhm.row(i));
        }
        model.backward_seq(&cache, &dh, g);
    }
    Ok(stats)
}

fn batch_rows(batch: &MLMBatch) -> Vec<MaskedSequence> {
    (0..batch.len())
        .map(|i| MaskedSequence {
            inputs: batch.inputs[i].clone(),
            targets: batch.targets[i].clone(),
            mask_positions: batch.mask_positions[i].clone(),
            length: batch.lengths[i],
        })
        .collect()
}

/// Mean cross-entropy over the masked positions of a batch, without
/// dropout.
pub fn mlm_loss(model: &EncoderModel, batch: &MLMBatch) -> Result<f64> {
    if batch.masked_count() == 0 {
        return Err(Error::NoMaskedPositions);
    }
    let stats = batch_stats(model, &batch_rows(batch))?;
    Ok(stats.loss())
}

fn batch_stats(model: &EncoderModel, rows: &[MaskedSequence]) -> Result<MlmStats> {
    let parts: Vec<MlmStats> = rows
        .par_iter()
        .map(|r| row_mlm(model, r, None, None))
        .collect::<Result<_>>()?;
    let mut total = MlmStats::default();
    parts.iter().for_each(|p| total.add(p));
    Ok(total)
}

/// Gradient of the batch-mean masked-LM loss. With `dropout = Some((seed,
/// step))` dropout masks come from per-row streams of that step.
pub fn mlm_loss_and_grads(
    model: &EncoderModel,
    batch: &MLMBatch,
    dropout: Option<(u64, u64)>,
) -> Result<(Grads, MlmStats)> {
    let rows = batch_rows(batch);
    grads_for_rows(model, &rows, dropout)
}

fn grads_for_rows(
    model: &EncoderModel,
    rows: &[MaskedSequence],
    dropout: Option<(u64, u64)>,
) -> Result<(Grads, MlmStats)> {
    let total: usize = rows.iter().map(|r| r.mask_positions.iter().filter(|&&m| m).count()).sum();
    if total == 0 {
        return Err(Error::NoMaskedPositions);
    }
    let scale = 1.0 / total as f64;
    let chunk = rows.len().div_ceil(GRAD_CHUNKS).max(1);
    let parts: Vec<(Grads, MlmStats)> = rows
        .par_chunks(chunk)
        .enumerate()
        .map(|(c, part)| {
            let mut g = model.params.zero_grads();
            let mut stats = MlmStats::default();
            for (k, row) in part.iter().enumerate() {
                let index = (c * chunk + k) as u64;
                let mut r = dropout.map(|(seed, step)| dropout_stream(seed, step, index));
                stats.add(&row_mlm(model, row, r.as_mut(), Some((&mut g, scale)))?);
            }
            Ok((g, stats))
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut grads, mut stats) = iter.next().expect("at least one chunk");
    for (g, s) in iter {
        grads.add(&g);
        stats.add(&s);
    }
    Ok((grads, stats))
}

/// Masked-LM loss and accuracy of `seqs` under a fixed evaluation mask.
pub fn evaluate_mlm(model: &EncoderModel, seqs: &[TokenSequence], seed: u64) -> Result<MlmStats> {
    let rows: Vec<MaskedSequence> = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = rng::stream(seed, &[rng::tag::EVAL_MASK, i as u64]);
            mask_sequence(s, model.cfg.mask_rate, model.cfg.vocab_size, &mut r)
        })
        .collect();
    let stats = batch_stats(model, &rows)?;
    if stats.masked == 0 {
        return Err(Error::NoMaskedPositions);
    }
    Ok(stats)
}

fn mask_rows(seqs: &[TokenSequence], cfg: &EncoderConfig, seed: u64, epoch: Option<u64>) -> Vec<MaskedSequence> {
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let mut tags = vec![rng::tag::MASK, i as u64];
            tags.extend(epoch);
            mask_sequence(s, cfg.mask_rate, cfg.vocab_size, &mut rng::stream(seed, &tags))
        })
        .collect()
}

/// Pre-trains a fresh encoder with the masked-LM objective. `on_epoch` runs
/// after every epoch with the current model and that epoch's log entry.
pub fn pretrain<F>(
    seqs: &[TokenSequence],
    cfg: &EncoderConfig,
    opt: &OptimizerConfig,
    seed: u64,
    mut on_epoch: F,
) -> Result<(EncoderModel, Vec<EpochLog>)>
where
    F: FnMut(&EncoderModel, &EpochLog) -> Result<()>,
{
    cfg.validate()?;
    opt.validate()?;
    if seqs.is_empty() {
        return Err(Error::Dataset("empty pre-training corpus".into()));
    }
    if let Some(s) = seqs.iter().find(|s| s.true_len > cfg.max_seq) {
        return Err(Error::SequenceTooLong {
            len: s.true_len,
            max_seq: cfg.max_seq,
        });
    }
    let mut model = EncoderModel::new(cfg.clone(), seed)?;
    let mut adam = Adam::new(&model.params, opt);
    let steps_per_epoch = seqs.len().div_ceil(opt.batch_size);
    let schedule = LinearSchedule::new(opt, steps_per_epoch * opt.epochs);
    let static_rows = (!opt.dynamic_masking).then(|| mask_rows(seqs, cfg, seed, None));

    let mut log = Vec::with_capacity(opt.epochs);
    let mut step = 0usize;
    for epoch in 1..=opt.epochs {
        let fresh;
        let rows = match &static_rows {
            Some(r) => r,
            None => {
                fresh = mask_rows(seqs, cfg, seed, Some(epoch as u64));
                &fresh
            }
        };
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::tag::SHUFFLE, epoch as u64]));
        let mut stats = MlmStats::default();
        let mut lr = 0.0;
        for batch in order.chunks(opt.batch_size) {
            lr = schedule.lr(step);
            let batch_rows: Vec<MaskedSequence> = batch.iter().map(|&i| rows[i].clone()).collect();
            match grads_for_rows(&model, &batch_rows, Some((seed, step as u64))) {
                Ok((mut grads, s)) => {
                    if !s.loss().is_finite() {
                        return Err(Error::Divergence {
                            epoch,
                            step,
                            loss: s.loss(),
                        });
                    }
                    clip_grad_norm(&mut grads, opt.clip_norm);
                    adam.step(&mut model.params, &grads, lr);
                    stats.add(&s);
                }
                Err(Error::NoMaskedPositions) => log::debug!("step {step}: batch without masked tokens"),
                Err(e) => return Err(e),
            }
            step += 1;
        }
        let entry = EpochLog {
            epoch,
            step,
            loss: stats.loss(),
            lr,
            accuracy: stats.accuracy(),
        };
        if !entry.loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step,
                loss: entry.loss,
            });
        }
        log::info!(
            "epoch {epoch}: loss {:.4} accuracy {:.3} lr {:.2e}",
            entry.loss,
            entry.accuracy,
            entry.lr
        );
        on_epoch(&model, &entry)?;
        log.push(entry);
    }
    Ok((model, log))
}
