//! Task heads on top of a pre-trained encoder: pairwise similarity with a
//! bag-of-signature side input, and compiler / optimization-level
//! classification. Both pool the encoder output by averaging over real
//! tokens and apply one linear layer with softmax.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{PairExample, TokenSequence, ToolchainExample, ToolchainTask};
use crate::encoder::{
    clip_grad_norm, linear, linear_backward, mean_rows, mean_rows_backward, read_tensors, softmax,
    write_tensors, Adam, Checkpoint, EncoderModel, Grads, LinearSchedule, Mat, OptimizerConfig, ParamStore,
    GRAD_CHUNKS,
};
use crate::error::{Error, Result};
use crate::metrics::{confusion, report_by_pair, roc_auc, summarize, GroupedPrediction, MetricsReport, PairReport};
use crate::rng;

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Fine-tuning task: pairwise similarity or one of the toolchain
/// classifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Binsim,
    Compiler,
    Optlevel,
    OptlevelGcc,
    OptlevelClang,
}

impl TaskKind {
    pub fn toolchain(&self) -> Option<ToolchainTask> {
        match self {
            TaskKind::Binsim => None,
            TaskKind::Compiler => Some(ToolchainTask::Compiler),
            TaskKind::Optlevel => Some(ToolchainTask::Optlevel),
            TaskKind::OptlevelGcc => Some(ToolchainTask::OptlevelGcc),
            TaskKind::OptlevelClang => Some(ToolchainTask::OptlevelClang),
        }
    }

    pub fn classes(&self) -> Vec<String> {
        match self.toolchain() {
            Some(t) => t.classes(),
            None => vec!["dissimilar".into(), "similar".into()],
        }
    }
}

impl From<ToolchainTask> for TaskKind {
    fn from(t: ToolchainTask) -> Self {
        match t {
            ToolchainTask::Compiler => TaskKind::Compiler,
            ToolchainTask::Optlevel => TaskKind::Optlevel,
            ToolchainTask::OptlevelGcc => TaskKind::OptlevelGcc,
            ToolchainTask::OptlevelClang => TaskKind::OptlevelClang,
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "binsim" {
            return Ok(TaskKind::Binsim);
        }
        s.parse::<ToolchainTask>().map(Into::into)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.toolchain() {
            Some(t) => t.fmt(f),
            None => f.write_str("binsim"),
        }
    }
}

fn linear_params(d_in: usize, d_out: usize, seed: u64) -> ParamStore {
    let mut ps = ParamStore::new();
    let mut r = rng::stream(seed, &[rng::tag::HEAD_INIT]);
    ps.add_normal(HEAD_WEIGHT, &[d_in, d_out], (1.0 / d_in as f64).sqrt(), &mut r);
    ps.add_zeros(HEAD_BIAS, &[d_out]);
    ps
}

fn check_linear(params: &ParamStore, d_in: usize, d_out: usize) -> Result<()> {
    let ok = params.len() == 2
        && params.by_name(HEAD_WEIGHT).is_some_and(|t| t.shape == [d_in, d_out])
        && params.by_name(HEAD_BIAS).is_some_and(|t| t.shape == [d_out])
        && params.id(HEAD_WEIGHT) == Some(0);
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!("head must hold {HEAD_WEIGHT} [{d_in}, {d_out}] and {HEAD_BIAS} [{d_out}]")))
    }
}

fn head_probs(params: &ParamStore, feat: &[f64]) -> Vec<f64> {
    let x = Mat::from_vec(1, feat.len(), feat.to_vec());
    softmax(linear(&x, params.get(0), params.get(1)).row(0))
}

/// Linear map from `[h_a, h_b, bos_sim]` (width `2·d_hidden + 1`) to two
/// classes; class 1 means similar.
#[derive(Clone, Debug, PartialEq)]
pub struct BinSimHead {
    pub params: ParamStore,
    pub d_hidden: usize,
}

impl BinSimHead {
    pub fn new(d_hidden: usize, seed: u64) -> Self {
        BinSimHead {
            params: linear_params(2 * d_hidden + 1, 2, seed),
            d_hidden,
        }
    }

    pub fn from_params(params: ParamStore, d_hidden: usize) -> Result<Self> {
        check_linear(&params, 2 * d_hidden + 1, 2)?;
        Ok(BinSimHead { params, d_hidden })
    }

    pub fn d_in(&self) -> usize {
        2 * self.d_hidden + 1
    }
}

/// Linear map from a function embedding to one of `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToolchainHead {
    pub params: ParamStore,
    pub d_hidden: usize,
    pub classes: Vec<String>,
}

impl ToolchainHead {
    pub fn new(d_hidden: usize, classes: Vec<String>, seed: u64) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Config(format!("a classifier needs at least 2 classes, got {}", classes.len())));
        }
        Ok(ToolchainHead {
            params: linear_params(d_hidden, classes.len(), seed),
            d_hidden,
            classes,
        })
    }

    pub fn from_params(params: ParamStore, d_hidden: usize, classes: Vec<String>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Config("a classifier needs at least 2 classes".into()));
        }
        check_linear(&params, d_hidden, classes.len())?;
        Ok(ToolchainHead {
            params,
            d_hidden,
            classes,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskHead {
    BinSim(BinSimHead),
    Toolchain(ToolchainHead),
}

impl TaskHead {
    pub fn params(&self) -> &ParamStore {
        match self {
            TaskHead::BinSim(h) => &h.params,
            TaskHead::Toolchain(h) => &h.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            TaskHead::BinSim(h) => &mut h.params,
            TaskHead::Toolchain(h) => &mut h.params,
        }
    }

    pub fn classes(&self) -> Vec<String> {
        match self {
            TaskHead::BinSim(_) => TaskKind::Binsim.classes(),
            TaskHead::Toolchain(h) => h.classes.clone(),
        }
    }
}

fn check_width(model: &EncoderModel, d_hidden: usize) -> Result<()> {
    if model.cfg.d_hidden != d_hidden {
        return Err(Error::Shape(format!(
            "head expects d_hidden {d_hidden}, encoder has {}",
            model.cfg.d_hidden
        )));
    }
    Ok(())
}

/// Class probabilities `[dissimilar, similar]` of a function pair.
pub fn binsim_logits(
    model: &EncoderModel,
    head: &BinSimHead,
    a: &TokenSequence,
    b: &TokenSequence,
    bos_sim: f64,
) -> Result<[f64; 2]> {
    check_width(model, head.d_hidden)?;
    let mut feat = model.embed_function(a)?;
    feat.extend(model.embed_function(b)?);
    feat.push(bos_sim);
    let p = head_probs(&head.params, &feat);
    Ok([p[0], p[1]])
}

/// Class probabilities of one function.
pub fn toolchain_logits(model: &EncoderModel, head: &ToolchainHead, x: &TokenSequence) -> Result<Vec<f64>> {
    check_width(model, head.d_hidden)?;
    Ok(head_probs(&head.params, &model.embed_function(x)?))
}

// ---------------------------------------------------------------------------
// Fine-tuning

/// Train and validation examples of one task.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskData {
    BinSim {
        train: Vec<PairExample>,
        valid: Vec<PairExample>,
    },
    Toolchain {
        task: ToolchainTask,
        classes: Vec<String>,
        train: Vec<ToolchainExample>,
        valid: Vec<ToolchainExample>,
    },
}

impl TaskData {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskData::BinSim { .. } => TaskKind::Binsim,
            TaskData::Toolchain { task, .. } => (*task).into(),
        }
    }

    pub fn classes(&self) -> Vec<String> {
        match self {
            TaskData::BinSim { .. } => TaskKind::Binsim.classes(),
            TaskData::Toolchain { classes, .. } => classes.clone(),
        }
    }

    pub fn train_len(&self) -> usize {
        match self {
            TaskData::BinSim { train, .. } => train.len(),
            TaskData::Toolchain { train, .. } => train.len(),
        }
    }

    /// SHA-256 over the JSONL rendering of the training examples.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        match self {
            TaskData::BinSim { train, .. } => {
                for e in train {
                    h.update(serde_json::to_string(e)?.as_bytes());
                    h.update(b"\n");
                }
            }
            TaskData::Toolchain { train, .. } => {
                for e in train {
                    h.update(serde_json::to_string(e)?.as_bytes());
                    h.update(b"\n");
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    fn examples(&self, valid: bool) -> Vec<Example<'_>> {
        match self {
            TaskData::BinSim { train, valid: v } => {
                (if valid { v } else { train }).iter().map(Example::Pair).collect()
            }
            TaskData::Toolchain { train, valid: v, .. } => {
                (if valid { v } else { train }).iter().map(Example::Single).collect()
            }
        }
    }

    /// Checks labels against the classes and ids against the encoder.
    pub fn validate(&self, model: &EncoderModel) -> Result<()> {
        let n_classes = self.classes().len();
        for (split, valid) in [("train", false), ("valid", true)] {
            for (i, ex) in self.examples(valid).iter().enumerate() {
                if ex.label() >= n_classes {
                    return Err(Error::Dataset(format!(
                        "{split} example {i}: label {} outside {n_classes} classes",
                        ex.label()
                    )));
                }
                for s in ex.sequences() {
                    if s.true_len > model.cfg.max_seq {
                        return Err(Error::SequenceTooLong {
                            len: s.true_len,
                            max_seq: model.cfg.max_seq,
                        });
                    }
                    if let Some(&id) = s.active().iter().find(|&&id| id as usize >= model.cfg.vocab_size) {
                        return Err(Error::TokenOutOfRange {
                            id,
                            vocab_size: model.cfg.vocab_size,
                        });
                    }
                }
                if let Example::Pair(p) = ex {
                    if !(0.0..=1.0).contains(&p.bos_sim) {
                        return Err(Error::Dataset(format!("{split} example {i}: bos_sim {} outside [0,1]", p.bos_sim)));
                    }
                }
            }
        }
        if self.train_len() == 0 {
            return Err(Error::Dataset("empty training set".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Example<'a> {
    Pair(&'a PairExample),
    Single(&'a ToolchainExample),
}

impl Example<'_> {
    fn label(&self) -> usize {
        match self {
            Example::Pair(p) => p.label as usize,
            Example::Single(s) => s.label,
        }
    }

    fn sequences(&self) -> Vec<&TokenSequence> {
        match self {
            Example::Pair(p) => vec![&p.a, &p.b],
            Example::Single(s) => vec![&s.x],
        }
    }
}

#[derive(Default)]
struct StepStats {
    loss_sum: f64,
    correct: usize,
    n: usize,
}

/// Loss of one example; with `grads`, accumulates the gradient of
/// `scale · CE` into the encoder and head gradients.
fn example_step(
    model: &EncoderModel,
    head: &ParamStore,
    ex: Example<'_>,
    dropout: Option<(u64, u64, u64)>,
    grads: Option<(&mut Grads, &mut Grads, f64, bool)>,
) -> Result<(f64, usize)> {
    let seqs = ex.sequences();
    let mut pooled = Vec::new();
    let mut caches = Vec::new();
    for (k, s) in seqs.iter().enumerate() {
        let mut r = dropout.map(|(seed, step, index)| {
            rng::stream(seed, &[rng::tag::FINETUNE_DROPOUT, step, 2 * index + k as u64])
        });
        let (hidden, cache) = model.forward_seq(s.active(), s.true_len, r.as_mut())?;
        pooled.extend(mean_rows(&hidden));
        caches.push((cache, hidden.rows));
    }
    if let Example::Pair(p) = ex {
        pooled.push(p.bos_sim);
    }
    let x = Mat::from_vec(1, pooled.len(), pooled);
    let logits = linear(&x, head.get(0), head.get(1));
    let probs = softmax(logits.row(0));
    let y = ex.label();
    let loss = -probs[y].max(f64::MIN_POSITIVE).ln();
    let pred = argmax(&probs);
    if let Some((genc, ghead, scale, backprop_encoder)) = grads {
        let mut dy = Mat::from_vec(1, probs.len(), probs.iter().map(|p| p * scale).collect());
        dy.row_mut(0)[y] -= scale;
        let (dw, db) = ghead.0.split_at_mut(1);
        let dx = linear_backward(&x, head.get(0), &dy, &mut dw[0], &mut db[0]);
        if backprop_encoder {
            let h = model.cfg.d_hidden;
            for (k, (cache, rows)) in caches.iter().enumerate() {
                let dout = mean_rows_backward(*rows, &dx.row(0)[k * h..(k + 1) * h]);
                model.backward_seq(cache, &dout, genc);
            }
        }
    }
    Ok((loss, usize::from(pred == y)))
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Per-epoch record of a fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub epoch: usize,
    pub step: usize,
    /// Mean training cross-entropy of the epoch.
    pub loss: f64,
    pub lr: f64,
    pub train_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid: Option<EvalReport>,
}

/// Metrics of a task head on a labeled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub n: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Binary F1 for pairs, macro-averaged F1 for classifiers.
    pub f1: f64,
    /// ROC AUC of the class-1 score for pairs and two-class tasks; the
    /// macro one-vs-rest average otherwise. Absent when a class is missing.
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub binary: Option<MetricsReport>,
    /// One-vs-rest metrics per class, in class order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_class: Vec<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub by_pair: Option<PairReport>,
}

/// Evaluates a head on labeled examples without dropout.
fn evaluate_examples(model: &EncoderModel, head: &TaskHead, kind: TaskKind, examples: &[Example<'_>]) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Dataset("no examples to evaluate".into()));
    }
    let outputs: Vec<(Vec<f64>, usize)> = examples
        .par_iter()
        .map(|ex| {
            let probs = match (head, ex) {
                (TaskHead::BinSim(h), Example::Pair(p)) => binsim_logits(model, h, &p.a, &p.b, p.bos_sim)?.to_vec(),
                (TaskHead::Toolchain(h), Example::Single(s)) => toolchain_logits(model, h, &s.x)?,
                _ => return Err(Error::Dataset("examples do not match the head's task".into())),
            };
            Ok((probs, ex.label()))
        })
        .collect::<Result<_>>()?;
    let n = outputs.len();
    let n_classes = head.classes().len();
    if let Some((_, y)) = outputs.iter().find(|(_, y)| *y >= n_classes) {
        return Err(Error::Dataset(format!("label {y} outside {n_classes} classes")));
    }
    let loss = outputs.iter().map(|(p, y)| -p[*y].max(f64::MIN_POSITIVE).ln()).sum::<f64>() / n as f64;
    let preds: Vec<usize> = outputs.iter().map(|(p, _)| predicted_class(p, kind)).collect();
    let accuracy = preds.iter().zip(&outputs).filter(|(p, (_, y))| *p == y).count() as f64 / n as f64;

    let one_vs_rest = |c: usize| -> Result<(MetricsReport, Option<f64>)> {
        let pairs: Vec<(u8, u8)> = preds
            .iter()
            .zip(&outputs)
            .map(|(&p, (_, y))| (u8::from(p == c), u8::from(*y == c)))
            .collect();
        let mut report = summarize(&confusion(&pairs)?);
        let scores: Vec<(f64, u8)> = outputs.iter().map(|(p, y)| (p[c], u8::from(*y == c))).collect();
        report.auc = roc_auc(&scores).ok();
        let auc = report.auc;
        Ok((report, auc))
    };

    if kind == TaskKind::Binsim {
        let (binary, auc) = one_vs_rest(1)?;
        let grouped: Vec<GroupedPrediction> = examples
            .iter()
            .zip(&outputs)
            .zip(&preds)
            .filter_map(|((ex, (p, y)), &pred)| match ex {
                Example::Pair(pair) if !pair.group.is_empty() => Some(GroupedPrediction {
                    group: pair.group.clone(),
                    label: pred as u8,
                    truth: *y as u8,
                    score: p[1],
                }),
                _ => None,
            })
            .collect();
        let by_pair = if grouped.is_empty() {
            None
        } else {
            Some(report_by_pair(&grouped, false)?)
        };
        return Ok(EvalReport {
            task: kind,
            n,
            loss,
            accuracy,
            f1: binary.f1,
            auc,
            binary: Some(binary),
            per_class: Vec::new(),
            by_pair,
        });
    }

    let mut per_class = Vec::with_capacity(n_classes);
    let mut aucs = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let (r, auc) = one_vs_rest(c)?;
        per_class.push(r);
        aucs.push(auc);
    }
    let f1 = per_class.iter().map(|r| r.f1).sum::<f64>() / n_classes as f64;
    let auc = if n_classes == 2 {
        aucs[1]
    } else {
        aucs.iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .map(|a| a.iter().sum::<f64>() / a.len() as f64)
    };
    Ok(EvalReport {
        task: kind,
        n,
        loss,
        accuracy,
        f1,
        auc,
        binary: None,
        per_class,
        by_pair: None,
    })
}

/// Class picked from probabilities: for pairs, similar iff `p1 ≥ 0.5`.
fn predicted_class(p: &[f64], kind: TaskKind) -> usize {
    if kind == TaskKind::Binsim {
        usize::from(p[1] >= 0.5)
    } else {
        argmax(p)
    }
}

pub fn evaluate_pairs(model: &EncoderModel, head: &BinSimHead, pairs: &[PairExample]) -> Result<EvalReport> {
    let ex: Vec<Example<'_>> = pairs.iter().map(Example::Pair).collect();
    evaluate_examples(model, &TaskHead::BinSim(head.clone()), TaskKind::Binsim, &ex)
}

pub fn evaluate_toolchain(
    model: &EncoderModel,
    head: &ToolchainHead,
    task: ToolchainTask,
    examples: &[ToolchainExample],
) -> Result<EvalReport> {
    let ex: Vec<Example<'_>> = examples.iter().map(Example::Single).collect();
    evaluate_examples(model, &TaskHead::Toolchain(head.clone()), task.into(), &ex)
}

/// Settings of a fine-tuning run that are recorded with its output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub task: TaskKind,
    pub classes: Vec<String>,
    pub dataset_hash: String,
    pub parent_checkpoint_hash: String,
    pub freeze_encoder: bool,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

/// A fine-tuned encoder with its task head.
#[derive(Clone, Debug)]
pub struct TaskCheckpoint {
    /// Encoder, vocabulary and pre-training log; the weights are the
    /// fine-tuned ones.
    pub base: Checkpoint,
    pub head: TaskHead,
    pub meta: TaskMeta,
    pub log: Vec<FinetuneLog>,
}

/// Fine-tunes a head (and the encoder unless `freeze_encoder`) with
/// cross-entropy. The parent checkpoint is left untouched.
pub fn finetune(
    parent: &Checkpoint,
    data: &TaskData,
    opt: &OptimizerConfig,
    freeze_encoder: bool,
    seed: u64,
) -> Result<TaskCheckpoint> {
    finetune_with(parent, data, opt, freeze_encoder, seed, |_| Ok(()))
}

/// [`finetune`] with a callback after every epoch.
pub fn finetune_with<F>(
    parent: &Checkpoint,
    data: &TaskData,
    opt: &OptimizerConfig,
    freeze_encoder: bool,
    seed: u64,
    mut on_epoch: F,
) -> Result<TaskCheckpoint>
where
    F: FnMut(&FinetuneLog) -> Result<()>,
{
    opt.validate()?;
    let mut model = parent.model.clone();
    data.validate(&model)?;
    let kind = data.kind();
    let h = model.cfg.d_hidden;
    let mut head = match data {
        TaskData::BinSim { .. } => TaskHead::BinSim(BinSimHead::new(h, seed)),
        TaskData::Toolchain { classes, .. } => TaskHead::Toolchain(ToolchainHead::new(h, classes.clone(), seed)?),
    };

    let mut enc_adam = Adam::new(&model.params, opt);
    let trainable: Vec<usize> = model.encoder_tensor_ids().collect();
    for id in 0..model.params.len() {
        // the masked-LM projection gets no gradient here and must not decay
        if freeze_encoder || !trainable.contains(&id) {
            enc_adam.freeze(id);
        }
    }
    let mut head_adam = Adam::new(head.params(), opt);

    let train = data.examples(false);
    let valid = data.examples(true);
    let steps_per_epoch = train.len().div_ceil(opt.batch_size);
    let schedule = LinearSchedule::new(opt, steps_per_epoch * opt.epochs);
    let mut log = Vec::with_capacity(opt.epochs);
    let mut step = 0usize;
    for epoch in 1..=opt.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::tag::FINETUNE, epoch as u64]));
        let mut stats = StepStats::default();
        let mut lr = 0.0;
        for batch in order.chunks(opt.batch_size) {
            lr = schedule.lr(step);
            let scale = 1.0 / batch.len() as f64;
            let chunk = batch.len().div_ceil(GRAD_CHUNKS).max(1);
            let parts: Vec<(Grads, Grads, StepStats)> = batch
                .par_chunks(chunk)
                .enumerate()
                .map(|(c, part)| {
                    let mut genc = if freeze_encoder { Grads(Vec::new()) } else { model.params.zero_grads() };
                    let mut ghead = head.params().zero_grads();
                    let mut s = StepStats::default();
                    for (k, &i) in part.iter().enumerate() {
                        let index = (c * chunk + k) as u64;
                        let (loss, correct) = example_step(
                            &model,
                            head.params(),
                            train[i],
                            Some((seed, step as u64, index)),
                            Some((&mut genc, &mut ghead, scale, !freeze_encoder)),
                        )?;
                        s.loss_sum += loss;
                        s.correct += correct;
                        s.n += 1;
                    }
                    Ok((genc, ghead, s))
                })
                .collect::<Result<_>>()?;
            let mut iter = parts.into_iter();
            let (mut genc, mut ghead, mut s) = iter.next().expect("non-empty batch");
            for (ge, gh, p) in iter {
                if !freeze_encoder {
                    genc.add(&ge);
                }
                ghead.add(&gh);
                s.loss_sum += p.loss_sum;
                s.correct += p.correct;
                s.n += p.n;
            }
            if !s.loss_sum.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: s.loss_sum,
                });
            }
            // clip the joint gradient of encoder and head
            let mut joint = Grads(genc.0.into_iter().chain(ghead.0).collect());
            clip_grad_norm(&mut joint, opt.clip_norm);
            let mut all = joint.0;
            let ghead = Grads(all.split_off(all.len() - 2));
            if !freeze_encoder {
                enc_adam.step(&mut model.params, &Grads(all), lr);
            }
            head_adam.step(head.params_mut(), &ghead, lr);
            stats.loss_sum += s.loss_sum;
            stats.correct += s.correct;
            stats.n += s.n;
            step += 1;
        }
        let valid_report = if valid.is_empty() {
            None
        } else {
            Some(evaluate_examples(&model, &head, kind, &valid)?)
        };
        let entry = FinetuneLog {
            epoch,
            step,
            loss: stats.loss_sum / stats.n.max(1) as f64,
            lr,
            train_accuracy: stats.correct as f64 / stats.n.max(1) as f64,
            valid: valid_report,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train accuracy {:.3}{}",
            entry.loss,
            entry.train_accuracy,
            entry
                .valid
                .as_ref()
                .map(|v| format!(" valid f1 {:.3}", v.f1))
                .unwrap_or_default()
        );
        on_epoch(&entry)?;
        log.push(entry);
    }

    let meta = TaskMeta {
        task: kind,
        classes: data.classes(),
        dataset_hash: data.hash()?,
        parent_checkpoint_hash: parent.content_hash()?,
        freeze_encoder,
        seed,
        optimizer: opt.clone(),
    };
    let mut base = parent.clone();
    base.model = model;
    Ok(TaskCheckpoint { base, head, meta, log })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    /// Probability of the similar class.
    pub score: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolchainPrediction {
    pub class: String,
    pub index: usize,
    pub probabilities: Vec<f64>,
}

impl TaskCheckpoint {
    pub fn model(&self) -> &EncoderModel {
        &self.base.model
    }

    /// Similarity score and label of a pair; a score of exactly 0.5 counts
    /// as similar.
    pub fn predict_pair(&self, a: &TokenSequence, b: &TokenSequence, bos_sim: f64) -> Result<PairPrediction> {
        let TaskHead::BinSim(head) = &self.head else {
            return Err(Error::Config(format!("checkpoint is a {} classifier, not binsim", self.meta.task)));
        };
        let p = binsim_logits(self.model(), head, a, b, bos_sim)?;
        Ok(PairPrediction {
            score: p[1],
            label: u8::from(p[1] >= 0.5),
        })
    }

    pub fn predict_toolchain(&self, x: &TokenSequence) -> Result<ToolchainPrediction> {
        let TaskHead::Toolchain(head) = &self.head else {
            return Err(Error::Config("checkpoint is a binsim model, not a classifier".into()));
        };
        let probabilities = toolchain_logits(self.model(), head, x)?;
        let index = argmax(&probabilities);
        Ok(ToolchainPrediction {
            class: head.classes[index].clone(),
            index,
            probabilities,
        })
    }

    pub fn evaluate_pairs(&self, pairs: &[PairExample]) -> Result<EvalReport> {
        let ex: Vec<Example<'_>> = pairs.iter().map(Example::Pair).collect();
        evaluate_examples(self.model(), &self.head, self.meta.task, &ex)
    }

    pub fn evaluate_toolchain(&self, examples: &[ToolchainExample]) -> Result<EvalReport> {
        let ex: Vec<Example<'_>> = examples.iter().map(Example::Single).collect();
        evaluate_examples(self.model(), &self.head, self.meta.task, &ex)
    }

    /// Writes the pre-training layout plus `head.bin`, `head.json`,
    /// `task.json` and `finetune_log.jsonl` into a new directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.base.save(dir)?;
        write_tensors(dir, "head", self.head.params())?;
        fs::write(dir.join("task.json"), serde_json::to_string_pretty(&self.meta)?)?;
        let mut text = String::new();
        for e in &self.log {
            text.push_str(&serde_json::to_string(e)?);
            text.push('\n');
        }
        fs::write(dir.join("finetune_log.jsonl"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let base = Checkpoint::load(dir)?;
        let tpath = dir.join("task.json");
        if !tpath.exists() {
            return Err(Error::MissingInput(tpath));
        }
        let meta: TaskMeta = serde_json::from_str(&fs::read_to_string(&tpath)?).map_err(|e| Error::Checkpoint {
            path: tpath.clone(),
            msg: e.to_string(),
        })?;
        let params = read_tensors(dir, "head")?;
        let h = base.model.cfg.d_hidden;
        let head = match meta.task {
            TaskKind::Binsim => TaskHead::BinSim(BinSimHead::from_params(params, h)?),
            _ => TaskHead::Toolchain(ToolchainHead::from_params(params, h, meta.classes.clone())?),
        };
        let lpath = dir.join("finetune_log.jsonl");
        let log = if lpath.exists() {
            fs::read_to_string(&lpath)?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).map_err(Error::from))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(TaskCheckpoint { base, head, meta, log })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Vocabulary, EOS, SOS};
    use crate::encoder::tests::toy_config;
    use crate::encoder::EncoderConfig;

    fn seq(body: &[u32], max_seq: usize) -> TokenSequence {
        let mut ids = vec![SOS];
        ids.extend_from_slice(body);
        ids.push(EOS);
        TokenSequence::from_active(ids, max_seq).unwrap()
    }

    fn toy_checkpoint(cfg: EncoderConfig) -> Checkpoint {
        let vocab = Vocabulary::from_counts((0..cfg.vocab_size - 5).map(|i| (format!("t{i}"), 100 - i as u64)));
        let model = EncoderModel::new(cfg, 3).unwrap();
        Checkpoint::new(model, OptimizerConfig::default(), 3, vocab, Vec::new())
    }

    fn zero(ps: &mut ParamStore) {
        for t in ps.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_heads_are_uniform() {
        let model = EncoderModel::new(toy_config(true), 1).unwrap();
        let mut bh = BinSimHead::new(4, 1);
        zero(&mut bh.params);
        let p = binsim_logits(&model, &bh, &seq(&[5, 6], 8), &seq(&[7], 8), 0.3).unwrap();
        assert_eq!(p, [0.5, 0.5]);
        let mut th = ToolchainHead::new(4, vec!["gcc".into(), "clang".into()], 1).unwrap();
        zero(&mut th.params);
        assert_eq!(toolchain_logits(&model, &th, &seq(&[5], 8)).unwrap(), vec![0.5, 0.5]);
        let th = ToolchainHead::new(4, vec!["a".into(), "b".into(), "c".into()], 2).unwrap();
        let p = toolchain_logits(&model, &th, &seq(&[5, 8], 8)).unwrap();
        assert_eq!(p.len(), 3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(ToolchainHead::new(4, vec!["a".into()], 0).is_err());
    }

    #[test]
    fn swapping_inputs_and_weight_blocks_is_symmetric() {
        let model = EncoderModel::new(toy_config(true), 5).unwrap();
        let head = BinSimHead::new(4, 9);
        // W rows 0..4 read h_a, rows 4..8 read h_b, row 8 reads bos_sim
        let mut swapped = head.clone();
        let (w, out) = (head.params.get(0), 2);
        let sw = swapped.params.get_mut(0);
        for r in 0..4 {
            for c in 0..out {
                sw[r * out + c] = w[(r + 4) * out + c];
                sw[(r + 4) * out + c] = w[r * out + c];
            }
        }
        let (a, b) = (seq(&[5, 6, 7], 8), seq(&[8, 6], 8));
        let p = binsim_logits(&model, &head, &a, &b, 0.7).unwrap();
        let q = binsim_logits(&model, &swapped, &b, &a, 0.7).unwrap();
        assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bos_weight_moves_similarity_monotonically() {
        let model = EncoderModel::new(toy_config(false), 5).unwrap();
        let mut head = BinSimHead::new(4, 9);
        let w = head.params.get_mut(0);
        w[8 * 2] = -2.0;
        w[8 * 2 + 1] = 2.0;
        let (a, b) = (seq(&[5, 6], 8), seq(&[7], 8));
        let ps: Vec<f64> = (0..=10)
            .map(|i| binsim_logits(&model, &head, &a, &b, i as f64 / 10.0).unwrap()[1])
            .collect();
        assert!(ps.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn cross_entropy_is_negative_log_true_class() {
        let model = EncoderModel::new(toy_config(true), 5).unwrap();
        let head = ToolchainHead::new(4, vec!["a".into(), "b".into(), "c".into()], 4).unwrap();
        let ex = ToolchainExample { x: seq(&[5, 6, 7], 8), label: 2 };
        let (loss, _) = example_step(&model, &head.params, Example::Single(&ex), None, None).unwrap();
        let p = toolchain_logits(&model, &head, &ex.x).unwrap();
        assert!((loss + p[2].ln()).abs() < 1e-12);
        // shifting all logits leaves the argmax alone
        let mut shifted = head.clone();
        shifted.params.get_mut(1).iter_mut().for_each(|b| *b += 3.0);
        let q = toolchain_logits(&model, &shifted, &ex.x).unwrap();
        assert_eq!(argmax(&p), argmax(&q));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let model = EncoderModel::new(toy_config(true), 5).unwrap();
        let head = BinSimHead::new(4, 2);
        let ex = PairExample {
            a: seq(&[5, 6, 7], 8),
            b: seq(&[8], 8),
            bos_sim: 0.4,
            label: 1,
            group: String::new(),
        };
        let mut genc = model.params.zero_grads();
        let mut ghead = head.params.zero_grads();
        example_step(&model, &head.params, Example::Pair(&ex), None, Some((&mut genc, &mut ghead, 1.0, true))).unwrap();
        let loss = |m: &EncoderModel, h: &ParamStore| example_step(m, h, Example::Pair(&ex), None, None).unwrap().0;
        // small step: ReLU kinks lie close to this initialization
        let eps = 1e-7;
        for ti in 0..2 {
            for j in 0..head.params.get(ti).len() {
                let (mut up, mut dn) = (head.params.clone(), head.params.clone());
                up.get_mut(ti)[j] += eps;
                dn.get_mut(ti)[j] -= eps;
                let num = (loss(&model, &up) - loss(&model, &dn)) / (2.0 * eps);
                assert!((num - ghead.0[ti][j]).abs() < 1e-7);
            }
        }
        let tok = model.params.id("embed.token").unwrap();
        for j in 5 * 4..9 * 4 {
            let (mut up, mut dn) = (model.clone(), model.clone());
            up.params.get_mut(tok)[j] += eps;
            dn.params.get_mut(tok)[j] -= eps;
            let num = (loss(&up, &head.params) - loss(&dn, &head.params)) / (2.0 * eps);
            let g = genc.0[tok][j];
            assert!((num - g).abs() < 1e-5 * g.abs().max(1.0), "{num} vs {g}");
        }
    }

    fn toy_pairs(n: usize) -> Vec<PairExample> {
        // similar pairs both contain token 8
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let a = if label == 1 { seq(&[5, 8, 6], 8) } else { seq(&[5, 6, 7], 8) };
                let b = if label == 1 { seq(&[8, 7], 8) } else { seq(&[6, 7, (5 + i % 3) as u32], 8) };
                PairExample {
                    a,
                    b,
                    bos_sim: 0.5,
                    label,
                    group: "(CO0,GO3)".into(),
                }
            })
            .collect()
    }

    fn fast_opt(epochs: usize) -> OptimizerConfig {
        OptimizerConfig {
            lr: 0.01,
            epochs,
            batch_size: 10,
            warmup_fraction: 0.0,
            ..OptimizerConfig::desk()
        }
    }

    #[test]
    fn separable_pairs_overfit_and_predict() {
        let parent = toy_checkpoint(toy_config(true));
        let data = TaskData::BinSim {
            train: toy_pairs(100),
            valid: toy_pairs(10),
        };
        let task = finetune(&parent, &data, &fast_opt(5), false, 1).unwrap();
        assert!(task.log.last().unwrap().train_accuracy >= 0.95, "{:?}", task.log);
        let v = task.log.last().unwrap().valid.as_ref().unwrap();
        assert!(v.auc.is_some() && v.by_pair.is_some());
        let same = seq(&[5, 8, 6], 8);
        let pred = task.predict_pair(&same, &same, 1.0).unwrap();
        assert_eq!(pred.label, 1);
        assert_eq!(pred.label == 1, pred.score >= 0.5);
        // determinism and the untouched parent
        let again = finetune(&parent, &data, &fast_opt(5), false, 1).unwrap();
        assert_eq!(again.log, task.log);
        assert_eq!(again.head, task.head);
        assert_eq!(parent.model, toy_checkpoint(toy_config(true)).model);
        assert_eq!(task.meta.parent_checkpoint_hash, parent.content_hash().unwrap());
    }

    #[test]
    fn frozen_encoder_is_bitwise_unchanged() {
        let parent = toy_checkpoint(toy_config(false));
        let data = TaskData::BinSim {
            train: toy_pairs(20),
            valid: vec![],
        };
        let task = finetune(&parent, &data, &fast_opt(2), true, 4).unwrap();
        assert_eq!(task.base.model.params, parent.model.params);
        assert_ne!(task.head, TaskHead::BinSim(BinSimHead::new(4, 4)));
    }

    #[test]
    fn zero_rate_keeps_validation_constant() {
        let parent = toy_checkpoint(toy_config(true));
        let data = TaskData::BinSim {
            train: toy_pairs(20),
            valid: toy_pairs(6),
        };
        let opt = OptimizerConfig { lr: 0.0, ..fast_opt(3) };
        let task = finetune(&parent, &data, &opt, false, 2).unwrap();
        let v: Vec<_> = task.log.iter().map(|e| e.valid.clone().unwrap()).collect();
        assert!(v.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn single_class_overfit_and_label_checks() {
        let parent = toy_checkpoint(toy_config(true));
        let classes = vec!["O0".to_string(), "O1".into(), "O3".into()];
        let train: Vec<_> = (0..12)
            .map(|i| ToolchainExample {
                x: seq(&[5 + (i % 4) as u32, 6], 8),
                label: 1,
            })
            .collect();
        let data = TaskData::Toolchain {
            task: ToolchainTask::Optlevel,
            classes: classes.clone(),
            train: train.clone(),
            valid: vec![],
        };
        let task = finetune(&parent, &data, &fast_opt(3), false, 0).unwrap();
        for ex in &train {
            let p = task.predict_toolchain(&ex.x).unwrap();
            assert_eq!(p.class, "O1");
            assert_eq!(p.probabilities.len(), 3);
            assert!(p.probabilities.iter().all(|&q| q <= p.probabilities[p.index]));
        }
        let bad = TaskData::Toolchain {
            task: ToolchainTask::Optlevel,
            classes,
            train: vec![ToolchainExample { x: seq(&[5], 8), label: 3 }],
            valid: vec![],
        };
        assert!(matches!(finetune(&parent, &bad, &fast_opt(1), false, 0), Err(Error::Dataset(_))));
        assert!(task.predict_pair(&seq(&[5], 8), &seq(&[5], 8), 0.0).is_err());
    }

    #[test]
    fn task_checkpoint_round_trip() {
        let parent = toy_checkpoint(toy_config(true));
        let data = TaskData::BinSim {
            train: toy_pairs(10),
            valid: toy_pairs(4),
        };
        let task = finetune(&parent, &data, &fast_opt(1), false, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        task.save(dir.path()).unwrap();
        let back = TaskCheckpoint::load(dir.path()).unwrap();
        assert_eq!(back.head, task.head);
        assert_eq!(back.meta, task.meta);
        assert_eq!(back.log, task.log);
        assert_eq!(back.base.model, task.base.model);
        assert_eq!("optlevel-gcc".parse::<TaskKind>().unwrap(), TaskKind::OptlevelGcc);
        assert_eq!(TaskKind::Binsim.to_string(), "binsim");
    }
}
