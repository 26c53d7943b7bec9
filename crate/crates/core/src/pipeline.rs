//! File-level pipeline stages behind the `binsem` command.
//!
//! Every stage reads and writes documented formats only, so the output of
//! one stage is valid input to the next:
//!
//! | stage          | input                                | output                                   |
//! |----------------|--------------------------------------|------------------------------------------|
//! | `ingest`       | record JSONL or listings + hints     | record JSONL                             |
//! | `normalize`    | record JSONL                         | normalized-function JSONL                |
//! | `vocab`        | normalized-function JSONL            | `vocab.tsv`                              |
//! | `stats`        | normalized-function JSONL            | stats JSON                               |
//! | `pretrain`     | normalized functions (+ vocabulary)  | checkpoint directory                     |
//! | `make-dataset` | normalized functions + vocabulary    | `train/valid/test.jsonl` + `.meta.json`  |
//! | `finetune`     | checkpoint + dataset directory       | task checkpoint directory                |
//! | `predict`      | task checkpoint + dataset JSONL      | prediction JSONL                         |
//! | `eval`         | task checkpoint + dataset JSONL      | report JSON (+ per-pair CSV)             |
//! | `embed`        | checkpoint + normalized functions    | embedding JSONL                          |
//! | `export-attn`  | checkpoint + normalized functions    | attention JSON                           |
//!
//! The resolved [`PipelineConfig`] is written next to every output.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    corpus_stats, encode, filter_functions, make_pairs, make_toolchain, split, PairExample, StatsReport,
    TokenSequence, ToolchainExample, Vocabulary, DEFAULT_SPLIT, NUM_SPECIAL,
};
use crate::encoder::{AttentionExport, Checkpoint, EncoderConfig, EpochLog, OptimizerConfig};
use crate::error::{Error, Result};
use crate::heads::{finetune_with, EvalReport, TaskCheckpoint, TaskData, TaskKind};
use crate::ingest::{
    parse_asm_text_with_warnings, read_records, write_records, Compiler, FunctionRecord, OptLevel, SectionKind,
    SectionMap,
};
use crate::normalizer::{normalize_function, NormMode, NormalizedFunction};

/// Name of the resolved configuration written into output directories.
pub const RESOLVED_CONFIG: &str = "pipeline_config.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub records: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub task_checkpoint: Option<PathBuf>,
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.records,
            &mut self.corpus,
            &mut self.vocab,
            &mut self.checkpoint,
            &mut self.dataset,
            &mut self.task_checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Fraction of positive pairs in a similarity dataset.
    pub ratio_pos: f64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            ratio_pos: 0.5,
            split: [DEFAULT_SPLIT.0, DEFAULT_SPLIT.1, DEFAULT_SPLIT.2],
        }
    }
}

/// Every tunable of the pipeline. Loaded from JSON, then overridden by
/// command-line flags; relative paths resolve against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub mode: NormMode,
    /// Drop functions outside the trainable size range when normalizing.
    pub filter: bool,
    /// `vocab_size` is taken from the vocabulary at pre-training time.
    pub encoder: EncoderConfig,
    pub pretrain: OptimizerConfig,
    pub finetune: OptimizerConfig,
    pub dataset: DatasetConfig,
    pub task: TaskKind,
    pub freeze_encoder: bool,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            mode: NormMode::Balanced,
            filter: true,
            encoder: EncoderConfig::default(),
            pretrain: OptimizerConfig::default(),
            finetune: OptimizerConfig::default(),
            dataset: DatasetConfig::default(),
            task: TaskKind::Binsim,
            freeze_encoder: false,
            paths: Paths::default(),
        }
    }
}

impl PipelineConfig {
    /// The CPU-sized profile.
    pub fn desk() -> Self {
        PipelineConfig {
            encoder: EncoderConfig::desk(0),
            pretrain: OptimizerConfig::desk(),
            finetune: OptimizerConfig::desk(),
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let mut cfg: PipelineConfig = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.paths.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Checks every field; the vocabulary size is checked later, once
    /// known.
    pub fn validate(&self) -> Result<()> {
        let mut enc = self.encoder.clone();
        if enc.vocab_size == 0 {
            enc.vocab_size = NUM_SPECIAL + 1;
        }
        enc.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let r = self.dataset.ratio_pos;
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!("dataset.ratio_pos {r} must lie in (0,1)")));
        }
        let s = self.dataset.split;
        if s.iter().any(|x| !(*x >= 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("dataset.split {s:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    /// Writes the resolved configuration next to an output: inside it for a
    /// directory, as `<file>.config.json` for a file.
    pub fn echo(&self, output: &Path) -> Result<PathBuf> {
        let target = if output.is_dir() {
            output.join(RESOLVED_CONFIG)
        } else {
            sidecar(output, "config.json")
        };
        fs::write(&target, serde_json::to_string_pretty(self)?)?;
        Ok(target)
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    require(path)?;
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::schema(i + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ingest

/// Section hints for listing ingestion, as JSON. Addresses may be numbers
/// or `"0x…"` strings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SectionHints {
    pub binary_id: String,
    pub testsuite: String,
    pub compiler: Option<Compiler>,
    pub opt_level: Option<OptLevel>,
    pub function_start: Option<HexAddr>,
    pub ranges: Vec<HintRange>,
    pub libc: Vec<String>,
    pub symbols: BTreeMap<String, String>,
    pub strings: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HintRange {
    pub start: HexAddr,
    pub end: HexAddr,
    /// One of `text`, `plt_got`, `bss`, `data`, `rodata_string`.
    pub kind: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HexAddr {
    Num(u64),
    #[serde(with = "hex_str")]
    Str(u64),
}

impl HexAddr {
    pub fn get(self) -> u64 {
        match self {
            HexAddr::Num(v) | HexAddr::Str(v) => v,
        }
    }
}

mod hex_str {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        parse_addr(&s).ok_or_else(|| serde::de::Error::custom(format!("bad address {s:?}")))
    }

    pub(super) fn parse_addr(s: &str) -> Option<u64> {
        match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
            Some(h) => u64::from_str_radix(h, 16).ok(),
            None => s.parse().ok(),
        }
    }
}

impl SectionHints {
    pub fn load(path: &Path) -> Result<Self> {
        require(path)?;
        serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn section_map(&self) -> Result<SectionMap> {
        let mut map = SectionMap::new().with_libc(self.libc.iter().cloned());
        for r in &self.ranges {
            let kind = match r.kind.as_str() {
                "text" => SectionKind::Text,
                "plt_got" => SectionKind::PltGot,
                "bss" => SectionKind::Bss,
                "data" => SectionKind::Data,
                "rodata_string" => SectionKind::RodataString,
                other => {
                    return Err(Error::UnknownLiteral {
                        what: "section kind",
                        literal: other.into(),
                    })
                }
            };
            map = map.with_range(r.start.get()..r.end.get(), kind);
        }
        let addr = |s: &str| {
            hex_str::parse_addr(s).ok_or_else(|| Error::Config(format!("bad address {s:?} in hints")))
        };
        for (a, name) in &self.symbols {
            map = map.with_symbol(addr(a)?, name);
        }
        for (a, text) in &self.strings {
            map = map.with_string(addr(a)?, text);
        }
        if let Some(a) = self.function_start {
            map = map.with_function_start(a.get());
        }
        Ok(map)
    }
}

fn is_jsonl(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "json"))
}

/// Reads record JSONL files as is and listings through the section hints,
/// and writes all records to one JSONL file.
pub fn ingest(inputs: &[PathBuf], hints: Option<&Path>, out: &Path) -> Result<Vec<FunctionRecord>> {
    let hints = hints.map(SectionHints::load).transpose()?;
    let mut records = Vec::new();
    for input in inputs {
        require(input)?;
        if is_jsonl(input) {
            records.extend(read_records(input)?);
            continue;
        }
        let h = hints
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{}: listings need --hints", input.display())))?;
        let (mut rec, warnings) = parse_asm_text_with_warnings(&fs::read_to_string(input)?, &h.section_map()?)?;
        for w in warnings {
            log::warn!("{}: {w}", input.display());
        }
        rec.binary_id = h.binary_id.clone();
        rec.testsuite = h.testsuite.clone();
        rec.compiler = h.compiler.clone().unwrap_or(Compiler::Other("unknown".into()));
        rec.opt_level = h.opt_level.unwrap_or(OptLevel::Unknown);
        if rec.function_name.is_empty() {
            rec.function_name = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        records.push(rec);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_records(BufWriter::new(fs::File::create(out)?), &records)?;
    Ok(records)
}

// ---------------------------------------------------------------------------
// corpus stages

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizeSummary {
    pub read: usize,
    pub written: usize,
    pub distinct_tokens: usize,
}

pub fn normalize(cfg: &PipelineConfig, input: &Path, out: &Path) -> Result<NormalizeSummary> {
    let records = read_records(input)?;
    let nfs = records
        .iter()
        .map(|r| normalize_function(r, cfg.mode))
        .collect::<Result<Vec<_>>>()?;
    let read = nfs.len();
    let nfs = if cfg.filter { filter_functions(nfs) } else { nfs };
    write_jsonl(out, &nfs)?;
    cfg.echo(out)?;
    Ok(NormalizeSummary {
        read,
        written: nfs.len(),
        distinct_tokens: Vocabulary::build(&nfs).len() - NUM_SPECIAL,
    })
}

pub fn read_corpus(path: &Path) -> Result<Vec<NormalizedFunction>> {
    read_jsonl(path)
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    require(path)?;
    Vocabulary::from_tsv(&fs::read_to_string(path)?)
}

pub fn vocab(corpus: &Path, out: &Path) -> Result<Vocabulary> {
    let v = Vocabulary::build(&read_corpus(corpus)?);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, v.to_tsv())?;
    Ok(v)
}

pub fn stats(corpus: &Path, records: Option<&Path>, heldout: Option<&Path>, out: &Path) -> Result<StatsReport> {
    let nfs = read_corpus(corpus)?;
    let recs = records.map(read_records).transpose()?.unwrap_or_default();
    let held = heldout.map(read_corpus).transpose()?;
    let report = corpus_stats(&nfs, &recs, held.as_deref());
    fs::write(out, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn encode_all(nfs: &[NormalizedFunction], vocab: &Vocabulary, max_seq: usize) -> Result<Vec<TokenSequence>> {
    nfs.iter().map(|f| encode(&f.tokens, vocab, max_seq)).collect()
}

/// Pre-trains on a corpus and writes the checkpoint after every epoch, so
/// an interrupted run leaves the last finished epoch behind.
pub fn pretrain(cfg: &PipelineConfig, corpus: &Path, vocab: Option<&Path>, out: &Path) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let nfs = read_corpus(corpus)?;
    let vocab = match vocab {
        Some(p) => read_vocab(p)?,
        None => Vocabulary::build(&nfs),
    };
    let mut enc = cfg.encoder.clone();
    if enc.vocab_size != 0 && enc.vocab_size != vocab.len() {
        log::warn!("encoder.vocab_size {} replaced by vocabulary size {}", enc.vocab_size, vocab.len());
    }
    enc.vocab_size = vocab.len();
    let seqs = encode_all(&nfs, &vocab, enc.max_seq)?;
    fs::create_dir_all(out)?;
    let mut log_so_far = Vec::new();
    let (model, log) = crate::encoder::pretrain(&seqs, &enc, &cfg.pretrain, cfg.seed, |model, entry| {
        log_so_far.push(entry.clone());
        Checkpoint::new(model.clone(), cfg.pretrain.clone(), cfg.seed, vocab.clone(), log_so_far.clone()).save(out)
    })?;
    Checkpoint::new(model, cfg.pretrain.clone(), cfg.seed, vocab, log.clone()).save(out)?;
    cfg.echo(out)?;
    Ok(log)
}

/// Provenance written next to each dataset file as `<file>.meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: TaskKind,
    pub classes: Vec<String>,
    pub vocab_hash: String,
    pub max_seq: usize,
    pub count: usize,
    pub class_counts: Vec<usize>,
    pub seed: u64,
}

pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "valid.jsonl", "test.jsonl"];

fn write_split<T: Serialize>(dir: &Path, name: &str, items: &[T], meta: &DatasetMeta) -> Result<()> {
    let path = dir.join(name);
    write_jsonl(&path, items)?;
    fs::write(sidecar(&path, "meta.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Builds the labeled dataset of `task` and writes its three splits into
/// `out`.
pub fn make_dataset(cfg: &PipelineConfig, corpus: &Path, vocab_path: &Path, out: &Path) -> Result<Vec<DatasetMeta>> {
    cfg.validate()?;
    let nfs = read_corpus(corpus)?;
    let vocab = read_vocab(vocab_path)?;
    let max_seq = cfg.encoder.max_seq;
    let s = cfg.dataset.split;
    let ratios = (s[0], s[1], s[2]);
    fs::create_dir_all(out)?;
    let task = cfg.task;
    let mut metas = Vec::new();
    let meta = |count: usize, class_counts: Vec<usize>| DatasetMeta {
        task,
        classes: task.classes(),
        vocab_hash: vocab.hash(),
        max_seq,
        count,
        class_counts,
        seed: cfg.seed,
    };
    match task.toolchain() {
        None => {
            let pairs = make_pairs(&nfs, &vocab, max_seq, cfg.dataset.ratio_pos, cfg.seed)?;
            let (a, b, c) = split(&pairs, ratios, cfg.seed)?;
            for (name, part) in SPLIT_FILES.iter().zip([a, b, c]) {
                let pos = part.iter().filter(|p| p.label == 1).count();
                let m = meta(part.len(), vec![part.len() - pos, pos]);
                write_split(out, name, &part, &m)?;
                metas.push(m);
            }
        }
        Some(t) => {
            let ds = make_toolchain(&nfs, &vocab, max_seq, t)?;
            let (a, b, c) = split(&ds.examples, ratios, cfg.seed)?;
            for (name, part) in SPLIT_FILES.iter().zip([a, b, c]) {
                let mut counts = vec![0; ds.classes.len()];
                part.iter().for_each(|e| counts[e.label] += 1);
                let m = meta(part.len(), counts);
                write_split(out, name, &part, &m)?;
                metas.push(m);
            }
        }
    }
    cfg.echo(out)?;
    Ok(metas)
}

fn read_meta(path: &Path) -> Result<Option<DatasetMeta>> {
    let p = sidecar(path, "meta.json");
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(&p)?).map_err(|e| Error::schema(1, e.to_string()))?))
}

/// Checks a dataset file's sidecar against the checkpoint vocabulary and
/// the requested task.
fn check_meta(path: &Path, vocab: &Vocabulary, task: TaskKind) -> Result<()> {
    if let Some(m) = read_meta(path)? {
        if m.vocab_hash != vocab.hash() {
            return Err(Error::VocabMismatch {
                checkpoint: vocab.hash(),
                dataset: m.vocab_hash,
            });
        }
        if m.task != task {
            return Err(Error::Dataset(format!(
                "{} holds {} examples, not {task}",
                path.display(),
                m.task
            )));
        }
    } else {
        log::warn!("{}: no metadata sidecar, vocabulary not verified", path.display());
    }
    Ok(())
}

fn load_pairs(path: &Path, max_seq: usize) -> Result<Vec<PairExample>> {
    read_jsonl::<PairExample>(path)?
        .into_iter()
        .map(|p| {
            Ok(PairExample {
                a: p.a.pad_to(max_seq)?,
                b: p.b.pad_to(max_seq)?,
                ..p
            })
        })
        .collect()
}

fn load_singles(path: &Path, max_seq: usize) -> Result<Vec<ToolchainExample>> {
    read_jsonl::<ToolchainExample>(path)?
        .into_iter()
        .map(|e| {
            Ok(ToolchainExample {
                x: e.x.pad_to(max_seq)?,
                label: e.label,
            })
        })
        .collect()
}

/// `data` is a dataset directory (using `train.jsonl` and, if present,
/// `valid.jsonl`) or a single training file.
fn dataset_files(data: &Path) -> Result<(PathBuf, Option<PathBuf>)> {
    require(data)?;
    if data.is_dir() {
        let train = data.join(SPLIT_FILES[0]);
        require(&train)?;
        let valid = data.join(SPLIT_FILES[1]);
        Ok((train, valid.exists().then_some(valid)))
    } else {
        Ok((data.to_path_buf(), None))
    }
}

/// Fine-tunes a task head on a checkpoint and writes a new task checkpoint
/// directory; the parent directory is never written to.
pub fn finetune(cfg: &PipelineConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<TaskCheckpoint> {
    cfg.validate()?;
    if out.exists() && fs::canonicalize(out)? == fs::canonicalize(checkpoint)? {
        return Err(Error::Config("the task checkpoint must go to a new directory".into()));
    }
    let parent = Checkpoint::load(checkpoint)?;
    let (train_path, valid_path) = dataset_files(data)?;
    let task = cfg.task;
    for p in std::iter::once(&train_path).chain(valid_path.as_ref()) {
        check_meta(p, &parent.vocab, task)?;
    }
    let max_seq = parent.model.cfg.max_seq;
    let data = match task.toolchain() {
        None => TaskData::BinSim {
            train: load_pairs(&train_path, max_seq)?,
            valid: valid_path.as_deref().map(|p| load_pairs(p, max_seq)).transpose()?.unwrap_or_default(),
        },
        Some(t) => TaskData::Toolchain {
            task: t,
            classes: t.classes(),
            train: load_singles(&train_path, max_seq)?,
            valid: valid_path.as_deref().map(|p| load_singles(p, max_seq)).transpose()?.unwrap_or_default(),
        },
    };
    let task_ckpt = finetune_with(&parent, &data, &cfg.finetune, cfg.freeze_encoder, cfg.seed, |_| Ok(()))?;
    task_ckpt.save(out)?;
    cfg.echo(out)?;
    Ok(task_ckpt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    Pair(crate::heads::PairPrediction),
    Class(crate::heads::ToolchainPrediction),
}

/// Predicts every example of a dataset file (labels are ignored).
pub fn predict(task_dir: &Path, input: &Path, out: &Path) -> Result<Vec<Prediction>> {
    let task = TaskCheckpoint::load(task_dir)?;
    check_meta(input, &task.base.vocab, task.meta.task)?;
    let max_seq = task.model().cfg.max_seq;
    let preds = match task.meta.task {
        TaskKind::Binsim => load_pairs(input, max_seq)?
            .iter()
            .map(|p| task.predict_pair(&p.a, &p.b, p.bos_sim).map(Prediction::Pair))
            .collect::<Result<Vec<_>>>()?,
        _ => load_singles(input, max_seq)?
            .iter()
            .map(|e| task.predict_toolchain(&e.x).map(Prediction::Class))
            .collect::<Result<Vec<_>>>()?,
    };
    write_jsonl(out, &preds)?;
    Ok(preds)
}

/// Scores a task checkpoint on a labeled dataset file and writes the
/// report; for pairs also `<out>.pairs.csv` with per-build-pair rows.
pub fn eval(task: Option<TaskKind>, task_dir: &Path, input: &Path, out: &Path) -> Result<EvalReport> {
    let ckpt = TaskCheckpoint::load(task_dir)?;
    if let Some(t) = task.filter(|t| *t != ckpt.meta.task) {
        return Err(Error::Config(format!("checkpoint was fine-tuned for {}, not {t}", ckpt.meta.task)));
    }
    check_meta(input, &ckpt.base.vocab, ckpt.meta.task)?;
    let max_seq = ckpt.model().cfg.max_seq;
    let report = match ckpt.meta.task {
        TaskKind::Binsim => ckpt.evaluate_pairs(&load_pairs(input, max_seq)?)?,
        _ => ckpt.evaluate_toolchain(&load_singles(input, max_seq)?)?,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, serde_json::to_string_pretty(&report)?)?;
    if let Some(by_pair) = &report.by_pair {
        fs::write(sidecar(out, "pairs.csv"), by_pair.to_csv())?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub binary_id: String,
    pub function_name: String,
    pub compiler: Compiler,
    pub opt_level: OptLevel,
    pub embedding: Vec<f64>,
}

/// Function embeddings (mean encoder output over real tokens).
pub fn embed(checkpoint: &Path, corpus: &Path, out: &Path) -> Result<Vec<Embedding>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let nfs = read_corpus(corpus)?;
    let max_seq = ckpt.model.cfg.max_seq;
    let embeddings = nfs
        .iter()
        .map(|f| {
            let seq = encode(&f.tokens, &ckpt.vocab, max_seq)?;
            Ok(Embedding {
                binary_id: f.id.binary_id.clone(),
                function_name: f.id.function_name.clone(),
                compiler: f.id.compiler.clone(),
                opt_level: f.id.opt_level,
                embedding: ckpt.model.embed_function(&seq)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(out, &embeddings)?;
    Ok(embeddings)
}

/// Attention weights of the `index`-th function of a corpus.
pub fn export_attention(checkpoint: &Path, corpus: &Path, index: usize, out: &Path) -> Result<AttentionExport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let nfs = read_corpus(corpus)?;
    let f = nfs
        .get(index)
        .ok_or_else(|| Error::Dataset(format!("corpus holds {} functions, no index {index}", nfs.len())))?;
    let seq = encode(&f.tokens, &ckpt.vocab, ckpt.model.cfg.max_seq)?;
    let export = ckpt.model.export_attention(&seq)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, serde_json::to_string(&export)?)?;
    Ok(export)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_round_trip_and_validate() {
        let cfg = PipelineConfig::desk();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"seed": 3, "mode": "fine"}"#).unwrap();
        assert_eq!((partial.seed, partial.mode), (3, NormMode::Fine));
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 3}"#).is_err());
        let bad = PipelineConfig {
            dataset: DatasetConfig {
                ratio_pos: 1.0,
                ..Default::default()
            },
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hints_accept_hex_strings_and_numbers() {
        let h: SectionHints = serde_json::from_str(
            r#"{"function_start": "0x401000",
                "ranges": [{"start": 4198400, "end": "0x402000", "kind": "text"}],
                "symbols": {"0x401000": "main"}, "libc": ["puts"]}"#,
        )
        .unwrap();
        assert_eq!(h.function_start.unwrap().get(), 0x401000);
        assert_eq!(h.ranges[0].start.get(), 0x401000);
        h.section_map().unwrap();
        let bad = SectionHints {
            ranges: vec![HintRange {
                start: HexAddr::Num(0),
                end: HexAddr::Num(1),
                kind: "heap".into(),
            }],
            ..Default::default()
        };
        assert!(bad.section_map().is_err());
    }

    #[test]
    fn sidecars_append_suffix() {
        assert_eq!(sidecar(Path::new("d/train.jsonl"), "meta.json"), PathBuf::from("d/train.jsonl.meta.json"));
    }
}
