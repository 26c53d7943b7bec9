//! Checkpoint directories: `config.json`, `weights.bin` with its
//! `weights.json` manifest, `training_log.jsonl` and `vocab.tsv`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{EncoderConfig, OptimizerConfig, REFERENCE_PARAM_COUNT};
use super::model::EncoderModel;
use super::params::ParamStore;
use super::train::EpochLog;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub encoder: EncoderConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub vocab_hash: String,
    pub param_count: usize,
    pub reference_param_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Number of little-endian f64 values.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub tensors: Vec<ManifestEntry>,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes `<stem>.bin` and `<stem>.json` into `dir`.
pub fn write_tensors(dir: &Path, stem: &str, params: &ParamStore) -> Result<()> {
    let (blob, tensors) = serialize_tensors(params);
    fs::write(dir.join(format!("{stem}.bin")), blob)?;
    let manifest = Manifest {
        dtype: "f64le".into(),
        tensors,
    };
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn serialize_tensors(params: &ParamStore) -> (Vec<u8>, Vec<ManifestEntry>) {
    let mut blob = Vec::with_capacity(params.num_params() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for t in params.tensors() {
        tensors.push(ManifestEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset: blob.len(),
            len: t.data.len(),
        });
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (blob, tensors)
}

pub fn read_tensors(dir: &Path, stem: &str) -> Result<ParamStore> {
    let mpath = dir.join(format!("{stem}.json"));
    let bpath = dir.join(format!("{stem}.bin"));
    let manifest: Manifest = serde_json::from_slice(&read(&mpath)?)
        .map_err(|e| ckpt_err(&mpath, e.to_string()))?;
    if manifest.dtype != "f64le" {
        return Err(ckpt_err(&mpath, format!("unsupported dtype {}", manifest.dtype)));
    }
    let blob = read(&bpath)?;
    let mut ps = ParamStore::new();
    for t in &manifest.tensors {
        let end = t.offset + 8 * t.len;
        if end > blob.len() || t.shape.iter().product::<usize>() != t.len {
            return Err(ckpt_err(&bpath, format!("tensor {} out of bounds or misshapen", t.name)));
        }
        let data = blob[t.offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        ps.add(&t.name, &t.shape, data);
    }
    Ok(ps)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
        _ => e.into(),
    })
}

/// A pre-trained encoder with everything needed to reuse it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub model: EncoderModel,
    pub vocab: Vocabulary,
    pub log: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn new(
        model: EncoderModel,
        optimizer: OptimizerConfig,
        seed: u64,
        vocab: Vocabulary,
        log: Vec<EpochLog>,
    ) -> Self {
        let config = CheckpointConfig {
            encoder: model.cfg.clone(),
            optimizer,
            seed,
            vocab_hash: vocab.hash(),
            param_count: model.param_count(),
            reference_param_count: REFERENCE_PARAM_COUNT,
        };
        Checkpoint {
            config,
            model,
            vocab,
            log,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        write_tensors(dir, "weights", &self.model.params)?;
        fs::write(dir.join("vocab.tsv"), self.vocab.to_tsv())?;
        write_log(&dir.join("training_log.jsonl"), &self.log)?;
        Ok(())
    }

    /// The value [`checkpoint_hash`] returns once this checkpoint is saved.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_string_pretty(&self.config)?.as_bytes());
        h.update(serialize_tensors(&self.model.params).0);
        Ok(hex::encode(h.finalize()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cpath = dir.join("config.json");
        let config: CheckpointConfig =
            serde_json::from_slice(&read(&cpath)?).map_err(|e| ckpt_err(&cpath, e.to_string()))?;
        let params = read_tensors(dir, "weights")?;
        let model = EncoderModel::from_params(config.encoder.clone(), params)
            .map_err(|e| ckpt_err(dir, e.to_string()))?;
        let vpath = dir.join("vocab.tsv");
        let vocab = Vocabulary::from_tsv(&String::from_utf8_lossy(&read(&vpath)?))?;
        if vocab.hash() != config.vocab_hash {
            return Err(ckpt_err(&vpath, "vocabulary does not match config hash"));
        }
        let log = read_log(&dir.join("training_log.jsonl"))?;
        Ok(Checkpoint {
            config,
            model,
            vocab,
            log,
        })
    }
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for e in log {
        writeln!(f, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ckpt_err(path, e.to_string())))
        .collect()
}

/// SHA-256 over `config.json` and `weights.bin` of a checkpoint directory.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in ["config.json", "weights.bin"] {
        h.update(read(&dir.join(name))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Copies the files of a checkpoint directory into `to`.
pub fn copy_checkpoint(from: &Path, to: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(to)?;
    let mut copied = Vec::new();
    for name in ["config.json", "weights.bin", "weights.json", "vocab.tsv", "training_log.jsonl"] {
        let src = from.join(name);
        if src.exists() {
            let dst = to.join(name);
            fs::copy(&src, &dst)?;
            copied.push(dst);
        }
    }
    Ok(copied)
}
