use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::bos::{bos_cosine, BosVector};
use super::sequence::{encode, TokenSequence};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::ingest::{Compiler, OptLevel};
use crate::normalizer::NormalizedFunction;
use crate::rng;

/// Train / validation / test fractions.
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.90, 0.05, 0.05);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairExample {
    pub a: TokenSequence,
    pub b: TokenSequence,
    pub bos_sim: f64,
    pub label: u8,
    /// Build-pair key such as `(CO0,GO3)`.
    #[serde(default)]
    pub group: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolchainExample {
    pub x: TokenSequence,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToolchainTask {
    Compiler,
    Optlevel,
    OptlevelGcc,
    OptlevelClang,
}

impl ToolchainTask {
    pub fn classes(&self) -> Vec<String> {
        match self {
            ToolchainTask::Compiler => vec!["gcc".into(), "clang".into()],
            _ => vec!["O0".into(), "O1".into(), "O3".into()],
        }
    }

    /// Class index of a function for this task, `None` when it does not
    /// take part (O2 and unknown levels for the optimization tasks).
    pub fn label_of(&self, nf: &NormalizedFunction) -> Option<usize> {
        let opt = || match nf.id.opt_level {
            OptLevel::O0 => Some(0),
            OptLevel::O1 => Some(1),
            OptLevel::O3 => Some(2),
            OptLevel::O2 | OptLevel::Unknown => None,
        };
        match self {
            ToolchainTask::Compiler => match nf.id.compiler {
                Compiler::Gcc => Some(0),
                Compiler::Clang => Some(1),
                Compiler::Other(_) => None,
            },
            ToolchainTask::Optlevel => opt(),
            ToolchainTask::OptlevelGcc => (nf.id.compiler == Compiler::Gcc).then(opt).flatten(),
            ToolchainTask::OptlevelClang => (nf.id.compiler == Compiler::Clang).then(opt).flatten(),
        }
    }
}

impl FromStr for ToolchainTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "compiler" => ToolchainTask::Compiler,
            "optlevel" => ToolchainTask::Optlevel,
            "optlevel-gcc" | "optlevel_gcc" => ToolchainTask::OptlevelGcc,
            "optlevel-clang" | "optlevel_clang" => ToolchainTask::OptlevelClang,
            other => {
                return Err(Error::UnknownLiteral {
                    what: "task",
                    literal: other.to_string(),
                })
            }
        })
    }
}

impl fmt::Display for ToolchainTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToolchainTask::Compiler => "compiler",
            ToolchainTask::Optlevel => "optlevel",
            ToolchainTask::OptlevelGcc => "optlevel-gcc",
            ToolchainTask::OptlevelClang => "optlevel-clang",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToolchainDataset {
    pub task: ToolchainTask,
    pub classes: Vec<String>,
    pub examples: Vec<ToolchainExample>,
    pub class_counts: Vec<usize>,
}

/// Program name with a trailing build suffix (`-gcc-O2`, `_clang_O0`, ...)
/// removed, so the same program built differently shares one root.
pub fn binary_root(binary_id: &str) -> &str {
    static SUFFIX: OnceLock<Regex> = OnceLock::new();
    let re = SUFFIX.get_or_init(|| {
        Regex::new(r"(?i)[-_.](gcc|clang|icc|cc)([-_.]?o[0-3sz])?$|[-_.]o[0-3sz]$").unwrap()
    });
    // both orders: name-gcc-O2 and name-O2-gcc
    let once = re.find(binary_id).map_or(binary_id, |m| &binary_id[..m.start()]);
    re.find(once).map_or(once, |m| &once[..m.start()])
}

fn function_key(nf: &NormalizedFunction) -> (String, String, String) {
    (
        nf.id.testsuite.clone(),
        binary_root(&nf.id.binary_id).to_string(),
        nf.id.function_name.clone(),
    )
}

fn pair_group(a: &NormalizedFunction, b: &NormalizedFunction) -> String {
    let (mut x, mut y) = (a.id.build_tag(), b.id.build_tag());
    if y < x {
        std::mem::swap(&mut x, &mut y);
    }
    format!("({x},{y})")
}

/// Labeled function pairs. Positives are the same function (same
/// testsuite, program and name) from two different builds whose token
/// lists differ; negatives are uniformly sampled pairs of different
/// functions, sized so that positives make up `ratio_pos` of the result.
pub fn make_pairs(
    nfs: &[NormalizedFunction],
    vocab: &Vocabulary,
    max_seq: usize,
    ratio_pos: f64,
    seed: u64,
) -> Result<Vec<PairExample>> {
    if !(ratio_pos > 0.0 && ratio_pos < 1.0) {
        return Err(Error::Config(format!("ratio_pos {ratio_pos} must lie in (0,1)")));
    }
    let keys: Vec<_> = nfs.iter().map(function_key).collect();
    let mut groups: BTreeMap<&(String, String, String), Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }

    let mut index_pairs: Vec<(usize, usize, u8)> = Vec::new();
    for members in groups.values() {
        for (x, &i) in members.iter().enumerate() {
            for &j in &members[x + 1..] {
                let same_build = nfs[i].id.compiler == nfs[j].id.compiler
                    && nfs[i].id.opt_level == nfs[j].id.opt_level;
                if !same_build && nfs[i].tokens != nfs[j].tokens {
                    index_pairs.push((i, j, 1));
                }
            }
        }
    }
    let positives = index_pairs.len();
    if positives == 0 {
        return Err(Error::Dataset(
            "no positive pair: no function differs across builds".into(),
        ));
    }

    let wanted = ((positives as f64) * (1.0 - ratio_pos) / ratio_pos).round() as usize;
    let mut rng = rng::stream(seed, &[rng::tag::PAIRS]);
    let mut taken: HashSet<(usize, usize)> = HashSet::new();
    let mut negatives = 0usize;
    let max_attempts = 100 * wanted + 1000;
    let mut attempts = 0;
    while negatives < wanted && attempts < max_attempts {
        attempts += 1;
        let i = rng.random_range(0..nfs.len());
        let j = rng.random_range(0..nfs.len());
        if keys[i] == keys[j] || nfs[i].tokens == nfs[j].tokens {
            continue;
        }
        if !taken.insert((i.min(j), i.max(j))) {
            continue;
        }
        index_pairs.push((i, j, 0));
        negatives += 1;
    }
    if wanted > 0 && negatives == 0 {
        return Err(Error::Dataset(
            "cannot sample negative pairs: corpus holds a single function".into(),
        ));
    }
    if negatives < wanted {
        log::warn!("sampled {negatives} of {wanted} negative pairs");
    }
    index_pairs.shuffle(&mut rng);

    let bags: Vec<BosVector> = nfs.iter().map(BosVector::of_normalized).collect();
    let mut seqs: HashMap<usize, TokenSequence> = HashMap::new();
    let mut seq = |i: usize| -> Result<TokenSequence> {
        if let Some(s) = seqs.get(&i) {
            return Ok(s.clone());
        }
        let s = encode(&nfs[i].tokens, vocab, max_seq)?;
        seqs.insert(i, s.clone());
        Ok(s)
    };
    index_pairs
        .into_iter()
        .map(|(i, j, label)| {
            Ok(PairExample {
                a: seq(i)?,
                b: seq(j)?,
                bos_sim: bos_cosine(&bags[i], &bags[j]),
                label,
                group: pair_group(&nfs[i], &nfs[j]),
            })
        })
        .collect()
}

/// Single-function examples labeled with compiler or optimization level.
/// Identical token lists seen under different labels are dropped entirely;
/// repeats under one label are kept once.
pub fn make_toolchain(
    nfs: &[NormalizedFunction],
    vocab: &Vocabulary,
    max_seq: usize,
    task: ToolchainTask,
) -> Result<ToolchainDataset> {
    let classes = task.classes();
    let mut labels_by_tokens: HashMap<&[String], HashSet<usize>> = HashMap::new();
    let mut order: Vec<(&NormalizedFunction, usize)> = Vec::new();
    for nf in nfs {
        if let Some(label) = task.label_of(nf) {
            labels_by_tokens.entry(&nf.tokens).or_default().insert(label);
            order.push((nf, label));
        }
    }
    let mut emitted: HashSet<&[String]> = HashSet::new();
    let mut examples = Vec::new();
    let mut class_counts = vec![0usize; classes.len()];
    for (nf, label) in order {
        if labels_by_tokens[nf.tokens.as_slice()].len() > 1 || !emitted.insert(&nf.tokens) {
            continue;
        }
        examples.push(ToolchainExample {
            x: encode(&nf.tokens, vocab, max_seq)?,
            label,
        });
        class_counts[label] += 1;
    }
    for (c, &n) in classes.iter().zip(&class_counts) {
        if n == 0 {
            return Err(Error::Dataset(format!("class {c} empty")));
        }
    }
    Ok(ToolchainDataset {
        task,
        classes,
        examples,
        class_counts,
    })
}

/// Seeded shuffle followed by a largest-remainder split into
/// (train, valid, test).
pub fn split<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|x| !(*x >= 0.0)) || ((r[0] + r[1] + r[2]) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let n = items.len();
    let raw: Vec<f64> = r.iter().map(|x| x * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::tag::SPLIT]));
    let take = |range: std::ops::Range<usize>| idx[range].iter().map(|&i| items[i].clone()).collect();
    let (a, b) = (counts[0], counts[0] + counts[1]);
    Ok((take(0..a), take(a..b), take(b..n)))
}
