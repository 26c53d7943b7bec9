//! Command-line front end over `binsem::pipeline`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use binsem::heads::TaskKind;
use binsem::normalizer::NormMode;
use binsem::pipeline::{self, PipelineConfig};
use binsem::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "binsem", version, about = "Normalized x86-64 instruction language models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    mode: Option<NormMode>,
    /// binsim | compiler | optlevel | optlevel-gcc | optlevel-clang
    #[arg(long, global = true)]
    task: Option<TaskKind>,
    #[arg(long, global = true)]
    freeze_encoder: bool,
    #[arg(short = 'o', long = "output", global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Collect record JSONL files and Intel-syntax listings into one JSONL.
    Ingest {
        inputs: Vec<PathBuf>,
        /// Section hints (JSON) for listings.
        #[arg(long)]
        hints: Option<PathBuf>,
    },
    /// Rewrite every instruction into a normalized token.
    Normalize { input: Option<PathBuf> },
    /// Build the vocabulary TSV from normalized functions.
    Vocab { input: Option<PathBuf> },
    /// Corpus statistics JSON.
    Stats {
        input: Option<PathBuf>,
        /// Record JSONL with basic-block ids, for block statistics.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Held-out normalized functions, for the out-of-vocabulary rate.
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// Pre-train the encoder with the masked-token objective.
    Pretrain {
        input: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Build train/valid/test splits for a task.
    MakeDataset {
        input: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Fine-tune a task head on a pre-trained checkpoint.
    Finetune {
        checkpoint: Option<PathBuf>,
        /// Dataset directory or training file.
        data: Option<PathBuf>,
    },
    /// Predict every example of a dataset file.
    Predict { task_checkpoint: PathBuf, input: PathBuf },
    /// Score a task checkpoint on a labeled dataset file.
    Eval { task_checkpoint: PathBuf, input: PathBuf },
    /// Function embeddings from a checkpoint.
    Embed { checkpoint: PathBuf, input: Option<PathBuf> },
    /// Attention weights of one function.
    ExportAttn {
        checkpoint: PathBuf,
        input: Option<PathBuf>,
        /// Position of the function in the corpus file.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = c.mode {
        cfg.mode = m;
    }
    if let Some(t) = c.task {
        cfg.task = t;
    }
    if c.freeze_encoder {
        cfg.freeze_encoder = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pick(arg: Option<PathBuf>, from_config: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    arg.or_else(|| from_config.clone())
        .ok_or_else(|| Error::Config(format!("no {what} given on the command line or in the config")))
}

/// Checks every input up front: a missing file is a validation error
/// (exit 1), unlike I/O failures during a stage (exit 2).
fn exists(paths: &[&Path]) -> Result<()> {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(Error::MissingInput(p.to_path_buf())),
        None => Ok(()),
    }
}

fn output(c: &Common, from_config: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    pick(c.output.clone(), from_config, what)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli.common)?;
    let c = &cli.common;
    let p = &cfg.paths;
    let echo = |out: &Path| cfg.echo(out).map(|_| ());
    match cli.cmd {
        Cmd::Ingest { inputs, hints } => {
            let out = output(c, &p.records, "output file")?;
            if inputs.is_empty() {
                return Err(Error::Config("ingest needs at least one input".into()));
            }
            let mut all: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
            all.extend(hints.as_deref());
            exists(&all)?;
            let recs = pipeline::ingest(&inputs, hints.as_deref(), &out)?;
            echo(&out)?;
            println!("{} functions written to {}", recs.len(), out.display());
        }
        Cmd::Normalize { input } => {
            let input = pick(input, &p.records, "record file")?;
            exists(&[&input])?;
            let out = output(c, &p.corpus, "output file")?;
            print_json(&pipeline::normalize(&cfg, &input, &out)?)?;
        }
        Cmd::Vocab { input } => {
            let input = pick(input, &p.corpus, "corpus")?;
            exists(&[&input])?;
            let out = output(c, &p.vocab, "output file")?;
            let v = pipeline::vocab(&input, &out)?;
            echo(&out)?;
            println!("{} entries (hash {})", v.len(), v.hash());
        }
        Cmd::Stats {
            input,
            records,
            heldout,
        } => {
            let input = pick(input, &p.corpus, "corpus")?;
            let mut all = vec![input.as_path()];
            all.extend(records.as_deref());
            all.extend(heldout.as_deref());
            exists(&all)?;
            let out = c.output.clone().ok_or_else(|| Error::Config("stats needs -o".into()))?;
            let r = pipeline::stats(&input, records.as_deref(), heldout.as_deref(), &out)?;
            echo(&out)?;
            println!("{} functions, {} distinct tokens", r.functions, r.distinct_tokens);
        }
        Cmd::Pretrain { input, vocab } => {
            let input = pick(input, &p.corpus, "corpus")?;
            let vocab = vocab.or_else(|| p.vocab.clone());
            let mut all = vec![input.as_path()];
            all.extend(vocab.as_deref());
            exists(&all)?;
            let out = output(c, &p.checkpoint, "checkpoint directory")?;
            for e in pipeline::pretrain(&cfg, &input, vocab.as_deref(), &out)? {
                println!("epoch {} loss {:.4} accuracy {:.3}", e.epoch, e.loss, e.accuracy);
            }
        }
        Cmd::MakeDataset { input, vocab } => {
            let input = pick(input, &p.corpus, "corpus")?;
            let vocab = pick(vocab, &p.vocab, "vocabulary")?;
            exists(&[&input, &vocab])?;
            let out = output(c, &p.dataset, "dataset directory")?;
            for (name, m) in pipeline::SPLIT_FILES.iter().zip(pipeline::make_dataset(&cfg, &input, &vocab, &out)?) {
                println!("{name}: {} examples {:?}", m.count, m.class_counts);
            }
        }
        Cmd::Finetune { checkpoint, data } => {
            let ckpt = pick(checkpoint, &p.checkpoint, "checkpoint")?;
            let data = pick(data, &p.dataset, "dataset")?;
            exists(&[&ckpt, &data])?;
            let out = output(c, &p.task_checkpoint, "task checkpoint directory")?;
            let task = pipeline::finetune(&cfg, &ckpt, &data, &out)?;
            for e in &task.log {
                let valid = e.valid.as_ref().map(|v| format!(" valid f1 {:.3}", v.f1)).unwrap_or_default();
                println!("epoch {} loss {:.4} train accuracy {:.3}{valid}", e.epoch, e.loss, e.train_accuracy);
            }
        }
        Cmd::Predict { task_checkpoint, input } => {
            exists(&[&task_checkpoint, &input])?;
            let out = c.output.clone().ok_or_else(|| Error::Config("predict needs -o".into()))?;
            let n = pipeline::predict(&task_checkpoint, &input, &out)?.len();
            echo(&out)?;
            println!("{n} predictions written to {}", out.display());
        }
        Cmd::Eval { task_checkpoint, input } => {
            exists(&[&task_checkpoint, &input])?;
            let out = c.output.clone().ok_or_else(|| Error::Config("eval needs -o".into()))?;
            let r = pipeline::eval(c.task, &task_checkpoint, &input, &out)?;
            echo(&out)?;
            println!("n {} accuracy {:.4} f1 {:.4} auc {:?}", r.n, r.accuracy, r.f1, r.auc);
        }
        Cmd::Embed { checkpoint, input } => {
            let input = pick(input, &p.corpus, "corpus")?;
            exists(&[&checkpoint, &input])?;
            let out = c.output.clone().ok_or_else(|| Error::Config("embed needs -o".into()))?;
            let n = pipeline::embed(&checkpoint, &input, &out)?.len();
            echo(&out)?;
            println!("{n} embeddings written to {}", out.display());
        }
        Cmd::ExportAttn {
            checkpoint,
            input,
            index,
        } => {
            let input = pick(input, &p.corpus, "corpus")?;
            exists(&[&checkpoint, &input])?;
            let out = c.output.clone().ok_or_else(|| Error::Config("export-attn needs -o".into()))?;
            let ex = pipeline::export_attention(&checkpoint, &input, index, &out)?;
            echo(&out)?;
            println!("attention {:?} over {} tokens written to {}", ex.shape, ex.true_len, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("BINSEM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("BINSEM_THREADS ignored: {e}");
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
