//! Pre-trains the desk-profile encoder on a synthetic corpus and saves a
//! checkpoint.
//!
//!     cargo run --release --example pretrain_desk -- [out_dir] [n_functions]

use std::time::Instant;

use binsem::corpus::{encode, Vocabulary};
use binsem::encoder::{evaluate_mlm, pretrain, Checkpoint, EncoderConfig, OptimizerConfig};
use binsem::synth::pretrain_corpus;

fn main() -> binsem::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "target/desk-pre".into());
    let n: usize = args.next().map_or(200, |s| s.parse().expect("n_functions"));

    let nfs = pretrain_corpus(n, 7);
    let vocab = Vocabulary::build(&nfs);
    let cfg = EncoderConfig::desk(vocab.len());
    let seqs = nfs
        .iter()
        .map(|f| encode(&f.tokens, &vocab, cfg.max_seq))
        .collect::<binsem::Result<Vec<_>>>()?;
    let opt = OptimizerConfig::desk();
    println!("{} functions, vocabulary {}, {} epochs", seqs.len(), vocab.len(), opt.epochs);

    let start = Instant::now();
    let (model, log) = pretrain(&seqs, &cfg, &opt, 7, |_, _| Ok(()))?;
    for e in &log {
        println!("epoch {}  loss {:.4}  accuracy {:.3}", e.epoch, e.loss, e.accuracy);
    }
    let eval = evaluate_mlm(&model, &seqs, 7)?;
    println!(
        "training-set masked accuracy {:.3} (loss {:.4}) in {:.1?}",
        eval.accuracy(),
        eval.loss(),
        start.elapsed()
    );
    Checkpoint::new(model, opt, 7, vocab, log).save(out.as_ref())?;
    println!("checkpoint written to {out}");
    Ok(())
}
