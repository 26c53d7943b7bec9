//! Loads a pre-trained checkpoint, embeds a few functions and prints the
//! last layer's attention for the first one.
//!
//!     cargo run --release --example pretrain_desk
//!     cargo run --release --example attention_export -- [checkpoint_dir]

use binsem::corpus::encode;
use binsem::encoder::{cosine, Checkpoint};
use binsem::synth::pretrain_corpus;

fn main() -> binsem::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "target/desk-pre".into());
    let ckpt = Checkpoint::load(dir.as_ref())?;
    let max_seq = ckpt.model.cfg.max_seq;
    let nfs = pretrain_corpus(4, 99);
    let seqs = nfs
        .iter()
        .map(|f| encode(&f.tokens, &ckpt.vocab, max_seq))
        .collect::<binsem::Result<Vec<_>>>()?;

    let emb = seqs
        .iter()
        .map(|s| ckpt.model.embed_function(s))
        .collect::<binsem::Result<Vec<_>>>()?;
    for (i, nf) in nfs.iter().enumerate() {
        let sims: Vec<String> = emb.iter().map(|e| format!("{:.3}", cosine(&emb[i], e))).collect();
        println!("{:<8} {:>3} tokens  cosine [{}]", nf.id.compiler.as_str(), nf.len(), sims.join(" "));
    }

    let ex = ckpt.model.export_attention(&seqs[0])?;
    let tokens: Vec<&str> = ex.tokens.iter().map(|&i| ckpt.vocab.token_of(i).unwrap_or("[UNK]")).collect();
    let last = ex.weights.last().expect("at least one layer");
    println!("\nlast layer, head 0, {:?}:", ex.shape);
    for q in 0..ex.true_len {
        let (k, w) = last[0][q]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("keys");
        println!("{:<24} -> {:<24} {w:.3}", tokens[q], tokens[k]);
    }
    Ok(())
}
