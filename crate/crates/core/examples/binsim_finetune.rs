//! Fine-tunes the similarity head on pairs whose positives share a planted
//! motif, then scores a held-out set.
//!
//!     cargo run --release --example pretrain_desk -- target/desk-pre
//!     cargo run --release --example binsim_finetune -- target/desk-pre [out_dir]

use binsem::encoder::{Checkpoint, OptimizerConfig};
use binsem::heads::{finetune, TaskData};
use binsem::synth::binsim_toy;

fn main() -> binsem::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let pre = args.next().unwrap_or_else(|| "target/desk-pre".into());
    let out = args.next().unwrap_or_else(|| "target/desk-binsim".into());

    let parent = Checkpoint::load(pre.as_ref())?;
    let max_seq = parent.model.cfg.max_seq;
    let train = binsim_toy(100, &parent.vocab, max_seq, 1)?;
    let held_out = binsim_toy(100, &parent.vocab, max_seq, 2)?;
    let data = TaskData::BinSim {
        train,
        valid: held_out.clone(),
    };
    let opt = OptimizerConfig::desk();
    let task = finetune(&parent, &data, &opt, false, 3)?;
    for e in &task.log {
        let v = e.valid.as_ref().expect("validation set");
        println!("epoch {}  loss {:.4}  valid F1 {:.3}  AUC {:?}", e.epoch, e.loss, v.f1, v.auc);
    }
    let report = task.evaluate_pairs(&held_out)?;
    println!("held-out: {}", serde_json::to_string_pretty(&report.binary)?);
    task.save(out.as_ref())?;
    println!("task checkpoint written to {out}");
    Ok(())
}
