//! Fine-tunes a two-class compiler classifier on synthetic functions.
//!
//!     cargo run --release --example toolchain_finetune -- target/desk-pre [out_dir]

use binsem::corpus::ToolchainTask;
use binsem::encoder::{Checkpoint, OptimizerConfig};
use binsem::heads::{finetune, TaskData};
use binsem::synth::toolchain_toy;

fn main() -> binsem::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let pre = args.next().unwrap_or_else(|| "target/desk-pre".into());
    let out = args.next().unwrap_or_else(|| "target/desk-compiler".into());

    let parent = Checkpoint::load(pre.as_ref())?;
    let max_seq = parent.model.cfg.max_seq;
    let held_out = toolchain_toy(100, &parent.vocab, max_seq, 5)?;
    let data = TaskData::Toolchain {
        task: ToolchainTask::Compiler,
        classes: ToolchainTask::Compiler.classes(),
        train: toolchain_toy(100, &parent.vocab, max_seq, 4)?,
        valid: held_out.clone(),
    };
    let task = finetune(&parent, &data, &OptimizerConfig::desk(), false, 6)?;
    for e in &task.log {
        let v = e.valid.as_ref().expect("validation set");
        println!("epoch {}  loss {:.4}  valid accuracy {:.3}", e.epoch, e.loss, v.accuracy);
    }
    let report = task.evaluate_toolchain(&held_out)?;
    println!("held-out accuracy {:.3}, macro F1 {:.3}", report.accuracy, report.f1);
    let p = task.predict_toolchain(&held_out[0].x)?;
    println!("first example: {} {:?}", p.class, p.probabilities);
    task.save(out.as_ref())?;
    println!("task checkpoint written to {out}");
    Ok(())
}
