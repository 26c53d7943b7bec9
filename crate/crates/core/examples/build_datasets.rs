//! Builds the similarity pairs and the toolchain datasets from the fixture
//! records and shows how bag-of-strings similarity separates the pairs.
//!
//!     cargo run --example build_datasets -- [records.jsonl]

use binsem::corpus::{filter_functions, make_pairs, make_toolchain, ToolchainTask, Vocabulary};
use binsem::ingest::read_records;
use binsem::normalizer::{normalize_function, NormMode};

fn main() -> binsem::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "tests/fixtures/corpus.jsonl".into());
    let nfs = read_records(path.as_ref())?
        .iter()
        .map(|r| normalize_function(r, NormMode::Balanced))
        .collect::<binsem::Result<Vec<_>>>()?;
    let nfs = filter_functions(nfs);
    let vocab = Vocabulary::build(&nfs);

    let pairs = make_pairs(&nfs, &vocab, 64, 0.5, 7)?;
    let mean_bos = |label: u8| {
        let s: Vec<f64> = pairs.iter().filter(|p| p.label == label).map(|p| p.bos_sim).collect();
        (s.len(), s.iter().sum::<f64>() / s.len().max(1) as f64)
    };
    let ((np, sp), (nn, sn)) = (mean_bos(1), mean_bos(0));
    println!("{} pairs: {np} similar (mean BoS {sp:.3}), {nn} dissimilar (mean BoS {sn:.3})", pairs.len());
    let mut groups = std::collections::BTreeMap::<&str, usize>::new();
    for p in &pairs {
        *groups.entry(&p.group).or_default() += 1;
    }
    println!("build pairs: {groups:?}");

    for task in [ToolchainTask::Compiler, ToolchainTask::Optlevel, ToolchainTask::OptlevelGcc] {
        let ds = make_toolchain(&nfs, &vocab, 64, task)?;
        println!("{task}: {} examples over {:?}, counts {:?}", ds.examples.len(), ds.classes, ds.class_counts);
    }
    Ok(())
}
