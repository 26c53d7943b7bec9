//! Normalizes the fixture records, builds the vocabulary and prints corpus
//! statistics with a rank-frequency preview.
//!
//!     cargo run --example corpus_stats -- [records.jsonl]

use binsem::corpus::{corpus_stats, filter_functions, split, Vocabulary};
use binsem::ingest::read_records;
use binsem::normalizer::{normalize_function, NormMode};

fn main() -> binsem::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "tests/fixtures/corpus.jsonl".into());
    let records = read_records(path.as_ref())?;
    let nfs = records
        .iter()
        .map(|r| normalize_function(r, NormMode::Balanced))
        .collect::<binsem::Result<Vec<_>>>()?;
    let nfs = filter_functions(nfs);
    let (train, _, heldout) = split(&nfs, (0.8, 0.1, 0.1), 1)?;

    let vocab = Vocabulary::build(&train);
    println!("vocabulary: {} entries, hash {}", vocab.len(), vocab.hash());
    for (tok, n) in vocab.entries().take(8) {
        println!("  {tok:<12} {n}");
    }

    let report = corpus_stats(&train, &records, Some(&heldout));
    println!(
        "{} functions, {} tokens, {} distinct, held-out OOV rate {:.4}",
        report.functions,
        report.total_tokens,
        report.distinct_tokens,
        report.oov_rate.unwrap_or(0.0)
    );
    println!("instructions per function: {:?}", report.if_stats);
    if let (Some(bf), Some(ib)) = (&report.bf_stats, &report.ib_stats) {
        println!("blocks per function: {bf:?}\ninstructions per block: {ib:?}");
    }
    for r in report.rank_freq.iter().take(10) {
        println!("{r:?}");
    }
    Ok(())
}
