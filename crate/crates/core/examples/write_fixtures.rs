//! Writes the synthetic record corpus used by the integration tests and
//! reports its size under each normalization mode.
//!
//!     cargo run --example write_fixtures -- [out.jsonl]

use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;

use binsem::ingest::write_records;
use binsem::normalizer::{normalize_function, NormMode};
use binsem::synth::{synthetic_records, RecordSpec};

fn main() -> binsem::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "tests/fixtures/corpus.jsonl".into());
    let records = synthetic_records(RecordSpec { programs: 3, functions: 5 }, 11);
    write_records(BufWriter::new(File::create(&out)?), &records)?;
    let instructions: usize = records.iter().map(|r| r.instructions.len()).sum();
    println!("{} functions, {instructions} instructions -> {out}", records.len());
    for mode in [NormMode::Coarse, NormMode::Balanced, NormMode::Fine] {
        let mut distinct = BTreeSet::new();
        for r in &records {
            distinct.extend(normalize_function(r, mode)?.tokens);
        }
        println!("{:>8}: {} distinct tokens", mode.to_string(), distinct.len());
    }
    Ok(())
}
