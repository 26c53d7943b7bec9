//! Parses an objdump listing with section hints and prints every
//! instruction under the three normalization modes.
//!
//!     cargo run --example normalize_listing -- [listing.asm]

use binsem::corpus::extract_bos;
use binsem::ingest::{parse_asm_text_with_warnings, SectionKind, SectionMap};
use binsem::normalizer::{normalize_instruction, NormMode};

fn main() -> binsem::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "tests/fixtures/listing.asm".into());
    let text = std::fs::read_to_string(&path)?;
    let hints = SectionMap::new()
        .with_range(0x401020..0x401100, SectionKind::PltGot)
        .with_range(0x401100..0x402000, SectionKind::Text)
        .with_range(0x402000..0x403000, SectionKind::RodataString)
        .with_range(0x404000..0x404100, SectionKind::Bss)
        .with_libc(["puts"])
        .with_string(0x402004, "word count");
    let (record, warnings) = parse_asm_text_with_warnings(&text, &hints)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    println!("{} ({} instructions)", record.function_name, record.instructions.len());
    println!("{:<34} {:<22} {:<30} fine", "raw", "coarse", "balanced");
    for ins in &record.instructions {
        let raw = format!(
            "{} {}",
            ins.mnemonic,
            ins.operands.iter().map(|o| o.raw_text.as_str()).collect::<Vec<_>>().join(",")
        );
        let tok = |m| normalize_instruction(ins, m);
        println!(
            "{raw:<34} {:<22} {:<30} {}",
            tok(NormMode::Coarse)?,
            tok(NormMode::Balanced)?,
            tok(NormMode::Fine)?
        );
    }
    let bos = extract_bos(&record);
    println!("bag of strings and constants: {:?}", bos.iter().collect::<Vec<_>>());
    Ok(())
}
