//! Confusion-matrix metrics, ROC AUC and the per-build-pair report on a
//! handful of scored predictions.
//!
//!     cargo run --example metrics_report

use binsem::metrics::{confusion, report_by_pair, roc_auc, summarize, GroupedPrediction};

fn main() -> binsem::Result<()> {
    // (group, truth, score)
    let scored = [
        ("(gcc-O0,gcc-O3)", 1, 0.91),
        ("(gcc-O0,gcc-O3)", 1, 0.62),
        ("(gcc-O0,gcc-O3)", 0, 0.55),
        ("(gcc-O0,gcc-O3)", 0, 0.12),
        ("(gcc-O1,clang-O1)", 1, 0.48),
        ("(gcc-O1,clang-O1)", 1, 0.77),
        ("(gcc-O1,clang-O1)", 0, 0.30),
        ("(gcc-O1,clang-O1)", 0, 0.81),
        ("(gcc-O1,clang-O1)", 0, 0.05),
    ];
    let preds: Vec<GroupedPrediction> = scored
        .iter()
        .map(|&(g, truth, score)| GroupedPrediction {
            group: g.into(),
            label: u8::from(score >= 0.5),
            truth,
            score,
        })
        .collect();

    let pairs: Vec<(u8, u8)> = preds.iter().map(|p| (p.label, p.truth)).collect();
    let mut report = summarize(&confusion(&pairs)?);
    report.auc = Some(roc_auc(&preds.iter().map(|p| (p.score, p.truth)).collect::<Vec<_>>())?);
    println!("{}", serde_json::to_string_pretty(&report)?);

    let by_pair = report_by_pair(&preds, false)?;
    print!("\n{}", by_pair.to_csv());
    Ok(())
}
