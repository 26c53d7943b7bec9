//! Binary classification metrics: confusion counts, the derived rates,
//! ROC AUC, and per-build-pair breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Counts from `(predicted, truth)` pairs of 0/1 labels.
pub fn confusion(preds: &[(u8, u8)]) -> Result<ConfusionMatrix> {
    if preds.is_empty() {
        return Err(Error::Metrics("no predictions".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for &(label, truth) in preds {
        match (label, truth) {
            (1, 1) => cm.tp += 1,
            (1, 0) => cm.fp += 1,
            (0, 0) => cm.tn += 1,
            (0, 1) => cm.fn_ += 1,
            _ => {
                return Err(Error::Metrics(format!(
                    "labels must be 0 or 1, got ({label}, {truth})"
                )))
            }
        }
    }
    Ok(cm)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fpr: f64,
    pub tpr: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    pub confusion: ConfusionMatrix,
    /// Metrics whose denominator was zero; they are reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

pub fn summarize(cm: &ConfusionMatrix) -> MetricsReport {
    let mut undefined = Vec::new();
    let mut ratio = |name: &str, num: u64, den: u64| {
        if den == 0 {
            undefined.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio("precision", cm.tp, cm.tp + cm.fp);
    let recall = ratio("recall", cm.tp, cm.tp + cm.fn_);
    let fpr = ratio("fpr", cm.fp, cm.fp + cm.tn);
    let accuracy = ratio("accuracy", cm.tp + cm.tn, cm.total());
    let f1 = if precision + recall == 0.0 {
        undefined.push("f1".into());
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    MetricsReport {
        fpr,
        tpr: recall,
        accuracy,
        precision,
        recall,
        f1,
        auc: None,
        confusion: *cm,
        undefined,
    }
}

/// Area under the ROC curve from `(score, truth)` samples, computed as the
/// Mann-Whitney rank statistic with tied scores sharing their mean rank.
pub fn roc_auc(scores: &[(f64, u8)]) -> Result<f64> {
    let n_pos = scores.iter().filter(|s| s.1 == 1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metrics("AUC needs both classes".into()));
    }
    if scores.iter().any(|s| s.0.is_nan()) {
        return Err(Error::Metrics("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if scores[k].1 == 1 {
                rank_sum_pos += mean_rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// One scored prediction with its build-pair key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedPrediction {
    pub group: String,
    pub label: u8,
    pub truth: u8,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub pair: String,
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub rows: Vec<PairRow>,
    pub average: PairRow,
    pub groups: BTreeMap<String, MetricsReport>,
}

impl PairReport {
    /// `pair,P,R,F1` with one line per group and a final `Average` line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair,P,R,F1\n");
        for r in self.rows.iter().chain(std::iter::once(&self.average)) {
            let _ = writeln!(s, "\"{}\",{:.6},{:.6},{:.6}", r.pair, r.precision, r.recall, r.f1);
        }
        s
    }
}

/// Per-group precision / recall / F1 with an average row, unweighted
/// unless `weight_by_size` is set.
pub fn report_by_pair(preds: &[GroupedPrediction], weight_by_size: bool) -> Result<PairReport> {
    let mut by_group: BTreeMap<&str, Vec<&GroupedPrediction>> = BTreeMap::new();
    for p in preds {
        by_group.entry(p.group.as_str()).or_default().push(p);
    }
    if by_group.is_empty() {
        return Err(Error::Metrics("no predictions".into()));
    }
    let mut rows = Vec::new();
    let mut groups = BTreeMap::new();
    for (g, ps) in &by_group {
        let pairs: Vec<(u8, u8)> = ps.iter().map(|p| (p.label, p.truth)).collect();
        let mut rep = summarize(&confusion(&pairs)?);
        let scored: Vec<(f64, u8)> = ps.iter().map(|p| (p.score, p.truth)).collect();
        rep.auc = roc_auc(&scored).ok();
        rows.push(PairRow {
            pair: g.to_string(),
            precision: rep.precision,
            recall: rep.recall,
            f1: rep.f1,
            n: ps.len(),
        });
        groups.insert(g.to_string(), rep);
    }
    let weight = |r: &PairRow| if weight_by_size { r.n as f64 } else { 1.0 };
    let wsum: f64 = rows.iter().map(weight).sum();
    let avg = |f: fn(&PairRow) -> f64| rows.iter().map(|r| weight(r) * f(r)).sum::<f64>() / wsum;
    let average = PairRow {
        pair: "Average".into(),
        precision: avg(|r| r.precision),
        recall: avg(|r| r.recall),
        f1: avg(|r| r.f1),
        n: preds.len(),
    };
    Ok(PairReport {
        rows,
        average,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(s: &[(f64, u8)]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for a in s.iter().filter(|x| x.1 == 1) {
            for b in s.iter().filter(|x| x.1 == 0) {
                pairs += 1.0;
                if a.0 > b.0 {
                    num += 1.0;
                } else if a.0 == b.0 {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    #[test]
    fn confusion_enumeration() {
        let cm = confusion(&[(1, 1), (1, 0), (0, 0), (0, 1)]).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!(cm.total(), 4);
        let cm = confusion(&[(1, 1), (1, 1)]).unwrap();
        assert_eq!((cm.fp, cm.fn_), (0, 0));
        assert!(confusion(&[]).is_err());
        assert!(confusion(&[(2, 1)]).is_err());
    }

    #[test]
    fn summary_fixtures() {
        let r = summarize(&ConfusionMatrix { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!((r.precision, r.recall, r.f1, r.accuracy), (0.5, 0.5, 0.5, 0.5));
        let r = summarize(&ConfusionMatrix { tp: 3, fp: 0, tn: 2, fn_: 0 });
        assert_eq!((r.precision, r.recall, r.f1, r.accuracy, r.fpr), (1.0, 1.0, 1.0, 1.0, 0.0));
        let r = summarize(&ConfusionMatrix { tp: 0, fp: 0, tn: 4, fn_: 2 });
        assert_eq!(r.precision, 0.0);
        assert!(r.undefined.contains(&"precision".to_string()));
    }

    #[test]
    fn auc_fixtures() {
        assert_eq!(roc_auc(&[(0.1, 0), (0.2, 0), (0.8, 1), (0.9, 1)]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[(0.5, 0), (0.5, 1), (0.5, 1), (0.5, 0)]).unwrap(), 0.5);
        assert!(roc_auc(&[(0.5, 1), (0.7, 1)]).is_err());
    }

    #[test]
    fn pair_report() {
        let p = |g: &str, label, truth| GroupedPrediction { group: g.into(), label, truth, score: label as f64 };
        let one = report_by_pair(&[p("(CO0,GO3)", 1, 1), p("(CO0,GO3)", 0, 1)], false).unwrap();
        assert_eq!(one.average.f1, one.rows[0].f1);
        assert!(one.to_csv().contains("\"(CO0,GO3)\""));
        // F1 0.2 and 0.8 average to 0.5: P=R=0.2 and P=R=0.8
        let mut preds = Vec::new();
        for (g, tp, miss) in [("(GO0,GO1)", 1, 4), ("(GO1,GO3)", 4, 1)] {
            for _ in 0..tp {
                preds.push(p(g, 1, 1));
            }
            for _ in 0..miss {
                preds.push(p(g, 1, 0));
                preds.push(p(g, 0, 1));
            }
        }
        let rep = report_by_pair(&preds, false).unwrap();
        let f1s: Vec<f64> = rep.rows.iter().map(|r| r.f1).collect();
        assert!((f1s[0] - 0.2).abs() < 1e-12 && (f1s[1] - 0.8).abs() < 1e-12);
        assert!((rep.average.f1 - 0.5).abs() < 1e-12);
        let weighted = report_by_pair(&preds, true).unwrap();
        assert!((weighted.average.f1 - (0.2 * 9.0 + 0.8 * 6.0) / 15.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_count(s in proptest::collection::vec((0u8..20, 0u8..2), 2..100)) {
            let s: Vec<(f64, u8)> = s.into_iter().map(|(a, b)| (a as f64 / 20.0, b)).collect();
            prop_assume!(s.iter().any(|x| x.1 == 1) && s.iter().any(|x| x.1 == 0));
            let auc = roc_auc(&s).unwrap();
            prop_assert!((auc - brute_auc(&s)).abs() < 1e-9);
            // strictly monotone transform
            let t: Vec<(f64, u8)> = s.iter().map(|&(x, y)| ((3.0 * x).exp() - 7.0, y)).collect();
            prop_assert!((roc_auc(&t).unwrap() - auc).abs() < 1e-12);
        }

        #[test]
        fn reversed_scores_complement(v in proptest::collection::hash_set(0u32..10_000, 2..60), bits in proptest::collection::vec(0u8..2, 60)) {
            let s: Vec<(f64, u8)> = v.into_iter().zip(bits).map(|(x, y)| (x as f64, y)).collect();
            prop_assume!(s.iter().any(|x| x.1 == 1) && s.iter().any(|x| x.1 == 0));
            let r: Vec<(f64, u8)> = s.iter().map(|&(x, y)| (-x, y)).collect();
            prop_assert!((roc_auc(&s).unwrap() + roc_auc(&r).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
