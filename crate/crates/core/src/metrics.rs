//! Multi-label evaluation metrics.
//!
//! Zero-division conventions: a sample with empty truth and empty
//! prediction scores example-F1 1; per-label precision, recall and F1 with
//! a zero denominator are 0.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::LabelGroup;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::losses::ConstraintRule;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of true positives in the ground truth.
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Suite {
    pub example_f1: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub per_label: Vec<LabelScores>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_shapes<A, B>(a: &[Vec<A>], b: &[Vec<B>]) -> Result<usize> {
    if a.is_empty() {
        return Err(Error::invalid("metrics: no samples"));
    }
    let k = a[0].len();
    if a.len() != b.len() || a.iter().any(|r| r.len() != k) || b.iter().any(|r| r.len() != k) {
        return Err(Error::shape("metrics", format!("{} x {k} truth vs {} rows", a.len(), b.len())));
    }
    Ok(k)
}

pub fn binarize(probs: &Tensor, threshold: f64) -> Vec<Vec<bool>> {
    let k = probs.last_dim();
    probs.data().chunks(k).map(|r| r.iter().map(|&p| p >= threshold).collect()).collect()
}

pub fn rows(probs: &Tensor) -> Vec<Vec<f64>> {
    let k = probs.last_dim();
    probs.data().chunks(k).map(<[f64]>::to_vec).collect()
}

pub fn f1_suite(y_true: &[Vec<bool>], y_pred: &[Vec<bool>]) -> Result<F1Suite> {
    let k = check_shapes(y_true, y_pred)?;
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fneg = vec![0usize; k];
    let mut example = 0.0;
    for (t, p) in y_true.iter().zip(y_pred) {
        let mut inter = 0;
        let (mut nt, mut np) = (0, 0);
        for j in 0..k {
            match (t[j], p[j]) {
                (true, true) => {
                    tp[j] += 1;
                    inter += 1;
                }
                (false, true) => fp[j] += 1,
                (true, false) => fneg[j] += 1,
                (false, false) => {}
            }
            nt += t[j] as usize;
            np += p[j] as usize;
        }
        example += if nt + np == 0 { 1.0 } else { 2.0 * inter as f64 / (nt + np) as f64 };
    }
    let per_label: Vec<LabelScores> = (0..k)
        .map(|j| LabelScores {
            precision: ratio(tp[j], tp[j] + fp[j]),
            recall: ratio(tp[j], tp[j] + fneg[j]),
            f1: ratio(2 * tp[j], 2 * tp[j] + fp[j] + fneg[j]),
            support: tp[j] + fneg[j],
        })
        .collect();
    let (stp, sfp, sfn): (usize, usize, usize) = (tp.iter().sum(), fp.iter().sum(), fneg.iter().sum());
    let mean = |f: fn(&LabelScores) -> f64| per_label.iter().map(f).sum::<f64>() / k as f64;
    Ok(F1Suite {
        example_f1: example / y_true.len() as f64,
        micro_f1: ratio(2 * stp, 2 * stp + sfp + sfn),
        macro_f1: mean(|s| s.f1),
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        per_label,
    })
}

/// Area under one label's precision-recall curve by step interpolation:
/// `Σ (R_t - R_{t-1}) · P_t` over distinct score thresholds, highest first.
/// `None` when the label has no positives.
pub fn pr_auc(truth: &[bool], scores: &[f64]) -> Option<f64> {
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += truth[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        area += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Some(area)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrAucSummary {
    pub macro_pr_auc: f64,
    pub per_label: Vec<Option<f64>>,
    /// Labels without positives, left out of the mean.
    pub excluded: usize,
}

pub fn macro_pr_auc(y_true: &[Vec<bool>], probs: &[Vec<f64>]) -> Result<PrAucSummary> {
    let k = check_shapes(y_true, probs)?;
    let per_label: Vec<Option<f64>> = (0..k)
        .map(|j| {
            let t: Vec<bool> = y_true.iter().map(|r| r[j]).collect();
            let s: Vec<f64> = probs.iter().map(|r| r[j]).collect();
            pr_auc(&t, &s)
        })
        .collect();
    let included: Vec<f64> = per_label.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::invalid("macro_pr_auc: no label has a positive sample"));
    }
    Ok(PrAucSummary {
        macro_pr_auc: included.iter().sum::<f64>() / included.len() as f64,
        excluded: k - included.len(),
        per_label,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionMiss {
    pub name: String,
    /// Samples with a true label in the group but no predicted one.
    pub missed: usize,
    /// Samples with at least one true label in the group.
    pub with_truth: usize,
}

pub fn check_partition(groups: &[LabelGroup], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    for g in groups {
        for &l in &g.labels {
            if l >= k || std::mem::replace(&mut seen[l], true) {
                return Err(Error::invalid(format!("groups do not partition {k} labels (label {l})")));
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::invalid(format!("groups do not cover all {k} labels")));
    }
    Ok(())
}

pub fn missed_by_dimension(y_true: &[Vec<bool>], y_pred: &[Vec<bool>], groups: &[LabelGroup]) -> Result<Vec<DimensionMiss>> {
    let k = check_shapes(y_true, y_pred)?;
    check_partition(groups, k)?;
    Ok(groups
        .iter()
        .map(|g| {
            let any = |r: &Vec<bool>| g.labels.iter().any(|&l| r[l]);
            let with_truth = y_true.iter().filter(|r| any(r)).count();
            let missed = y_true.iter().zip(y_pred).filter(|(t, p)| any(t) && !any(p)).count();
            DimensionMiss {
                name: g.name.clone(),
                missed,
                with_truth,
            }
        })
        .collect())
}

/// Fraction of samples whose predictions break at least one rule.
pub fn rule_violation_rate(y_pred: &[Vec<bool>], rules: &[ConstraintRule]) -> f64 {
    if y_pred.is_empty() {
        return 0.0;
    }
    let bad = y_pred.iter().filter(|p| rules.iter().any(|r| r.violated(p))).count();
    bad as f64 / y_pred.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub pr_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_samples: usize,
    pub threshold: f64,
    pub example_f1: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_pr_auc: f64,
    pub pr_auc_excluded: usize,
    pub rule_violation_rate: f64,
    pub per_label: Vec<LabelRow>,
    pub missed_by_dimension: Vec<DimensionMiss>,
}

/// Names of the six headline columns, in table order.
pub const HEADLINE_METRICS: [&str; 6] = [
    "example_f1",
    "micro_f1",
    "macro_f1",
    "macro_precision",
    "macro_recall",
    "macro_pr_auc",
];

impl MetricReport {
    pub fn headline(&self) -> [f64; 6] {
        [
            self.example_f1,
            self.micro_f1,
            self.macro_f1,
            self.macro_precision,
            self.macro_recall,
            self.macro_pr_auc,
        ]
    }

    /// One row per label.
    pub fn per_label_csv(&self) -> String {
        let mut out = String::from("label,precision,recall,f1,support,pr_auc\n");
        for r in &self.per_label {
            let auc = r.pr_auc.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{},{}", r.label, r.precision, r.recall, r.f1, r.support, auc);
        }
        out
    }

    /// Macro recall restricted to `labels`.
    pub fn recall_over(&self, labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        labels.iter().map(|&l| self.per_label[l].recall).sum::<f64>() / labels.len() as f64
    }
}

/// Full report for one prediction matrix.
pub fn evaluate(
    y_true: &[Vec<bool>],
    probs: &Tensor,
    threshold: f64,
    label_names: &[String],
    groups: &[LabelGroup],
    rules: &[ConstraintRule],
) -> Result<MetricReport> {
    let prob_rows = rows(probs);
    let pred = binarize(probs, threshold);
    let suite = f1_suite(y_true, &pred)?;
    if label_names.len() != suite.per_label.len() {
        return Err(Error::invalid("evaluate: label_names length differs from K"));
    }
    let auc = macro_pr_auc(y_true, &prob_rows)?;
    let per_label = suite
        .per_label
        .iter()
        .zip(label_names)
        .zip(&auc.per_label)
        .map(|((s, name), a)| LabelRow {
            label: name.clone(),
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            support: s.support,
            pr_auc: *a,
        })
        .collect();
    Ok(MetricReport {
        num_samples: y_true.len(),
        threshold,
        example_f1: suite.example_f1,
        micro_f1: suite.micro_f1,
        macro_f1: suite.macro_f1,
        macro_precision: suite.macro_precision,
        macro_recall: suite.macro_recall,
        macro_pr_auc: auc.macro_pr_auc,
        pr_auc_excluded: auc.excluded,
        rule_violation_rate: rule_violation_rate(&pred, rules),
        per_label,
        missed_by_dimension: missed_by_dimension(y_true, &pred, groups)?,
    })
}
