//! Brute-force reference implementations, written without reusing any
//! library code path.

#![allow(dead_code)]

use std::collections::BTreeSet;

/// `K x K` pair counts by scanning every (sample, i, j) triple.
pub fn cooccurrence(labels: &[Vec<u8>], k: usize) -> Vec<u64> {
    let mut out = vec![0u64; k * k];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            out[i * k + j] = labels.iter().filter(|row| row[i] == 1 && row[j] == 1).count() as u64;
        }
    }
    out
}

/// Smallest observed value `v` with `#{s <= v} >= alpha/100 * |S|`, searched by scanning candidates.
/// `alpha` is an integer percentage so the comparison stays in integers.
pub fn percentile(values: &[u64], alpha: u32) -> Option<u64> {
    let n = values.len() as u64;
    let candidates: BTreeSet<u64> = values.iter().copied().collect();
    candidates
        .into_iter()
        .find(|&v| 100 * values.iter().filter(|&&s| s <= v).count() as u64 >= alpha as u64 * n)
}

pub fn adjacency(counts: &[u64], k: usize, alpha: u32) -> Vec<bool> {
    let positive: Vec<u64> = (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .map(|(i, j)| counts[i * k + j])
        .filter(|&c| c > 0)
        .collect();
    let Some(q) = percentile(&positive, alpha) else {
        return vec![false; k * k];
    };
    (0..k * k)
        .map(|idx| {
            let c = counts[idx];
            idx / k != idx % k && c > 0 && c >= q
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fneg: usize,
}

#[derive(Debug, Clone)]
pub struct Scores {
    pub example_f1: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub per_label: Vec<(f64, f64, f64)>,
    pub confusion: Vec<Confusion>,
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Metrics from index sets, one set per label and per sample.
pub fn f1(truth: &[Vec<bool>], pred: &[Vec<bool>]) -> Scores {
    let k = truth[0].len();
    let set = |rows: &[Vec<bool>], j: usize| -> BTreeSet<usize> { (0..rows.len()).filter(|&n| rows[n][j]).collect() };
    let confusion: Vec<Confusion> = (0..k)
        .map(|j| {
            let (t, p) = (set(truth, j), set(pred, j));
            Confusion {
                tp: t.intersection(&p).count(),
                fp: p.difference(&t).count(),
                fneg: t.difference(&p).count(),
            }
        })
        .collect();
    let per_label: Vec<(f64, f64, f64)> = confusion
        .iter()
        .map(|c| {
            let precision = safe_div(c.tp as f64, (c.tp + c.fp) as f64);
            let recall = safe_div(c.tp as f64, (c.tp + c.fneg) as f64);
            let f = safe_div(2.0 * c.tp as f64, (2 * c.tp + c.fp + c.fneg) as f64);
            (precision, recall, f)
        })
        .collect();
    let example: f64 = truth
        .iter()
        .zip(pred)
        .map(|(t, p)| {
            let ts: BTreeSet<usize> = (0..k).filter(|&j| t[j]).collect();
            let ps: BTreeSet<usize> = (0..k).filter(|&j| p[j]).collect();
            if ts.is_empty() && ps.is_empty() {
                1.0
            } else {
                2.0 * ts.intersection(&ps).count() as f64 / (ts.len() + ps.len()) as f64
            }
        })
        .sum();
    // micro: flatten to one long binary vector
    let flat_t: Vec<bool> = truth.iter().flatten().copied().collect();
    let flat_p: Vec<bool> = pred.iter().flatten().copied().collect();
    let tp = flat_t.iter().zip(&flat_p).filter(|(t, p)| **t && **p).count();
    let wrong = flat_t.iter().zip(&flat_p).filter(|(t, p)| t != p).count();
    Scores {
        example_f1: example / truth.len() as f64,
        micro_f1: safe_div(2.0 * tp as f64, (2 * tp + wrong) as f64),
        macro_f1: per_label.iter().map(|s| s.2).sum::<f64>() / k as f64,
        macro_precision: per_label.iter().map(|s| s.0).sum::<f64>() / k as f64,
        macro_recall: per_label.iter().map(|s| s.1).sum::<f64>() / k as f64,
        per_label,
        confusion,
    }
}

/// Step-interpolated PR area by sweeping every distinct score as a threshold.
pub fn pr_auc(truth: &[bool], scores: &[f64]) -> Option<f64> {
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let hits = selected.iter().filter(|&&i| truth[i]).count();
        let recall = hits as f64 / positives as f64;
        let precision = hits as f64 / selected.len() as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(area)
}

/// Mean over labels that have a positive sample; `None` when none do.
pub fn macro_pr_auc(truth: &[Vec<bool>], probs: &[Vec<f64>]) -> Option<f64> {
    let k = truth[0].len();
    let per: Vec<f64> = (0..k)
        .filter_map(|j| {
            let t: Vec<bool> = truth.iter().map(|r| r[j]).collect();
            let s: Vec<f64> = probs.iter().map(|r| r[j]).collect();
            pr_auc(&t, &s)
        })
        .collect();
    (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
}

/// Column `j` comes from `second` iff `j` is in the replace set.
pub fn merge(base: &[Vec<f64>], second: &[Vec<f64>], replace: &[usize]) -> Vec<Vec<f64>> {
    base.iter()
        .zip(second)
        .map(|(b, s)| (0..b.len()).map(|j| if replace.contains(&j) { s[j] } else { b[j] }).collect())
        .collect()
}
