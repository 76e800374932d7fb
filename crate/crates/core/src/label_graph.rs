//! Label graph built from training-split statistics.
//!
//! Pipeline: pairwise co-occurrence counts, percentile-thresholded
//! adjacency, rule-driven overrides, then count-normalised edge confidence.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ConstraintRule, RuleKind};

/// Percentile used for the adjacency threshold unless configured otherwise.
pub const DEFAULT_ALPHA: f64 = 25.0;

/// Symmetric `K x K` co-occurrence counts with a zero diagonal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceMatrix {
    num_labels: usize,
    counts: Vec<u64>,
}

impl CooccurrenceMatrix {
    pub fn from_counts(num_labels: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_labels * num_labels {
            return Err(Error::invalid("cooccurrence: counts must be K x K"));
        }
        for i in 0..num_labels {
            if counts[i * num_labels + i] != 0 {
                return Err(Error::invalid("cooccurrence: diagonal must be zero"));
            }
            for j in 0..i {
                if counts[i * num_labels + j] != counts[j * num_labels + i] {
                    return Err(Error::invalid("cooccurrence: counts must be symmetric"));
                }
            }
        }
        Ok(Self { num_labels, counts })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.num_labels + j]
    }

    pub fn max(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Strictly positive counts over unordered pairs `i < j`.
    pub fn positive_pairs(&self) -> Vec<u64> {
        let k = self.num_labels;
        (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .filter(|&c| c > 0)
            .collect()
    }
}

/// Symmetric boolean adjacency without self-loops.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencyMatrix {
    num_labels: usize,
    edges: Vec<bool>,
}

impl AdjacencyMatrix {
    pub fn empty(num_labels: usize) -> Self {
        Self {
            num_labels,
            edges: vec![false; num_labels * num_labels],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges[i * self.num_labels + j]
    }

    fn set(&mut self, i: usize, j: usize, value: bool) {
        let k = self.num_labels;
        self.edges[i * k + j] = value;
        self.edges[j * k + i] = value;
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count() / 2
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.num_labels).filter(|&j| self.has_edge(i, j)).collect()
    }

    /// Row-major mask including self-loops, as consumed by attention.
    pub fn with_self_loops(&self) -> Vec<bool> {
        let k = self.num_labels;
        (0..k * k)
            .map(|idx| idx / k == idx % k || self.edges[idx])
            .collect()
    }

    /// Symmetric, zero diagonal.
    pub fn check_invariants(&self) -> Result<()> {
        let k = self.num_labels;
        for i in 0..k {
            if self.has_edge(i, i) {
                return Err(Error::invalid(format!("adjacency: self-loop on {i}")));
            }
            for j in 0..i {
                if self.has_edge(i, j) != self.has_edge(j, i) {
                    return Err(Error::invalid(format!("adjacency: asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustAction {
    Enhance,
    Suppress,
}

/// Prior-knowledge override forcing an edge on or off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphAdjustment {
    pub a: usize,
    pub b: usize,
    pub action: AdjustAction,
}

impl GraphAdjustment {
    pub fn enhance(a: usize, b: usize) -> Self {
        Self { a, b, action: AdjustAction::Enhance }
    }

    pub fn suppress(a: usize, b: usize) -> Self {
        Self { a, b, action: AdjustAction::Suppress }
    }

    /// Mutual exclusions suppress their pair; co-appearance and implication enhance it.
    pub fn from_rule(rule: &ConstraintRule) -> Self {
        match rule.kind {
            RuleKind::MutualExclusion => Self::suppress(rule.a, rule.b),
            RuleKind::CoAppearance | RuleKind::Implication => Self::enhance(rule.a, rule.b),
        }
    }
}

/// `M_ij = Σ_n Y_ni Y_nj` for `i ≠ j`.
pub fn cooccurrence<R: AsRef<[u8]>>(labels: &[R], num_labels: usize) -> Result<CooccurrenceMatrix> {
    if labels.is_empty() {
        return Err(Error::invalid("cooccurrence: need at least one sample"));
    }
    let k = num_labels;
    let mut counts = vec![0u64; k * k];
    for (n, row) in labels.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != k {
            return Err(Error::invalid(format!("cooccurrence: row {n} has {} labels, expected {k}", row.len())));
        }
        if let Some(v) = row.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("cooccurrence: row {n} has non-binary entry {v}")));
        }
        let on: Vec<usize> = (0..k).filter(|&i| row[i] == 1).collect();
        for (x, &i) in on.iter().enumerate() {
            for &j in &on[x + 1..] {
                counts[i * k + j] += 1;
                counts[j * k + i] += 1;
            }
        }
    }
    Ok(CooccurrenceMatrix { num_labels: k, counts })
}

/// Nearest-rank percentile: smallest element whose rank is at least `alpha/100 · n`.
pub fn nearest_rank(values: &[u64], alpha: f64) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    // tolerance keeps e.g. 30% of 10 at rank 3 despite float rounding
    let rank = ((alpha / 100.0 * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Some(sorted[rank.min(n) - 1])
}

/// `A_ij = 1` iff `M_ij >= Q_alpha` of the positive counts; no positive counts gives no edges.
pub fn threshold_adjacency(m: &CooccurrenceMatrix, alpha: f64) -> Result<AdjacencyMatrix> {
    if !(0.0..=100.0).contains(&alpha) {
        return Err(Error::invalid(format!("threshold_adjacency: alpha {alpha} outside [0, 100]")));
    }
    let k = m.num_labels;
    let mut adj = AdjacencyMatrix::empty(k);
    let Some(q) = nearest_rank(&m.positive_pairs(), alpha) else {
        return Ok(adj);
    };
    for i in 0..k {
        for j in i + 1..k {
            let c = m.get(i, j);
            if c > 0 && c >= q {
                adj.set(i, j, true);
            }
        }
    }
    Ok(adj)
}

pub fn apply_adjustments(adj: &AdjacencyMatrix, adjustments: &[GraphAdjustment]) -> Result<AdjacencyMatrix> {
    let k = adj.num_labels;
    let mut seen: BTreeMap<(usize, usize), AdjustAction> = BTreeMap::new();
    for g in adjustments {
        if g.a == g.b || g.a >= k || g.b >= k {
            return Err(Error::invalid(format!("adjustment ({}, {}) invalid for {k} labels", g.a, g.b)));
        }
        let key = (g.a.min(g.b), g.a.max(g.b));
        if let Some(prev) = seen.insert(key, g.action) {
            if prev != g.action {
                return Err(Error::invalid(format!(
                    "conflicting adjustments for pair ({}, {})",
                    key.0, key.1
                )));
            }
        }
    }
    let mut out = adj.clone();
    for ((a, b), action) in seen {
        out.set(a, b, action == AdjustAction::Enhance);
    }
    Ok(out)
}

/// `M_ij / max M`, row-major `K x K`.
pub fn edge_confidence(m: &CooccurrenceMatrix) -> Result<Vec<f64>> {
    let max = m.max();
    if max == 0 {
        return Err(Error::invalid("edge_confidence: co-occurrence matrix is all zero"));
    }
    Ok(m.counts.iter().map(|&c| c as f64 / max as f64).collect())
}

/// Everything the attention decoder needs from the training statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelGraph {
    pub alpha: f64,
    pub cooccurrence: CooccurrenceMatrix,
    pub adjacency: AdjacencyMatrix,
    /// Row-major edge confidence; all zero when no labels ever co-occur.
    pub confidence: Vec<f64>,
}

impl LabelGraph {
    pub fn build<R: AsRef<[u8]>>(
        train_labels: &[R],
        num_labels: usize,
        alpha: f64,
        adjustments: &[GraphAdjustment],
    ) -> Result<Self> {
        let m = cooccurrence(train_labels, num_labels)?;
        let thresholded = threshold_adjacency(&m, alpha)?;
        let adjacency = apply_adjustments(&thresholded, adjustments)?;
        let confidence = if m.max() == 0 {
            vec![0.0; num_labels * num_labels]
        } else {
            edge_confidence(&m)?
        };
        Ok(Self {
            alpha,
            cooccurrence: m,
            adjacency,
            confidence,
        })
    }

    /// Graph with no edges; every label only attends to itself.
    pub fn isolated(num_labels: usize) -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            cooccurrence: CooccurrenceMatrix {
                num_labels,
                counts: vec![0; num_labels * num_labels],
            },
            adjacency: AdjacencyMatrix::empty(num_labels),
            confidence: vec![0.0; num_labels * num_labels],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.adjacency.num_labels()
    }

    /// Confidence with self-loops fixed at 1, as applied to attention.
    pub fn confidence_with_self_loops(&self) -> Vec<f64> {
        let k = self.num_labels();
        let mut c = self.confidence.clone();
        for i in 0..k {
            c[i * k + i] = 1.0;
        }
        c
    }

    pub fn export(&self, label_names: &[String]) -> GraphExport {
        let k = self.num_labels();
        let mut edges = Vec::new();
        for i in 0..k {
            for j in i + 1..k {
                if self.adjacency.has_edge(i, j) {
                    edges.push(EdgeExport {
                        a: i,
                        b: j,
                        count: self.cooccurrence.get(i, j),
                        confidence: self.confidence[i * k + j],
                    });
                }
            }
        }
        GraphExport {
            num_labels: k,
            alpha: self.alpha,
            label_names: label_names.to_vec(),
            adjacency: (0..k).map(|i| self.adjacency.neighbors(i)).collect(),
            edges,
        }
    }
}

/// Inspection format: adjacency lists plus per-edge counts and confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub num_labels: usize,
    pub alpha: f64,
    pub label_names: Vec<String>,
    pub adjacency: Vec<Vec<usize>>,
    pub edges: Vec<EdgeExport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeExport {
    pub a: usize,
    pub b: usize,
    pub count: u64,
    pub confidence: f64,
}
