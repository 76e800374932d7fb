use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// `a` and `b` never co-occur.
    MutualExclusion,
    /// `a` and `b` are both present or both absent.
    CoAppearance,
    /// `a` requires `b`.
    Implication,
}

/// A pairwise clinical rule over label indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintRule {
    pub kind: RuleKind,
    pub a: usize,
    pub b: usize,
}

impl ConstraintRule {
    pub fn new(kind: RuleKind, a: usize, b: usize) -> Self {
        Self { kind, a, b }
    }

    pub fn mutual_exclusion(a: usize, b: usize) -> Self {
        Self::new(RuleKind::MutualExclusion, a, b)
    }

    pub fn co_appearance(a: usize, b: usize) -> Self {
        Self::new(RuleKind::CoAppearance, a, b)
    }

    pub fn implication(a: usize, b: usize) -> Self {
        Self::new(RuleKind::Implication, a, b)
    }

    pub fn validate(&self, num_labels: usize) -> Result<()> {
        if self.a == self.b {
            return Err(Error::invalid(format!(
                "rule {:?} relates label {} to itself",
                self.kind, self.a
            )));
        }
        if self.a >= num_labels || self.b >= num_labels {
            return Err(Error::invalid(format!(
                "rule {:?}({}, {}) out of range for {num_labels} labels",
                self.kind, self.a, self.b
            )));
        }
        Ok(())
    }

    /// Violation degree on probabilities (or hard labels as 0/1).
    pub fn phi(&self, pa: f64, pb: f64) -> f64 {
        match self.kind {
            RuleKind::MutualExclusion => pa * pb,
            RuleKind::CoAppearance => (pa - pb).abs(),
            RuleKind::Implication => pa * (1.0 - pb),
        }
    }

    pub fn violated(&self, labels: &[bool]) -> bool {
        let (a, b) = (labels[self.a], labels[self.b]);
        match self.kind {
            RuleKind::MutualExclusion => a && b,
            RuleKind::CoAppearance => a != b,
            RuleKind::Implication => a && !b,
        }
    }
}

pub fn validate_rules(rules: &[ConstraintRule], num_labels: usize) -> Result<()> {
    rules.iter().try_for_each(|r| r.validate(num_labels))
}

/// Read a rules file: a JSON array of `{kind, a, b}` objects.
pub fn load_rules(path: &Path) -> Result<Vec<ConstraintRule>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}
