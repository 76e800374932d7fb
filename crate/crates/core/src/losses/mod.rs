//! Constraint-aware multi-label objective.
//!
//! `total = ASL + λ₁ · constraint + λ₂ · prior`, where every term takes a
//! `[batch, K]` matrix of probabilities.

mod rules;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use rules::{load_rules, validate_rules, ConstraintRule, RuleKind};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;
/// Floor for prevalences used as divisors (labels unseen in training).
pub const PREVALENCE_FLOOR: f64 = 1e-4;

/// Asymmetric loss settings with resolved per-class weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AslConfig {
    /// Focusing exponent on positives.
    pub focus_pos: f64,
    /// Focusing exponent on negatives.
    pub focus_neg: f64,
    /// Rarity scale τ.
    pub rarity_scale: f64,
    /// γ_k = sqrt(τ / π_k).
    pub class_weights: Vec<f64>,
}

impl AslConfig {
    /// Weights from prevalences; `rarity_scale` defaults to the smallest
    /// (floored) prevalence, which gives the rarest class weight 1.
    pub fn from_prevalence(
        prevalence: &[f64],
        focus_pos: f64,
        focus_neg: f64,
        rarity_scale: Option<f64>,
    ) -> Result<Self> {
        if prevalence.is_empty() {
            return Err(Error::invalid("asl: empty prevalence vector"));
        }
        if !(focus_pos >= 0.0 && focus_neg >= 0.0 && focus_pos <= focus_neg) {
            return Err(Error::invalid(format!(
                "asl: need 0 <= focus_pos <= focus_neg, got {focus_pos}, {focus_neg}"
            )));
        }
        let floored: Vec<f64> = prevalence.iter().map(|p| p.max(PREVALENCE_FLOOR)).collect();
        let tau = rarity_scale.unwrap_or_else(|| floored.iter().copied().fold(f64::INFINITY, f64::min));
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("asl: rarity scale {tau} must be positive")));
        }
        Ok(Self {
            focus_pos,
            focus_neg,
            rarity_scale: tau,
            class_weights: floored.iter().map(|p| (tau / p).sqrt()).collect(),
        })
    }

    /// Plain binary cross-entropy: no focusing, unit weights.
    pub fn bce(num_labels: usize) -> Self {
        Self {
            focus_pos: 0.0,
            focus_neg: 0.0,
            rarity_scale: 1.0,
            class_weights: vec![1.0; num_labels],
        }
    }

    pub fn restricted_to(&self, labels: &[usize]) -> Self {
        Self {
            class_weights: labels.iter().map(|&k| self.class_weights[k]).collect(),
            ..self.clone()
        }
    }
}

/// Weights, rules and prior of the full objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda_constraint: f64,
    pub lambda_prior: f64,
    pub rules: Vec<ConstraintRule>,
    pub prior: Vec<f64>,
    pub asl: AslConfig,
    pub disable_constraints: bool,
    pub disable_prior: bool,
}

impl ObjectiveConfig {
    pub const DEFAULT_LAMBDA_CONSTRAINT: f64 = 0.1;
    pub const DEFAULT_LAMBDA_PRIOR: f64 = 0.05;

    pub fn new(prior: Vec<f64>, rules: Vec<ConstraintRule>, asl: AslConfig) -> Self {
        Self {
            lambda_constraint: Self::DEFAULT_LAMBDA_CONSTRAINT,
            lambda_prior: Self::DEFAULT_LAMBDA_PRIOR,
            rules,
            prior,
            asl,
            disable_constraints: false,
            disable_prior: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.prior.len();
        if self.asl.class_weights.len() != k {
            return Err(Error::invalid(format!(
                "objective: {} class weights for {k} labels",
                self.asl.class_weights.len()
            )));
        }
        if !(self.lambda_constraint >= 0.0 && self.lambda_prior >= 0.0) {
            return Err(Error::invalid("objective: lambda weights must be non-negative"));
        }
        validate_rules(&self.rules, k)
    }

    /// Objective over a subset of labels; rules touching other labels are dropped
    /// and the remaining ones re-indexed into the subset.
    pub fn restricted_to(&self, labels: &[usize]) -> Self {
        let pos = |k: usize| labels.iter().position(|&l| l == k);
        let rules = self
            .rules
            .iter()
            .filter_map(|r| Some(ConstraintRule::new(r.kind, pos(r.a)?, pos(r.b)?)))
            .collect();
        Self {
            rules,
            prior: labels.iter().map(|&k| self.prior[k]).collect(),
            asl: self.asl.restricted_to(labels),
            ..self.clone()
        }
    }
}

/// Scalar values of each objective term after a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub asl: f64,
    pub constraint: f64,
    pub prior: f64,
}

fn check_batch(p: &Var<'_>, what: &'static str) -> Result<(usize, usize)> {
    match p.shape()[..] {
        [b, k] if b > 0 && k > 0 => Ok((b, k)),
        ref s => Err(Error::shape(what, format!("expected [batch, K] probabilities, got {s:?}"))),
    }
}

/// Asymmetric loss, summed over classes and averaged over the batch.
pub fn asl<'t>(p: Var<'t>, y: &Tensor, cfg: &AslConfig) -> Result<Var<'t>> {
    let (batch, k) = check_batch(&p, "asl")?;
    if y.shape() != [batch, k] {
        return Err(Error::shape("asl", format!("probabilities {:?} vs labels {:?}", p.shape(), y.shape())));
    }
    if cfg.class_weights.len() != k {
        return Err(Error::shape("asl", format!("{} class weights for {k} labels", cfg.class_weights.len())));
    }
    let tape = p.tape();
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let one_minus = pc.neg().add_scalar(1.0);

    let pos = {
        let log_p = pc.log();
        let focused = if cfg.focus_pos == 0.0 {
            log_p
        } else {
            one_minus.powf(cfg.focus_pos).mul(log_p)?
        };
        focused.mul(tape.constant(y.clone()))?
    };
    let neg = {
        let log_q = one_minus.log();
        let focused = if cfg.focus_neg == 0.0 {
            log_q
        } else {
            pc.powf(cfg.focus_neg).mul(log_q)?
        };
        let inv_y: Vec<f64> = y.data().iter().map(|v| 1.0 - v).collect();
        focused.mul(tape.constant(Tensor::new(vec![batch, k], inv_y)?))?
    };
    let weights = tape.constant(Tensor::from_vec(cfg.class_weights.clone()));
    Ok(pos.add(neg)?.mul_bcast(weights)?.sum().scale(-1.0 / batch as f64))
}

/// `[batch, K] -> [1, batch]` column view of one label.
fn column<'t>(pt: Var<'t>, k: usize) -> Result<Var<'t>> {
    pt.gather_rows(Rc::new(vec![k]))
}

/// Sum over rules of the batch-mean hinge `max(0, φ(p_a, p_b))`.
pub fn constraint_penalty<'t>(p: Var<'t>, rules: &[ConstraintRule]) -> Result<Var<'t>> {
    let (_, k) = check_batch(&p, "constraint_penalty")?;
    validate_rules(rules, k)?;
    let tape = p.tape();
    if rules.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let pt = p.transpose()?;
    let mut total: Option<Var<'t>> = None;
    for rule in rules {
        let (pa, pb) = (column(pt, rule.a)?, column(pt, rule.b)?);
        let phi = match rule.kind {
            RuleKind::MutualExclusion => pa.mul(pb)?,
            RuleKind::CoAppearance => pa.sub(pb)?.abs(),
            RuleKind::Implication => pa.mul(pb.neg().add_scalar(1.0))?,
        };
        let term = phi.relu().mean();
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty rules"))
}

/// `Σ_k π_k log(π_k / q_k)` with `q_k` the batch-mean predicted probability.
pub fn kl_prior<'t>(p: Var<'t>, prior: &[f64]) -> Result<Var<'t>> {
    let (_, k) = check_batch(&p, "kl_prior")?;
    if prior.len() != k {
        return Err(Error::shape("kl_prior", format!("{} priors for {k} labels", prior.len())));
    }
    let tape = p.tape();
    let q = p.transpose()?.mean_last().clamp(PROB_EPS, 1.0);
    let pi: Vec<f64> = prior.iter().map(|v| v.clamp(PROB_EPS, 1.0)).collect();
    let entropy_term: f64 = pi.iter().map(|v| v * v.ln()).sum();
    let cross = q.log().mul(tape.constant(Tensor::from_vec(pi)))?.sum();
    Ok(cross.neg().add_scalar(entropy_term))
}

/// Weighted objective plus the value of each term.
///
/// Disabled terms, and terms whose weight is zero, are not evaluated and are
/// reported as exactly 0.
pub fn total_loss<'t>(p: Var<'t>, y: &Tensor, cfg: &ObjectiveConfig) -> Result<(Var<'t>, LossBreakdown)> {
    let diag = asl(p, y, &cfg.asl)?;
    let mut breakdown = LossBreakdown {
        asl: diag.item(),
        ..Default::default()
    };
    let mut total = diag;
    if !cfg.disable_constraints && cfg.lambda_constraint > 0.0 {
        let c = constraint_penalty(p, &cfg.rules)?;
        breakdown.constraint = c.item();
        total = total.add(c.scale(cfg.lambda_constraint))?;
    }
    if !cfg.disable_prior && cfg.lambda_prior > 0.0 {
        let kl = kl_prior(p, &cfg.prior)?;
        breakdown.prior = kl.item();
        total = total.add(kl.scale(cfg.lambda_prior))?;
    }
    breakdown.total = total.item();
    Ok((total, breakdown))
}

/// Select label columns of a `[batch, K]` matrix.
pub fn select_columns<'t>(p: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    p.transpose()?.gather_rows(Rc::new(labels.to_vec()))?.transpose()
}

/// Convenience for evaluating a loss term on plain probabilities.
pub fn eval_on<F>(probs: &Tensor, f: F) -> Result<f64>
where
    F: for<'t> FnOnce(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let p = tape.constant(probs.clone());
    Ok(f(p)?.item())
}
