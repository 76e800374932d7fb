//! Synthetic multi-label images with planted prevalence, correlation and rules.
//!
//! Labels are drawn in a fixed order, each conditioned on already-drawn
//! correlated partners, and the whole vector is redrawn if it breaks a rule.
//! Per-label base logits are calibrated by Monte Carlo so the realised
//! marginals match the requested prevalences despite conditioning and
//! rejection. Each positive label paints a colour shift and a stripe
//! texture into its own image region before pixel noise is added.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::manifest::{DatasetManifest, LabelGroup, SampleRecord, Split, MANIFEST_SCHEMA_VERSION};
use crate::diffcore::sigmoid;
use crate::error::{Error, Result};
use crate::losses::{validate_rules, ConstraintRule, RuleKind};

const MAX_REJECTIONS: usize = 10_000;
const CALIBRATION_DRAWS: usize = 20_000;
const CALIBRATION_ROUNDS: usize = 60;
const MAX_RESAMPLE_ROUNDS: u64 = 500;
/// Allowed relative deviation of empirical from target prevalence.
pub const PREVALENCE_TOLERANCE: f64 = 0.2;

fn default_side() -> usize {
    32
}
fn default_patch() -> usize {
    8
}
fn default_noise() -> f64 {
    0.03
}

/// Logit boost applied to the later label of a pair when the earlier one is present.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelatedPair {
    pub a: usize,
    pub b: usize,
    pub strength: f64,
}

/// Visual signature painted for a positive label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Signature {
    /// `[row, col, height, width]` in pixels.
    pub region: [usize; 4],
    /// Additive RGB shift.
    pub color: [f64; 3],
    /// Amplitude of a diagonal stripe pattern.
    pub texture: f64,
    /// Stripe period in pixels.
    pub period: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_labels: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    /// Target prevalence per label, each in (0, 1).
    pub prevalence: Vec<f64>,
    #[serde(default)]
    pub correlated_pairs: Vec<CorrelatedPair>,
    #[serde(default)]
    pub rules: Vec<ConstraintRule>,
    /// Explicit signatures; generated when absent.
    #[serde(default)]
    pub appearance: Option<Vec<Signature>>,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub label_names: Option<Vec<String>>,
    /// Partition of labels into named families; four near-equal families when absent.
    #[serde(default)]
    pub groups: Option<Vec<LabelGroup>>,
}

impl GeneratorConfig {
    pub fn new(prevalence: Vec<f64>) -> Self {
        Self {
            num_labels: prevalence.len(),
            height: default_side(),
            width: default_side(),
            patch_size: default_patch(),
            prevalence,
            correlated_pairs: Vec::new(),
            rules: Vec::new(),
            appearance: None,
            noise_sigma: default_noise(),
            seed: 0,
            label_names: None,
            groups: None,
        }
    }

    pub fn label_names(&self) -> Vec<String> {
        self.label_names
            .clone()
            .unwrap_or_else(|| (0..self.num_labels).map(|k| format!("label_{k}")).collect())
    }

    pub fn groups(&self) -> Vec<LabelGroup> {
        if let Some(g) = &self.groups {
            return g.clone();
        }
        let k = self.num_labels;
        let families = k.min(4);
        (0..families)
            .map(|g| LabelGroup {
                name: format!("dimension_{g}"),
                labels: (g * k / families..(g + 1) * k / families).collect(),
            })
            .collect()
    }

    /// Generated signatures: one patch-aligned cell per label (shared when
    /// labels outnumber cells), a distinct hue and a stripe pattern.
    pub fn appearance(&self) -> Vec<Signature> {
        if let Some(a) = &self.appearance {
            return a.clone();
        }
        let p = self.patch_size;
        let (gh, gw) = (self.height / p, self.width / p);
        let cells = gh * gw;
        let k = self.num_labels;
        (0..k)
            .map(|label| {
                let cell = if k <= cells { label * cells / k } else { label % cells };
                let theta = std::f64::consts::TAU * label as f64 / k as f64;
                let third = std::f64::consts::TAU / 3.0;
                Signature {
                    region: [(cell / gw) * p, (cell % gw) * p, p, p],
                    color: [
                        0.3 * theta.cos(),
                        0.3 * (theta - third).cos(),
                        0.3 * (theta + third).cos(),
                    ],
                    texture: 0.08,
                    period: 2 + label % 3,
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_labels;
        if k == 0 {
            return Err(Error::invalid("generator: num_labels must be positive"));
        }
        if self.prevalence.len() != k {
            return Err(Error::invalid(format!(
                "generator: {} prevalence targets for {k} labels",
                self.prevalence.len()
            )));
        }
        if let Some((i, p)) = self.prevalence.iter().enumerate().find(|(_, p)| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::invalid(format!("generator: prevalence[{i}] = {p} not in (0, 1)")));
        }
        let p = self.patch_size;
        if p == 0 || self.height % p != 0 || self.width % p != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid(format!(
                "generator: {}x{} image not divisible into {p}-pixel patches",
                self.height, self.width
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("generator: noise_sigma must be non-negative"));
        }
        validate_rules(&self.rules, k)?;
        for c in &self.correlated_pairs {
            if c.a == c.b || c.a >= k || c.b >= k || !c.strength.is_finite() {
                return Err(Error::invalid(format!("generator: bad correlated pair {c:?}")));
            }
        }
        if let Some(names) = &self.label_names {
            if names.len() != k {
                return Err(Error::invalid("generator: label_names length differs from num_labels"));
            }
        }
        let groups = self.groups();
        let mut seen = vec![false; k];
        for g in &groups {
            for &l in &g.labels {
                if l >= k || std::mem::replace(&mut seen[l], true) {
                    return Err(Error::invalid(format!("generator: groups do not partition labels (label {l})")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("generator: groups do not cover every label"));
        }
        let appearance = self.appearance();
        if appearance.len() != k {
            return Err(Error::invalid("generator: appearance length differs from num_labels"));
        }
        for (i, s) in appearance.iter().enumerate() {
            let [r, c, h, w] = s.region;
            if h == 0 || w == 0 || r + h > self.height || c + w > self.width || s.period == 0 {
                return Err(Error::invalid(format!("generator: signature {i} region {:?} outside image", s.region)));
            }
        }
        self.check_rule_feasibility()
    }

    fn check_rule_feasibility(&self) -> Result<()> {
        let pi = &self.prevalence;
        for r in &self.rules {
            let (pa, pb) = (pi[r.a], pi[r.b]);
            match r.kind {
                RuleKind::MutualExclusion if pa + pb > 1.0 => {
                    return Err(Error::Infeasible(format!(
                        "mutual exclusion ({}, {}) needs prevalence sum <= 1, got {pa} + {pb}",
                        r.a, r.b
                    )))
                }
                RuleKind::Implication if pa > pb => {
                    return Err(Error::Infeasible(format!(
                        "implication {} => {} needs prevalence {pa} <= {pb}",
                        r.a, r.b
                    )))
                }
                RuleKind::CoAppearance if (pa - pb).abs() > 0.1 * pa.max(pb) => {
                    return Err(Error::Infeasible(format!(
                        "co-appearance ({}, {}) needs near-equal prevalence, got {pa} and {pb}",
                        r.a, r.b
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Label sampler with calibrated base logits.
#[derive(Clone, Debug)]
pub struct LabelSampler {
    base: Vec<f64>,
    /// `(earlier, later, strength)`.
    pairs: Vec<(usize, usize, f64)>,
    rules: Vec<ConstraintRule>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl LabelSampler {
    pub fn calibrate(config: &GeneratorConfig) -> Result<Self> {
        let pairs = config
            .correlated_pairs
            .iter()
            .map(|c| (c.a.min(c.b), c.a.max(c.b), c.strength))
            .collect();
        let mut sampler = Self {
            base: config.prevalence.iter().map(|&p| logit(p)).collect(),
            pairs,
            rules: config.rules.clone(),
        };
        let k = config.num_labels;
        let mut realized = vec![0.0; k];
        for _ in 0..CALIBRATION_ROUNDS {
            // same stream every round, so the update sees no sampling noise
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
            realized = sampler.marginals(&mut rng, CALIBRATION_DRAWS)?;
            let worst = realized
                .iter()
                .zip(&config.prevalence)
                .map(|(r, t)| (r - t).abs() / t)
                .fold(0.0, f64::max);
            if worst < 0.01 {
                return Ok(sampler);
            }
            let floor = 0.5 / CALIBRATION_DRAWS as f64;
            for ((b, r), t) in sampler.base.iter_mut().zip(&realized).zip(&config.prevalence) {
                *b += logit(*t) - logit(r.clamp(floor, 1.0 - floor));
            }
        }
        for (i, (r, t)) in realized.iter().zip(&config.prevalence).enumerate() {
            if (r - t).abs() / t > 0.1 {
                return Err(Error::Infeasible(format!(
                    "label {i}: prevalence {t} not reachable under the rules (best {r:.4})"
                )));
            }
        }
        Ok(sampler)
    }

    fn marginals(&self, rng: &mut ChaCha8Rng, draws: usize) -> Result<Vec<f64>> {
        let mut counts = vec![0usize; self.base.len()];
        for _ in 0..draws {
            for (c, &on) in counts.iter_mut().zip(&self.sample(rng)?) {
                *c += on as usize;
            }
        }
        Ok(counts.iter().map(|&c| c as f64 / draws as f64).collect())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Vec<bool>> {
        let k = self.base.len();
        for _ in 0..MAX_REJECTIONS {
            let mut y = vec![false; k];
            for label in 0..k {
                let shift: f64 = self
                    .pairs
                    .iter()
                    .filter(|(e, l, _)| *l == label && y[*e])
                    .map(|(_, _, s)| s)
                    .sum();
                y[label] = rng.gen::<f64>() < sigmoid(self.base[label] + shift);
            }
            if !self.rules.iter().any(|r| r.violated(&y)) {
                return Ok(y);
            }
        }
        Err(Error::Infeasible(format!(
            "no rule-consistent label vector after {MAX_REJECTIONS} draws"
        )))
    }
}

/// Paint a label vector into an image and add pixel noise.
pub fn render(config: &GeneratorConfig, appearance: &[Signature], labels: &[bool], rng: &mut impl Rng) -> Result<Image> {
    const BACKGROUND: [f64; 3] = [0.5, 0.45, 0.4];
    let mut img = Image::filled(config.height, config.width, BACKGROUND);
    for (sig, _) in appearance.iter().zip(labels).filter(|(_, on)| **on) {
        let [r0, c0, h, w] = sig.region;
        for row in r0..r0 + h {
            for col in c0..c0 + w {
                let phase = std::f64::consts::TAU * ((row + col) % sig.period) as f64 / sig.period as f64;
                let stripe = sig.texture * phase.sin();
                for ch in 0..3 {
                    let i = img.index(row, col, ch);
                    img.pixels[i] += sig.color[ch] + stripe;
                }
            }
        }
    }
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        for p in &mut img.pixels {
            *p += normal.sample(rng);
        }
    }
    img.clamp_unit();
    Ok(img.quantized())
}

/// In-memory result of [`generate`].
#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
}

fn prevalence_ok(labels: &[Vec<bool>], targets: &[f64]) -> bool {
    let n = labels.len() as f64;
    targets.iter().enumerate().all(|(k, &t)| {
        let count = labels.iter().filter(|y| y[k]).count() as f64;
        let (lo, hi) = ((1.0 - PREVALENCE_TOLERANCE) * t * n, (1.0 + PREVALENCE_TOLERANCE) * t * n);
        if lo.ceil() > hi.floor() {
            // no integer count inside the band: accept the nearest one
            count == (t * n).round()
        } else {
            count >= lo && count <= hi
        }
    })
}

/// Draw labels and images for `n_labeled` (split 80/10/10) plus `n_unlabeled` samples.
pub fn generate(config: &GeneratorConfig, n_labeled: usize, n_unlabeled: usize) -> Result<GeneratedDataset> {
    config.validate()?;
    let k = config.num_labels;
    if n_labeled < 10 * k {
        return Err(Error::invalid(format!(
            "generator: need at least {} labeled samples for {k} labels, got {n_labeled}",
            10 * k
        )));
    }
    let sampler = LabelSampler::calibrate(config)?;
    let appearance = config.appearance();

    let mut labeled = None;
    for round in 0..MAX_RESAMPLE_ROUNDS {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(round.wrapping_mul(0x2545_f491_4f6c_dd1d)));
        let labels: Vec<Vec<bool>> = (0..n_labeled).map(|_| sampler.sample(&mut rng)).collect::<Result<_>>()?;
        if prevalence_ok(&labels, &config.prevalence) {
            labeled = Some((labels, rng));
            break;
        }
    }
    let Some((labels, mut rng)) = labeled else {
        return Err(Error::Infeasible(format!(
            "could not realise target prevalences within ±{:.0}% using {n_labeled} samples",
            PREVALENCE_TOLERANCE * 100.0
        )));
    };

    let mut order: Vec<usize> = (0..n_labeled).collect();
    for i in (1..n_labeled).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let n_train = (0.8 * n_labeled as f64).round() as usize;
    let n_val = (0.1 * n_labeled as f64).round() as usize;
    let mut split = vec![Split::Test; n_labeled];
    for (rank, &idx) in order.iter().enumerate() {
        split[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut samples = Vec::with_capacity(n_labeled + n_unlabeled);
    let mut images = Vec::with_capacity(n_labeled + n_unlabeled);
    for (i, y) in labels.iter().enumerate() {
        images.push(render(config, &appearance, y, &mut rng)?);
        let id = format!("L{i:05}");
        samples.push(SampleRecord {
            image: format!("images/{id}.ppm"),
            id,
            labels: Some(y.iter().map(|&b| b as u8).collect()),
            split: split[i],
        });
    }
    for i in 0..n_unlabeled {
        let y = sampler.sample(&mut rng)?;
        images.push(render(config, &appearance, &y, &mut rng)?);
        let id = format!("U{i:05}");
        samples.push(SampleRecord {
            image: format!("images/{id}.ppm"),
            id,
            labels: None,
            split: Split::PretrainUnlabeled,
        });
    }

    let mut manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed: config.seed,
        height: config.height,
        width: config.width,
        patch_size: config.patch_size,
        label_names: config.label_names(),
        groups: config.groups(),
        rules: config.rules.clone(),
        prevalence: Vec::new(),
        samples,
    };
    manifest.prevalence = manifest.compute_prevalence(Split::Train)?;
    manifest.validate()?;
    Ok(GeneratedDataset { manifest, images })
}
