//! Dual-model boosting: a second model fine-tuned on weak labels replaces the
//! base model's outputs on the lowest-F1 labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gather, shuffle, AdamW, AdamWConfig, SplitData, TrainEpoch, TrainOutcome};
use crate::dataset::{Dataset, Image, Split, CHANNELS};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{select_columns, total_loss, LossBreakdown, ObjectiveConfig};
use crate::mae::patch_batch;
use crate::metrics::{binarize, f1_suite, DEFAULT_THRESHOLD};
use crate::model::Model;

fn d_erase_prob() -> f64 {
    0.5
}
fn d_erase_area() -> f64 {
    0.15
}
fn d_jitter() -> f64 {
    0.05
}

/// Label-preserving perturbations for the second model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability that an image gets an erased rectangle.
    #[serde(default = "d_erase_prob")]
    pub erase_prob: f64,
    /// Largest erased area as a fraction of the image; 0 disables erasing.
    #[serde(default = "d_erase_area")]
    pub erase_area: f64,
    /// Half-width of the uniform per-channel offset; 0 disables jitter.
    #[serde(default = "d_jitter")]
    pub channel_jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            erase_prob: d_erase_prob(),
            erase_area: d_erase_area(),
            channel_jitter: d_jitter(),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            erase_prob: 0.0,
            erase_area: 0.0,
            channel_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.erase_prob) || !unit(self.erase_area) || !unit(self.channel_jitter) {
            return Err(Error::invalid(format!("augment: values must lie in [0, 1], got {self:?}")));
        }
        Ok(())
    }

    pub fn apply(&self, img: &Image, rng: &mut impl Rng) -> Image {
        let mut out = img.clone();
        if self.erase_area > 0.0 && rng.gen_bool(self.erase_prob) {
            random_erase(&mut out, self.erase_area, rng);
        }
        if self.channel_jitter > 0.0 {
            channel_jitter(&mut out, self.channel_jitter, rng);
        }
        out
    }
}

/// Zero a random rectangle covering up to `max_area` of the image.
pub fn random_erase(img: &mut Image, max_area: f64, rng: &mut impl Rng) {
    let (h, w) = (img.height, img.width);
    let target = rng.gen_range(0.0..=max_area) * (h * w) as f64;
    let aspect: f64 = rng.gen_range(0.5..=2.0);
    let eh = ((target * aspect).sqrt().round() as usize).min(h);
    let ew = ((target / aspect).sqrt().round() as usize).min(w);
    if eh == 0 || ew == 0 {
        return;
    }
    let r0 = rng.gen_range(0..=h - eh);
    let c0 = rng.gen_range(0..=w - ew);
    let data = &mut img.pixels;
    for r in r0..r0 + eh {
        for c in c0..c0 + ew {
            let at = (r * w + c) * CHANNELS;
            data[at..at + CHANNELS].fill(0.0);
        }
    }
}

/// Add one uniform offset in `[-amount, amount]` per channel, clamped to `[0, 1]`.
pub fn channel_jitter(img: &mut Image, amount: f64, rng: &mut impl Rng) {
    let offsets: Vec<f64> = (0..CHANNELS).map(|_| rng.gen_range(-amount..=amount)).collect();
    for px in img.pixels.chunks_mut(CHANNELS) {
        for (v, o) in px.iter_mut().zip(&offsets) {
            *v = (*v + o).clamp(0.0, 1.0);
        }
    }
}

fn d_epochs() -> usize {
    20
}
fn d_batch() -> usize {
    32
}
fn d_f1_threshold() -> f64 {
    0.5
}
fn d_replace() -> usize {
    5
}
fn d_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn d_optimizer() -> AdamWConfig {
    AdamWConfig {
        lr: 5e-4,
        ..AdamWConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoostConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Labels whose base validation F1 falls below this are fine-tuned.
    #[serde(default = "d_f1_threshold")]
    pub f1_threshold: f64,
    /// Number of lowest-F1 labels whose predictions are replaced.
    #[serde(default = "d_replace")]
    pub replace_count: usize,
    #[serde(default = "d_threshold")]
    pub threshold: f64,
    #[serde(default = "d_optimizer")]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            batch_size: d_batch(),
            f1_threshold: d_f1_threshold(),
            replace_count: d_replace(),
            threshold: d_threshold(),
            optimizer: d_optimizer(),
            augment: AugmentConfig::default(),
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("boost: epochs and batch_size must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!("boost: threshold {} not in (0, 1)", self.threshold)));
        }
        self.optimizer.validate()?;
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostingPlan {
    /// Labels the second model is trained on, ascending.
    pub finetune_set: Vec<usize>,
    /// Labels whose predictions come from the second model, ascending F1.
    pub replace_set: Vec<usize>,
    pub augment: AugmentConfig,
}

impl BoostingPlan {
    pub fn is_noop(&self) -> bool {
        self.finetune_set.is_empty()
    }

    /// Fine-tune labels plus any replaced label outside them, ascending.
    /// Every column the merge takes from the second model gets a training signal.
    pub fn trained_labels(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.finetune_set.iter().chain(&self.replace_set).copied().collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Pick the weak labels and the replacement set; F1 ties go to the lower index.
pub fn select_boost_labels(f1: &[f64], f1_threshold: f64, replace_count: usize, augment: AugmentConfig) -> BoostingPlan {
    let finetune_set = (0..f1.len()).filter(|&k| f1[k] < f1_threshold).collect();
    let mut order: Vec<usize> = (0..f1.len()).collect();
    order.sort_by(|&a, &b| f1[a].total_cmp(&f1[b]).then(a.cmp(&b)));
    order.truncate(replace_count.min(f1.len()));
    BoostingPlan {
        finetune_set,
        replace_set: order,
        augment,
    }
}

/// Column `k` from `second` when `k` is in `replace_set`, else from `base`.
pub fn merge_predictions(base: &Tensor, second: &Tensor, replace_set: &[usize]) -> Result<Tensor> {
    if base.shape() != second.shape() || base.shape().len() != 2 {
        return Err(Error::shape(
            "merge_predictions",
            format!("base {:?} vs second {:?}", base.shape(), second.shape()),
        ));
    }
    let k = base.shape()[1];
    if let Some(&bad) = replace_set.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("replace label {bad} out of range for {k} labels")));
    }
    let mut take = vec![false; k];
    replace_set.iter().for_each(|&l| take[l] = true);
    let data = base
        .data()
        .iter()
        .zip(second.data())
        .enumerate()
        .map(|(i, (&b, &s))| if take[i % k] { s } else { b })
        .collect();
    Tensor::new(base.shape().to_vec(), data)
}

/// Objective restricted to `labels`; other columns get no loss.
pub fn boost_loss<'t>(
    model: &Model,
    params: &[Var<'t>],
    patches: &Tensor,
    targets: &Tensor,
    labels: &[usize],
    objective: &ObjectiveConfig,
) -> Result<(Var<'t>, LossBreakdown)> {
    let probs = select_columns(model.forward(params, patches)?, labels)?;
    let y = select_target_columns(targets, labels)?;
    total_loss(probs, &y, &objective.restricted_to(labels))
}

fn select_target_columns(t: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = (t.shape()[0], t.shape()[1]);
    let data = (0..n).flat_map(|i| labels.iter().map(move |&l| t.data()[i * k + l])).collect();
    Tensor::new(vec![n, labels.len()], data)
}

/// Train the second model from the base weights on augmented data.
///
/// An empty fine-tune set returns the base model unchanged.
pub fn boost_finetune(
    base: &Model,
    plan: &BoostingPlan,
    data: &Dataset,
    objective: &ObjectiveConfig,
    cfg: &BoostConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&TrainEpoch),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if plan.is_noop() {
        log::warn!("boosting plan has no labels below the F1 threshold; returning the base model");
        return Ok(TrainOutcome {
            model: base.clone(),
            log: Vec::new(),
            best_epoch: 0,
        });
    }
    let p = base.config.encoder.patch_size;
    let (train_images, train_labels) = data.split(Split::Train);
    if train_images.is_empty() {
        return Err(Error::EmptySplit(Split::Train.to_string()));
    }
    if cfg.batch_size > train_images.len() {
        return Err(Error::invalid(format!(
            "boost: batch_size {} exceeds the {} training samples",
            cfg.batch_size,
            train_images.len()
        )));
    }
    let train = SplitData::new(train_images.into_iter().cloned().collect(), train_labels, p)?;
    let val = SplitData::from_dataset(data, Split::Val, p)?;
    let labels = &plan.trained_labels();
    let val_truth: Vec<Vec<bool>> = val.labels.iter().map(|r| labels.iter().map(|&l| r[l]).collect()).collect();
    let score = |m: &Model| -> Result<(f64, f64)> {
        let probs = select_target_columns(&m.predict_patches_chunked(&val.patches)?, labels)?;
        let s = f1_suite(&val_truth, &binarize(&probs, cfg.threshold))?;
        Ok((s.macro_f1, s.micro_f1))
    };

    let mut model = base.clone();
    model.seed = seed;
    let mut opt = AdamW::new(&model.store, cfg.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x626f_6f73);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = (score(&model)?.0, 0, model.store.clone());
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut sums = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let augmented: Vec<Image> = batch.iter().map(|&i| plan.augment.apply(&train.images[i], &mut rng)).collect();
            let refs: Vec<&Image> = augmented.iter().collect();
            let x = patch_batch(&refs, p)?;
            let y = gather(&train.targets, batch)?;
            let tape = Tape::new();
            let params = model.store.bind(&tape);
            let (loss, parts) = boost_loss(&model, &params, &x, &y, labels, objective)?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("boost loss terms {parts:?}"),
                });
            }
            let grads = tape.backward(loss)?;
            opt.step(&mut model.store, &grads).map_err(|e| Error::Diverged {
                epoch,
                detail: e.to_string(),
            })?;
            let w = batch.len() as f64;
            sums.total += parts.total * w;
            sums.asl += parts.asl * w;
            sums.constraint += parts.constraint * w;
            sums.prior += parts.prior * w;
        }
        let n = train.len() as f64;
        let (macro_f1, micro_f1) = score(&model)?;
        let record = TrainEpoch {
            epoch,
            total: sums.total / n,
            asl: sums.asl / n,
            constraint: sums.constraint / n,
            prior: sums.prior / n,
            val_macro_f1: macro_f1,
            val_micro_f1: micro_f1,
        };
        if macro_f1 > best.0 {
            best = (macro_f1, epoch, model.store.clone());
        }
        on_epoch(&record);
        log.push(record);
    }
    model.store = best.2;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.1,
    })
}
