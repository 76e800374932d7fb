//! Fine-tuning, evaluation and the boosting ensemble.

mod boost;
mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use boost::{
    boost_finetune, boost_loss, channel_jitter, merge_predictions, random_erase, select_boost_labels, AugmentConfig,
    BoostConfig, BoostingPlan,
};
pub use optim::{layer_multiplier, AdamW, AdamWConfig};

use crate::dataset::{Dataset, Image, Split};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::gat::GatConfig;
use crate::label_graph::{GraphAdjustment, LabelGraph, DEFAULT_ALPHA};
use crate::losses::{total_loss, AslConfig, ConstraintRule, LossBreakdown, ObjectiveConfig};
use crate::mae::{patch_batch, EncoderCheckpoint, EncoderConfig};
use crate::metrics::{binarize, f1_suite, DEFAULT_THRESHOLD};
use crate::model::{Model, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Asymmetric loss with rarity weights.
    Asl,
    /// Plain binary cross-entropy (no focusing, unit weights).
    Bce,
}

fn d_lc() -> f64 {
    ObjectiveConfig::DEFAULT_LAMBDA_CONSTRAINT
}
fn d_lp() -> f64 {
    ObjectiveConfig::DEFAULT_LAMBDA_PRIOR
}
fn d_loss() -> LossKind {
    LossKind::Asl
}
fn d_focus_neg() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSettings {
    #[serde(default = "d_lc")]
    pub lambda_constraint: f64,
    #[serde(default = "d_lp")]
    pub lambda_prior: f64,
    #[serde(default = "d_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub focus_pos: f64,
    #[serde(default = "d_focus_neg")]
    pub focus_neg: f64,
    /// τ for class weights; the smallest training prevalence when absent.
    #[serde(default)]
    pub rarity_scale: Option<f64>,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        Self {
            lambda_constraint: d_lc(),
            lambda_prior: d_lp(),
            loss: d_loss(),
            focus_pos: 0.0,
            focus_neg: d_focus_neg(),
            rarity_scale: None,
        }
    }
}

impl ObjectiveSettings {
    pub fn build(&self, prevalence: &[f64], rules: &[ConstraintRule], ablation: &Ablation) -> Result<ObjectiveConfig> {
        let asl = match self.loss {
            LossKind::Asl => AslConfig::from_prevalence(prevalence, self.focus_pos, self.focus_neg, self.rarity_scale)?,
            LossKind::Bce => AslConfig::bce(prevalence.len()),
        };
        let mut cfg = ObjectiveConfig::new(prevalence.to_vec(), rules.to_vec(), asl);
        cfg.lambda_constraint = self.lambda_constraint;
        cfg.lambda_prior = self.lambda_prior;
        cfg.disable_constraints = ablation.no_constraints;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn d_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSettings {
    /// Percentile of positive co-occurrence counts used as the edge threshold.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Derive graph overrides from the dataset rules (exclusion suppresses,
    /// co-appearance and implication enhance).
    #[serde(default = "d_true")]
    pub rule_adjustments: bool,
}

impl Default for GraphSettings {
    fn default() -> Self {
        Self {
            alpha: d_alpha(),
            rule_adjustments: true,
        }
    }
}

/// Ablation switches.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// `-C`: drop the constraint penalty.
    #[serde(default)]
    pub no_constraints: bool,
    /// `-G`: identity in place of the graph-attention stack.
    #[serde(default)]
    pub identity_decoder: bool,
    /// `-P`: random encoder initialisation.
    #[serde(default)]
    pub no_pretrain: bool,
}

impl Ablation {
    /// Parse a comma-separated flag list such as `C,P`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut a = Self::default();
        for flag in spec.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match flag {
                "C" | "c" => a.no_constraints = true,
                "G" | "g" => a.identity_decoder = true,
                "P" | "p" => a.no_pretrain = true,
                other => return Err(Error::invalid(format!("unknown ablation flag `{other}` (expected C, G or P)"))),
            }
        }
        Ok(a)
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            no_constraints: self.no_constraints || other.no_constraints,
            identity_decoder: self.identity_decoder || other.identity_decoder,
            no_pretrain: self.no_pretrain || other.no_pretrain,
        }
    }

    /// Short tag such as `-C`, empty when nothing is ablated.
    pub fn tag(&self) -> String {
        let mut s = String::new();
        for (on, c) in [(self.no_constraints, 'C'), (self.identity_decoder, 'G'), (self.no_pretrain, 'P')] {
            if on {
                s.push(c);
            }
        }
        if s.is_empty() {
            s
        } else {
            format!("-{s}")
        }
    }
}

fn d_epochs() -> usize {
    60
}
fn d_batch() -> usize {
    32
}
fn d_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Probability threshold for binarised predictions.
    #[serde(default = "d_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub gat: GatConfig,
    /// Encoder architecture when no pretrained checkpoint is supplied.
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub objective: ObjectiveSettings,
    #[serde(default)]
    pub graph: GraphSettings,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            batch_size: d_batch(),
            threshold: d_threshold(),
            optimizer: AdamWConfig::default(),
            gat: GatConfig::default(),
            encoder: EncoderConfig::default(),
            objective: ObjectiveSettings::default(),
            graph: GraphSettings::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("train: epochs and batch_size must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!("train: threshold {} not in (0, 1)", self.threshold)));
        }
        self.optimizer.validate()?;
        self.gat.validate()?;
        self.encoder.validate()
    }
}

/// One JSON-lines record of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub total: f64,
    pub asl: f64,
    pub constraint: f64,
    pub prior: f64,
    pub val_macro_f1: f64,
    pub val_micro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation model.
    pub model: Model,
    pub log: Vec<TrainEpoch>,
    pub best_epoch: usize,
}

/// Patches and labels of one split.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub images: Vec<Image>,
    pub patches: Tensor,
    pub labels: Vec<Vec<bool>>,
    pub targets: Tensor,
}

impl SplitData {
    pub fn from_dataset(data: &Dataset, split: Split, patch_size: usize) -> Result<Self> {
        let (images, labels) = data.split(split);
        if images.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        Self::new(images.into_iter().cloned().collect(), labels, patch_size)
    }

    pub fn new(images: Vec<Image>, labels: Vec<Vec<bool>>, patch_size: usize) -> Result<Self> {
        let refs: Vec<&Image> = images.iter().collect();
        let patches = patch_batch(&refs, patch_size)?;
        let k = labels.first().map_or(0, Vec::len);
        let targets = Tensor::new(
            vec![labels.len(), k],
            labels.iter().flat_map(|r| r.iter().map(|&b| b as u8 as f64)).collect(),
        )?;
        Ok(Self {
            images,
            patches,
            labels,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` of the patch and target tensors.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        Ok((gather(&self.patches, idx)?, gather(&self.targets, idx)?))
    }
}

/// Select leading-axis rows.
pub(crate) fn gather(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let stride = t.numel() / t.shape()[0].max(1);
    let mut data = Vec::with_capacity(idx.len() * stride);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

pub(crate) fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
}

/// Graph adjustments implied by the rules.
pub fn rule_adjustments(rules: &[ConstraintRule]) -> Vec<GraphAdjustment> {
    rules.iter().map(GraphAdjustment::from_rule).collect()
}

/// Build the untrained model for a dataset and configuration.
pub fn build_model(data: &Dataset, encoder: Option<&EncoderCheckpoint>, cfg: &TrainConfig, seed: u64) -> Result<Model> {
    let manifest = &data.manifest;
    let k = manifest.num_labels();
    let train_labels: Vec<Vec<u8>> = manifest
        .labels(Split::Train)
        .iter()
        .map(|r| r.iter().map(|&b| b as u8).collect())
        .collect();
    let adjustments = if cfg.graph.rule_adjustments {
        rule_adjustments(&manifest.rules)
    } else {
        Vec::new()
    };
    let graph = LabelGraph::build(&train_labels, k, cfg.graph.alpha, &adjustments)?;
    let mut gat = cfg.gat.clone();
    gat.identity |= cfg.ablation.identity_decoder;
    let encoder_cfg = encoder.map_or_else(|| cfg.encoder.clone(), |c| c.config.clone());
    if encoder_cfg.height != manifest.height || encoder_cfg.width != manifest.width || encoder_cfg.patch_size != manifest.patch_size {
        return Err(Error::invalid(format!(
            "encoder expects {}x{} images with patch {}, dataset has {}x{} with patch {}",
            encoder_cfg.height, encoder_cfg.width, encoder_cfg.patch_size, manifest.height, manifest.width, manifest.patch_size
        )));
    }
    let config = ModelConfig {
        num_labels: k,
        encoder: encoder_cfg,
        gat,
    };
    let mut model = Model::new(config, graph, manifest.prevalence.clone(), seed)?;
    if let (Some(ckpt), false) = (encoder, cfg.ablation.no_pretrain) {
        model.load_encoder(ckpt)?;
    }
    Ok(model)
}

/// Train with the full objective, keeping the best-validation checkpoint.
pub fn finetune(
    data: &Dataset,
    encoder: Option<&EncoderCheckpoint>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&TrainEpoch),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = build_model(data, encoder, cfg, seed)?;
    let p = model.config.encoder.patch_size;
    let train = SplitData::from_dataset(data, Split::Train, p)?;
    let val = SplitData::from_dataset(data, Split::Val, p)?;
    let objective = cfg
        .objective
        .build(&data.manifest.prevalence, &data.manifest.rules, &cfg.ablation)?;
    run_training(model, &train, &val, &objective, cfg, seed, &mut on_epoch)
}

/// Training loop on prepared splits; returns the best-validation model.
pub fn run_training(
    mut model: Model,
    train: &SplitData,
    val: &SplitData,
    objective: &ObjectiveConfig,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&TrainEpoch),
) -> Result<TrainOutcome> {
    if cfg.batch_size > train.len() {
        return Err(Error::invalid(format!(
            "train: batch_size {} exceeds the {} training samples",
            cfg.batch_size,
            train.len()
        )));
    }
    let mut opt = AdamW::new(&model.store, cfg.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: (f64, usize, Option<crate::diffcore::ParamStore>) = (f64::NEG_INFINITY, 0, None);
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut rng);
        let mut sums = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(batch)?;
            let tape = Tape::new();
            let params = model.store.bind(&tape);
            let probs = model.forward(&params, &x)?;
            let (loss, parts) = total_loss(probs, &y, objective)?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss terms {parts:?}"),
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
        let probs = model.predict_patches_chunked(&val.patches)?;
        let suite = f1_suite(&val.labels, &binarize(&probs, cfg.threshold))?;
        let record = TrainEpoch {
            epoch,
            total: sums.total / n,
            asl: sums.asl / n,
            constraint: sums.constraint / n,
            prior: sums.prior / n,
            val_macro_f1: suite.macro_f1,
            val_micro_f1: suite.micro_f1,
        };
        log::debug!("epoch {epoch}: {record:?}");
        if suite.macro_f1 > best.0 {
            best = (suite.macro_f1, epoch, Some(model.store.clone()));
        }
        on_epoch(&record);
        log.push(record);
    }
    if let Some(store) = best.2 {
        model.store = store;
    }
    Ok(TrainOutcome {
        model,
        log,
        best_epoch: best.1,
    })
}

/// Predicted probabilities and truth for a split.
pub fn predict_split(model: &Model, data: &Dataset, split: Split) -> Result<(Tensor, Vec<Vec<bool>>)> {
    let (images, labels) = data.split(split);
    if images.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    Ok((model.predict(&images)?, labels))
}

impl Model {
    /// Forward-only prediction on a pre-patched tensor, in chunks.
    pub fn predict_patches_chunked(&self, patches: &Tensor) -> Result<Tensor> {
        let n = patches.shape()[0];
        let k = self.config.num_labels;
        let mut out = Vec::with_capacity(n * k);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(128) {
            out.extend_from_slice(self.predict_patches(&gather(patches, chunk)?)?.data());
        }
        Tensor::new(vec![n, k], out)
    }
}
