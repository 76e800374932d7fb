//! Masked-autoencoder pretraining of a small ViT encoder.

mod vit;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use vit::{Decoder, Encoder};

use crate::dataset::{Image, CHANNELS};
use crate::diffcore::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::load_named;
use crate::train::{AdamW, AdamWConfig};

pub const DEFAULT_MASK_RATIO: f64 = 0.75;
pub const ENCODER_PREFIX: &str = "enc.";
pub const ENCODER_FORMAT: &str = "mirnet-encoder";
pub const CHECKPOINT_VERSION: u32 = 1;

fn d_embed() -> usize {
    32
}
fn d_depth() -> usize {
    2
}
fn d_heads() -> usize {
    4
}
fn d_mlp() -> usize {
    128
}
fn d_side() -> usize {
    32
}
fn d_patch() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    #[serde(default = "d_embed")]
    pub embed_dim: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_mlp")]
    pub mlp_dim: usize,
    #[serde(default = "d_patch")]
    pub patch_size: usize,
    #[serde(default = "d_side")]
    pub height: usize,
    #[serde(default = "d_side")]
    pub width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: d_embed(),
            depth: d_depth(),
            heads: d_heads(),
            mlp_dim: d_mlp(),
            patch_size: d_patch(),
            height: d_side(),
            width: d_side(),
        }
    }
}

impl EncoderConfig {
    /// ViT-Base geometry on 224x224 inputs.
    pub fn paper_scale() -> Self {
        Self {
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_dim: 3072,
            patch_size: 16,
            height: 224,
            width: 224,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.height % p != 0 || self.width % p != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid(format!(
                "encoder: {}x{} not divisible by patch size {p}",
                self.height, self.width
            )));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.mlp_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!("encoder: bad dimensions {self:?}")));
        }
        Ok(())
    }
}

fn dd_dim() -> usize {
    16
}
fn dd_depth() -> usize {
    1
}
fn dd_heads() -> usize {
    2
}
fn dd_mlp() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    #[serde(default = "dd_dim")]
    pub dim: usize,
    #[serde(default = "dd_depth")]
    pub depth: usize,
    #[serde(default = "dd_heads")]
    pub heads: usize,
    #[serde(default = "dd_mlp")]
    pub mlp_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: dd_dim(),
            depth: dd_depth(),
            heads: dd_heads(),
            mlp_dim: dd_mlp(),
        }
    }
}

impl DecoderConfig {
    pub fn paper_scale() -> Self {
        Self {
            dim: 512,
            depth: 6,
            heads: 16,
            mlp_dim: 2048,
        }
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 || self.mlp_dim == 0 {
            return Err(Error::invalid(format!("decoder: bad dimensions {self:?}")));
        }
        if 2 * self.depth > encoder.depth {
            return Err(Error::invalid(format!(
                "decoder depth {} exceeds half the encoder depth {}",
                self.depth, encoder.depth
            )));
        }
        Ok(())
    }
}

fn d_ratio() -> f64 {
    DEFAULT_MASK_RATIO
}
fn d_epochs() -> usize {
    40
}
fn d_batch() -> usize {
    64
}
fn d_pretrain_opt() -> AdamWConfig {
    AdamWConfig {
        layer_decay: 1.0,
        ..AdamWConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default = "d_ratio")]
    pub mask_ratio: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_pretrain_opt")]
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            mask_ratio: d_ratio(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            optimizer: d_pretrain_opt(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(&self.encoder)?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("pretrain: batch_size must be positive"));
        }
        visible_count(self.encoder.num_patches(), self.mask_ratio).map(|_| ())
    }
}

/// Non-overlapping patches in row-major grid order, each flattened
/// row-major and channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub patches: Vec<Vec<f64>>,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

pub fn patchify(img: &Image, p: usize) -> Result<PatchSequence> {
    if p == 0 || img.height % p != 0 || img.width % p != 0 {
        return Err(Error::invalid(format!(
            "patchify: {}x{} image not divisible by patch size {p}",
            img.height, img.width
        )));
    }
    let (gh, gw) = (img.height / p, img.width / p);
    let mut patches = Vec::with_capacity(gh * gw);
    for gi in 0..gh {
        for gj in 0..gw {
            let mut patch = Vec::with_capacity(p * p * CHANNELS);
            for r in gi * p..(gi + 1) * p {
                let start = img.index(r, gj * p, 0);
                patch.extend_from_slice(&img.pixels[start..start + p * CHANNELS]);
            }
            patches.push(patch);
        }
    }
    Ok(PatchSequence {
        grid_h: gh,
        grid_w: gw,
        patch_size: p,
        patches,
    })
}

pub fn unpatchify(seq: &PatchSequence) -> Result<Image> {
    let p = seq.patch_size;
    if seq.patches.len() != seq.grid_h * seq.grid_w || seq.patches.iter().any(|x| x.len() != p * p * CHANNELS) {
        return Err(Error::invalid("unpatchify: inconsistent patch sequence"));
    }
    let mut img = Image::filled(seq.grid_h * p, seq.grid_w * p, [0.0; 3]);
    for (n, patch) in seq.patches.iter().enumerate() {
        let (gi, gj) = (n / seq.grid_w, n % seq.grid_w);
        for (dr, row) in patch.chunks(p * CHANNELS).enumerate() {
            let start = img.index(gi * p + dr, gj * p, 0);
            img.pixels[start..start + p * CHANNELS].copy_from_slice(row);
        }
    }
    Ok(img)
}

/// Stack images into a `[B, N, P*P*C]` patch tensor.
pub fn patch_batch(images: &[&Image], p: usize) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("patch_batch: no images"))?;
    let n = (first.height / p.max(1)) * (first.width / p.max(1));
    let mut data = Vec::with_capacity(images.len() * first.pixels.len());
    for img in images {
        let seq = patchify(img, p)?;
        if seq.len() != n {
            return Err(Error::invalid("patch_batch: images differ in size"));
        }
        seq.patches.into_iter().for_each(|x| data.extend(x));
    }
    Tensor::new(vec![images.len(), n, p * p * CHANNELS], data)
}

/// Visible/masked split of patch indices, both sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskPlan {
    pub fn num_patches(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// Every patch visible; used to embed whole images.
    pub fn full(n: usize) -> Self {
        Self {
            visible: (0..n).collect(),
            masked: Vec::new(),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.visible.iter().chain(&self.masked) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("mask plan is not a partition of {n} patches")));
            }
        }
        if seen.iter().any(|s| !s) || self.visible.is_empty() {
            return Err(Error::invalid(format!("mask plan is not a partition of {n} patches")));
        }
        Ok(())
    }
}

fn visible_count(n: usize, rho: f64) -> Result<usize> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid(format!("mask ratio {rho} not in (0, 1)")));
    }
    let nv = ((1.0 - rho) * n as f64).round() as usize;
    if nv == 0 || nv >= n {
        return Err(Error::invalid(format!(
            "mask ratio {rho} over {n} patches leaves {nv} visible"
        )));
    }
    Ok(nv)
}

pub fn sample_mask(n: usize, rho: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    let nv = visible_count(n, rho)?;
    let mut visible = rand::seq::index::sample(rng, n, nv).into_vec();
    visible.sort_unstable();
    let mut is_vis = vec![false; n];
    visible.iter().for_each(|&i| is_vis[i] = true);
    let masked = (0..n).filter(|&i| !is_vis[i]).collect();
    Ok(MaskPlan { visible, masked })
}

/// Reconstruct every patch from the visible ones. Output `[B, N, P*P*C]`.
pub fn mae_forward<'t>(
    params: &[Var<'t>],
    encoder: &Encoder,
    decoder: &Decoder,
    patches: &Tensor,
    plans: &[MaskPlan],
) -> Result<Var<'t>> {
    let tape = params
        .first()
        .ok_or_else(|| Error::invalid("mae_forward: no parameters bound"))?
        .tape();
    let n = encoder.config.num_patches();
    if patches.rank() != 3 || patches.shape()[0] != plans.len() || patches.shape()[1] != n {
        return Err(Error::shape("mae_forward", format!("{:?} for {} plans", patches.shape(), plans.len())));
    }
    plans.iter().try_for_each(|p| p.check(n))?;
    let x = tape.constant(patches.clone());
    let latent = encoder.forward(params, x, Some(plans))?;
    decoder.forward(params, latent, plans)
}

/// Mean over images of the mean squared-L2 error over masked patches.
pub fn masked_mse<'t>(target: &Tensor, recon: Var<'t>, plans: &[MaskPlan]) -> Result<Var<'t>> {
    let shape = target.shape();
    if recon.shape() != shape || shape.len() != 3 || shape[0] != plans.len() {
        return Err(Error::shape(
            "masked_mse",
            format!("{:?} vs {:?} with {} plans", recon.shape(), shape, plans.len()),
        ));
    }
    let (b, n) = (shape[0], shape[1]);
    let mut weights = vec![0.0; b * n];
    for (i, plan) in plans.iter().enumerate() {
        if plan.masked.is_empty() {
            return Err(Error::invalid("masked_mse: plan masks no patch"));
        }
        let w = 1.0 / (b * plan.masked.len()) as f64;
        for &j in &plan.masked {
            weights[i * n + j] = w;
        }
    }
    let tape = recon.tape();
    let sq = recon.sub(tape.constant(target.clone()))?.square().sum_last();
    sq.mul(tape.constant(Tensor::new(vec![b, n], weights)?))
        .map(|v| v.sum())
}

/// Encoder-only checkpoint written after pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderCheckpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl EncoderCheckpoint {
    pub fn check(&self) -> Result<()> {
        if self.format != ENCODER_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "expected {ENCODER_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                self.format, self.version
            )));
        }
        self.config.validate()
    }
}

/// Encoder, decoder and their shared parameter store.
#[derive(Clone, Debug)]
pub struct MaeModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl MaeModel {
    pub fn new(cfg: &PretrainConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::register(&mut store, &cfg.encoder, rng)?;
        let decoder = Decoder::register(&mut store, &cfg.decoder, &cfg.encoder, rng)?;
        Ok(Self { store, encoder, decoder })
    }

    pub fn encoder_checkpoint(&self, seed: u64) -> EncoderCheckpoint {
        let mut params = ParamStore::new();
        for e in self.store.entries().iter().filter(|e| e.name.starts_with(ENCODER_PREFIX)) {
            params.add(e.name.clone(), e.layer, e.tensor.clone());
        }
        EncoderCheckpoint {
            format: ENCODER_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed,
            config: self.encoder.config.clone(),
            params,
        }
    }

    /// Masked MSE on a batch without recording gradients.
    pub fn eval_loss(&self, images: &[&Image], plans: &[MaskPlan]) -> Result<f64> {
        let tape = Tape::new();
        let params = self.store.bind_frozen(&tape);
        let x = patch_batch(images, self.encoder.config.patch_size)?;
        let recon = mae_forward(&params, &self.encoder, &self.decoder, &x, plans)?;
        Ok(masked_mse(&x, recon, plans)?.item())
    }
}

/// Load an encoder checkpoint's weights into a store that already holds an encoder layout.
pub fn load_encoder(store: &mut ParamStore, ckpt: &EncoderCheckpoint) -> Result<()> {
    ckpt.check()?;
    load_named(store, &ckpt.params, ENCODER_PREFIX).map(|_| ())
}

/// Per-epoch pretraining record. Epoch 0 is the model at initialisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub masked_mse: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: MaeModel,
    pub log: Vec<PretrainEpoch>,
}

impl PretrainOutcome {
    pub fn checkpoint(&self, seed: u64) -> EncoderCheckpoint {
        self.model.encoder_checkpoint(seed)
    }
}

/// Train encoder and decoder on masked reconstruction.
///
/// Epoch 0 evaluates the initial model on the whole set; epoch `e >= 1`
/// is the sample-weighted mean training loss over that epoch's batches.
pub fn pretrain(
    images: &[&Image],
    cfg: &PretrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("pretrain: no unlabeled images"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MaeModel::new(cfg, &mut rng)?;
    let mut opt = AdamW::new(&model.store, cfg.optimizer.clone())?;
    let n = cfg.encoder.num_patches();
    let p = cfg.encoder.patch_size;
    let all = patch_batch(images, p)?;
    let pd = cfg.encoder.patch_dim();

    let mut log = Vec::with_capacity(cfg.epochs + 1);
    let initial = {
        let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut total = 0.0;
        for chunk in images.chunks(cfg.batch_size) {
            let plans: Vec<MaskPlan> = (0..chunk.len())
                .map(|_| sample_mask(n, cfg.mask_ratio, &mut eval_rng))
                .collect::<Result<_>>()?;
            total += model.eval_loss(chunk, &plans)? * chunk.len() as f64;
        }
        total / images.len() as f64
    };
    let record = PretrainEpoch {
        epoch: 0,
        masked_mse: initial,
    };
    on_epoch(&record);
    log.push(record);

    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 1..=cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let plans: Vec<MaskPlan> = batch
                .iter()
                .map(|_| sample_mask(n, cfg.mask_ratio, &mut rng))
                .collect::<Result<_>>()?;
            let mut data = Vec::with_capacity(batch.len() * n * pd);
            for &i in batch {
                data.extend_from_slice(&all.data()[i * n * pd..(i + 1) * n * pd]);
            }
            let x = Tensor::new(vec![batch.len(), n, pd], data)?;
            let tape = Tape::new();
            let params = model.store.bind(&tape);
            let recon = mae_forward(&params, &model.encoder, &model.decoder, &x, &plans)?;
            let loss = masked_mse(&x, recon, &plans)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("masked MSE became {value}"),
                });
            }
            let grads = tape.backward(loss)?;
            opt.step(&mut model.store, &grads).map_err(|e| Error::Diverged {
                epoch,
                detail: e.to_string(),
            })?;
            total += value * batch.len() as f64;
        }
        let record = PretrainEpoch {
            epoch,
            masked_mse: total / images.len() as f64,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(PretrainOutcome { model, log })
}

/// Gather helper shared by encoder and decoder: row indices `b * stride + j`.
pub(crate) fn batch_rows(plans: &[MaskPlan], stride: usize, pick: impl Fn(&MaskPlan) -> &[usize]) -> Rc<Vec<usize>> {
    Rc::new(
        plans
            .iter()
            .enumerate()
            .flat_map(|(b, p)| pick(p).iter().map(move |&j| b * stride + j))
            .collect(),
    )
}
