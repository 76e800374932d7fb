use rand::Rng;

use super::{batch_rows, DecoderConfig, EncoderConfig, MaskPlan};
use crate::diffcore::{ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, uniform, Block, Linear, Norm};

/// ViT encoder. Patch embedding is layer 0, block `i` is layer `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    patch_embed: Linear,
    blocks: Vec<Block>,
    norm: Norm,
    positions: Tensor,
}

impl Encoder {
    pub fn register(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch_embed = Linear::register(store, "enc.patch_embed", 0, cfg.patch_dim(), d, true, rng);
        let blocks = (0..cfg.depth)
            .map(|i| Block::register(store, &format!("enc.block{i}"), i + 1, d, cfg.heads, cfg.mlp_dim, rng))
            .collect::<Result<_>>()?;
        let norm = Norm::register(store, "enc.norm", cfg.depth, d);
        Ok(Self {
            config: cfg.clone(),
            patch_embed,
            blocks,
            norm,
            positions: sinusoidal_positions(cfg.num_patches(), d),
        })
    }

    /// Highest layer index used by encoder parameters.
    pub fn top_layer(&self) -> usize {
        self.config.depth
    }

    /// Encode `x: [B, N, P*P*C]`. With `plans`, only visible patches are
    /// embedded (in plan order) and the output is `[B, N_v, D]`; otherwise `[B, N, D]`.
    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>, plans: Option<&[MaskPlan]>) -> Result<Var<'t>> {
        let shape = x.shape();
        let (b, n) = (shape[0], shape[1]);
        let d = self.config.embed_dim;
        let tape = x.tape();
        let (tokens, slots): (Var<'t>, Vec<usize>) = match plans {
            Some(plans) => {
                let t = plans.first().map_or(0, |p| p.visible.len());
                if plans.len() != b || plans.iter().any(|p| p.visible.len() != t) {
                    return Err(Error::shape("encoder", "plans must share one visible count per batch"));
                }
                let rows = batch_rows(plans, n, |p| &p.visible);
                let slots = plans.iter().flat_map(|p| p.visible.iter().copied()).collect();
                (x.gather_rows(rows)?, slots)
            }
            None => (x.reshape(&[b * n, shape[2]])?, (0..b).flat_map(|_| 0..n).collect()),
        };
        let t = slots.len() / b.max(1);
        let mut pos = Vec::with_capacity(slots.len() * d);
        for &j in &slots {
            pos.extend_from_slice(self.positions.row(j));
        }
        let pos = tape.constant(Tensor::new(vec![slots.len(), d], pos)?);
        let mut h = self.patch_embed.forward(p, tokens)?.add(pos)?.reshape(&[b, t, d])?;
        for block in &self.blocks {
            h = block.forward(p, h)?;
        }
        self.norm.forward(p, h)
    }

    /// Image embedding `[B, D]`: mean over all patch tokens.
    pub fn embed<'t>(&self, p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        self.forward(p, x, None)?.permute(&[0, 2, 1]).map(|h| h.mean_last())
    }
}

/// Lightweight decoder that restores the full sequence with a mask token.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    num_patches: usize,
    embed: Linear,
    mask_token: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
    out: Linear,
    positions: Tensor,
}

impl Decoder {
    pub fn register(store: &mut ParamStore, cfg: &DecoderConfig, enc: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(enc)?;
        let layer = enc.depth + 1;
        let de = cfg.dim;
        let embed = Linear::register(store, "dec.embed", layer, enc.embed_dim, de, true, rng);
        let mask_token = store.add("dec.mask_token", layer, uniform(rng, &[1, de], 0.02));
        let blocks = (0..cfg.depth)
            .map(|i| Block::register(store, &format!("dec.block{i}"), layer, de, cfg.heads, cfg.mlp_dim, rng))
            .collect::<Result<_>>()?;
        let norm = Norm::register(store, "dec.norm", layer, de);
        let out = Linear::register(store, "dec.out", layer, de, enc.patch_dim(), true, rng);
        Ok(Self {
            config: cfg.clone(),
            num_patches: enc.num_patches(),
            embed,
            mask_token,
            blocks,
            norm,
            out,
            positions: sinusoidal_positions(enc.num_patches(), de),
        })
    }

    /// `latent: [B, N_v, D]` in plan order -> reconstruction `[B, N, P*P*C]`.
    pub fn forward<'t>(&self, p: &[Var<'t>], latent: Var<'t>, plans: &[MaskPlan]) -> Result<Var<'t>> {
        let shape = latent.shape();
        let (b, t) = (shape[0], shape[1]);
        let (n, de) = (self.num_patches, self.config.dim);
        let h = self.embed.forward(p, latent)?.reshape(&[b * t, de])?;
        let pool = Var::concat_rows(&[h, p[self.mask_token]])?;
        let token_row = b * t;
        let mut idx = vec![token_row; b * n];
        for (bi, plan) in plans.iter().enumerate() {
            for (slot, &j) in plan.visible.iter().enumerate() {
                idx[bi * n + j] = bi * t + slot;
            }
        }
        let full = pool
            .gather_rows(std::rc::Rc::new(idx))?
            .reshape(&[b, n, de])?
            .add_bcast(latent.tape().constant(self.positions.clone()))?;
        let mut h = full;
        for block in &self.blocks {
            h = block.forward(p, h)?;
        }
        self.out.forward(p, self.norm.forward(p, h)?)
    }
}
