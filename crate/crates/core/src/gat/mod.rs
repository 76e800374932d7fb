//! Graph attention over the label graph, with rare-label boosting,
//! correlation-confidence weighting and the fused prediction head.
//!
//! Node features are `[B, K, d]`; attention tensors are `[B, H, K, K]` with
//! row `i` holding node `i`'s weights over its neighbours `j`.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParamStore, Tensor, Var, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::label_graph::LabelGraph;
use crate::losses::PREVALENCE_FLOOR;
use crate::nn::{uniform, xavier_uniform, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// `e_ij = LeakyReLU(aᵀ[W v_i ‖ W v_j])`.
    Concat,
    /// `e_ij = aᵀ LeakyReLU(W_s v_i + W_d v_j)`.
    Dynamic,
}

fn d_node() -> usize {
    32
}
fn d_layers() -> usize {
    2
}
fn d_heads() -> usize {
    8
}
fn d_hidden() -> usize {
    8
}
fn d_slope() -> f64 {
    DEFAULT_LEAKY_SLOPE
}
fn d_variant() -> AttentionVariant {
    AttentionVariant::Concat
}
fn d_true() -> bool {
    true
}
fn d_head_hidden() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatConfig {
    /// Node feature width `d` (also the output width of the last layer).
    #[serde(default = "d_node")]
    pub node_dim: usize,
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    /// Per-head width of hidden layers; their heads are concatenated.
    #[serde(default = "d_hidden")]
    pub hidden_per_head: usize,
    #[serde(default = "d_slope")]
    pub leaky_slope: f64,
    #[serde(default = "d_variant")]
    pub variant: AttentionVariant,
    #[serde(default = "d_true")]
    pub rare_label_boost: bool,
    #[serde(default = "d_true")]
    pub confidence_weighting: bool,
    /// Hidden width of the shared two-layer prediction MLP.
    #[serde(default = "d_head_hidden")]
    pub head_hidden: usize,
    /// Replace the attention stack with the identity (head sees `[v0 ‖ v0]`).
    #[serde(default)]
    pub identity: bool,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            node_dim: d_node(),
            layers: d_layers(),
            heads: d_heads(),
            hidden_per_head: d_hidden(),
            leaky_slope: d_slope(),
            variant: d_variant(),
            rare_label_boost: true,
            confidence_weighting: true,
            head_hidden: d_head_hidden(),
            identity: false,
        }
    }
}

impl GatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.node_dim == 0 || self.heads == 0 || self.hidden_per_head == 0 || self.head_hidden == 0 {
            return Err(Error::invalid(format!("gat: zero-sized dimension in {self:?}")));
        }
        if !self.identity && self.layers == 0 {
            return Err(Error::invalid("gat: need at least one attention layer"));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid(format!("gat: leaky slope {} not in [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }
}

/// `1 + ln(1/π_k)` with `π_k` floored.
pub fn boost_factors(prevalence: &[f64]) -> Vec<f64> {
    prevalence
        .iter()
        .map(|p| 1.0 + (1.0 / p.clamp(PREVALENCE_FLOOR, 1.0)).ln())
        .collect()
}

/// Scale attention row `k` by the boost factor of label `k`.
pub fn rare_label_boost<'t>(alpha: Var<'t>, prevalence: &[f64]) -> Result<Var<'t>> {
    let k = prevalence.len();
    let f = boost_factors(prevalence);
    let rows: Vec<f64> = (0..k * k).map(|idx| f[idx / k]).collect();
    alpha.mul_bcast(alpha.tape().constant(Tensor::new(vec![k, k], rows)?))
}

/// Multiply attention elementwise by a `K x K` confidence matrix.
pub fn confidence_weight<'t>(alpha: Var<'t>, confidence: &[f64]) -> Result<Var<'t>> {
    let k = (confidence.len() as f64).sqrt() as usize;
    if k * k != confidence.len() {
        return Err(Error::shape("confidence_weight", format!("{} entries is not square", confidence.len())));
    }
    alpha.mul_bcast(alpha.tape().constant(Tensor::new(vec![k, k], confidence.to_vec())?))
}

/// Graph-derived constants shared by every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphContext {
    pub num_labels: usize,
    /// Adjacency with self-loops, row-major `K x K`.
    pub mask: Vec<bool>,
    /// Combined boost and confidence factors, if any enhancement is on.
    pub factor: Option<Tensor>,
}

impl GraphContext {
    pub fn new(graph: &LabelGraph, prevalence: &[f64], boost: bool, confidence: bool) -> Result<Self> {
        let k = graph.num_labels();
        if prevalence.len() != k {
            return Err(Error::invalid(format!("graph has {k} labels, prevalence {}", prevalence.len())));
        }
        let mut factor = vec![1.0; k * k];
        if boost {
            let f = boost_factors(prevalence);
            factor.iter_mut().enumerate().for_each(|(idx, x)| *x *= f[idx / k]);
        }
        if confidence {
            let c = graph.confidence_with_self_loops();
            factor.iter_mut().zip(&c).for_each(|(x, c)| *x *= c);
        }
        Ok(Self {
            num_labels: k,
            mask: graph.adjacency.with_self_loops(),
            factor: (boost || confidence).then(|| Tensor::new(vec![k, k], factor)).transpose()?,
        })
    }

    /// Context from an explicit mask and factor (used by tests and tools).
    pub fn from_parts(num_labels: usize, mask: Vec<bool>, factor: Option<Tensor>) -> Result<Self> {
        if mask.len() != num_labels * num_labels {
            return Err(Error::invalid("graph context: mask must be K x K"));
        }
        Ok(Self { num_labels, mask, factor })
    }
}

/// One multi-head attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GatLayer {
    pub heads: usize,
    pub head_dim: usize,
    /// Concatenate heads (hidden layers) or average them (last layer).
    pub concat: bool,
    pub slope: f64,
    pub variant: AttentionVariant,
    /// `[d_in, H * head_dim]`; messages and (for `Concat`) scores.
    pub w: ParamId,
    /// `Dynamic` only: target-side projection.
    pub w_dst: Option<ParamId>,
    /// `[H, head_dim]`; source half of `a` (or all of `a` for `Dynamic`).
    pub attn_src: ParamId,
    /// `Concat` only: target half of `a`.
    pub attn_dst: Option<ParamId>,
}

impl GatLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        layer: usize,
        d_in: usize,
        heads: usize,
        head_dim: usize,
        concat: bool,
        slope: f64,
        variant: AttentionVariant,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), layer, xavier_uniform(rng, d_in, heads * head_dim));
        let bound = (6.0 / (2 * head_dim + 1) as f64).sqrt();
        let (w_dst, attn_dst) = match variant {
            AttentionVariant::Concat => (None, Some(store.add(format!("{name}.attn_dst"), layer, uniform(rng, &[heads, head_dim], bound)))),
            AttentionVariant::Dynamic => (Some(store.add(format!("{name}.w_dst"), layer, xavier_uniform(rng, d_in, heads * head_dim))), None),
        };
        let attn_src = store.add(format!("{name}.attn_src"), layer, uniform(rng, &[heads, head_dim], bound));
        Self {
            heads,
            head_dim,
            concat,
            slope,
            variant,
            w,
            w_dst,
            attn_src,
            attn_dst,
        }
    }

    pub fn out_dim(&self) -> usize {
        if self.concat {
            self.heads * self.head_dim
        } else {
            self.head_dim
        }
    }

    /// `[B, K, d_in] -> [B, K, H, head_dim]`.
    fn project<'t>(&self, p: &[Var<'t>], v: Var<'t>, w: ParamId) -> Result<Var<'t>> {
        let s = v.shape();
        v.matmul(p[w])?.reshape(&[s[0], s[1], self.heads, self.head_dim])
    }

    /// Raw scores `e` as `[B, H, K, K]`.
    fn scores<'t>(&self, p: &[Var<'t>], v: Var<'t>, wv: Var<'t>) -> Result<Var<'t>> {
        let s = v.shape();
        let (b, k, h) = (s[0], s[1], self.heads);
        // row (b, h, i, j) of the pairwise tensor picks node i of head h and node j of head h
        let pair = |from_row: bool| -> Rc<Vec<usize>> {
            let mut idx = Vec::with_capacity(b * h * k * k);
            for bi in 0..b {
                for hi in 0..h {
                    for i in 0..k {
                        for j in 0..k {
                            let node = if from_row { i } else { j };
                            idx.push((bi * h + hi) * k + node);
                        }
                    }
                }
            }
            Rc::new(idx)
        };
        match self.variant {
            AttentionVariant::Concat => {
                let dst = p[self.attn_dst.expect("concat layer has attn_dst")];
                // per-node scalars [B, K, H] -> [B, H, K] -> rows
                let src_s = wv.mul_bcast(p[self.attn_src])?.sum_last().permute(&[0, 2, 1])?.reshape(&[b * h * k, 1])?;
                let dst_s = wv.mul_bcast(dst)?.sum_last().permute(&[0, 2, 1])?.reshape(&[b * h * k, 1])?;
                let e = src_s.gather_rows(pair(true))?.add(dst_s.gather_rows(pair(false))?)?;
                e.leaky_relu(self.slope).reshape(&[b, h, k, k])
            }
            AttentionVariant::Dynamic => {
                let wd = self.project(p, v, self.w_dst.expect("dynamic layer has w_dst"))?;
                let rows = |x: Var<'t>| -> Result<Var<'t>> {
                    x.permute(&[0, 2, 1, 3])?.reshape(&[b * h * k, self.head_dim])
                };
                let hidden = rows(wv)?
                    .gather_rows(pair(true))?
                    .add(rows(wd)?.gather_rows(pair(false))?)?
                    .leaky_relu(self.slope)
                    .reshape(&[b, h, k, k, self.head_dim])?
                    .permute(&[0, 2, 3, 1, 4])?;
                hidden.mul_bcast(p[self.attn_src])?.sum_last().permute(&[0, 3, 1, 2])
            }
        }
    }

    /// Normalised attention `[B, H, K, K]`; zero outside the mask, rows sum to 1.
    pub fn attention<'t>(&self, p: &[Var<'t>], v: Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
        let wv = self.project(p, v, self.w)?;
        self.scores(p, v, wv)?.masked_softmax(Some(mask))
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], v: Var<'t>, graph: &GraphContext) -> Result<Var<'t>> {
        let s = v.shape();
        let (b, k, h, dh) = (s[0], s[1], self.heads, self.head_dim);
        if k != graph.num_labels {
            return Err(Error::shape("gat_layer", format!("{k} nodes for a {}-label graph", graph.num_labels)));
        }
        let wv = self.project(p, v, self.w)?;
        let mut alpha = self.scores(p, v, wv)?.masked_softmax(Some(&graph.mask))?;
        if let Some(f) = &graph.factor {
            alpha = alpha.mul_bcast(v.tape().constant(f.clone()))?;
        }
        let messages = wv.permute(&[0, 2, 1, 3])?.reshape(&[b * h, k, dh])?;
        let agg = alpha.reshape(&[b * h, k, k])?.bmm(messages, false)?.reshape(&[b, h, k, dh])?;
        let out = if self.concat {
            agg.permute(&[0, 2, 1, 3])?.reshape(&[b, k, h * dh])?
        } else {
            agg.permute(&[0, 2, 3, 1])?.mean_last()
        };
        Ok(out.relu())
    }
}

/// `v_k^(0) = proj(z) + e_k`: `[B, D] -> [B, K, d]`.
pub fn init_nodes<'t>(p: &[Var<'t>], proj: &Linear, label_emb: ParamId, z: Var<'t>) -> Result<Var<'t>> {
    let b = z.shape()[0];
    let emb = p[label_emb];
    let es = emb.shape();
    let (k, d) = (es[0], es[1]);
    let pz = proj.forward(p, z)?;
    let tiled = pz.gather_rows(Rc::new((0..b).flat_map(|i| std::iter::repeat(i).take(k)).collect()))?;
    tiled.reshape(&[b, k, d])?.add_bcast(emb)
}

/// Shared two-layer MLP over `[v0 ‖ vL]` plus a per-label bias, then sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub label_bias: ParamId,
}

impl PredictionHead {
    pub fn register(store: &mut ParamStore, layer: usize, d_in: usize, hidden: usize, num_labels: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::register(store, "head.fc1", layer, d_in, hidden, true, rng),
            fc2: Linear::register(store, "head.fc2", layer, hidden, 1, false, rng),
            label_bias: store.add("head.label_bias", layer, Tensor::zeros(&[num_labels])),
        }
    }

    /// Logits `[B, K]`.
    pub fn logits<'t>(&self, p: &[Var<'t>], v0: Var<'t>, vl: Var<'t>) -> Result<Var<'t>> {
        let s = v0.shape();
        let fused = Var::concat_last(&[v0, vl])?;
        let hidden = self.fc1.forward(p, fused)?.relu();
        self.fc2
            .forward(p, hidden)?
            .reshape(&[s[0], s[1]])?
            .add_bcast(p[self.label_bias])
    }

    pub fn predict<'t>(&self, p: &[Var<'t>], v0: Var<'t>, vl: Var<'t>) -> Result<Var<'t>> {
        Ok(self.logits(p, v0, vl)?.sigmoid())
    }
}

/// The attention stack: hidden layers concatenate heads, the last averages.
#[derive(Clone, Debug, PartialEq)]
pub struct GatStack {
    pub layers: Vec<GatLayer>,
}

impl GatStack {
    pub fn register(store: &mut ParamStore, cfg: &GatConfig, layer: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.identity {
            return Ok(Self { layers: Vec::new() });
        }
        let mut d_in = cfg.node_dim;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let last = l + 1 == cfg.layers;
            let head_dim = if last { cfg.node_dim } else { cfg.hidden_per_head };
            let g = GatLayer::register(
                store,
                &format!("gat.layer{l}"),
                layer,
                d_in,
                cfg.heads,
                head_dim,
                !last,
                cfg.leaky_slope,
                cfg.variant,
                rng,
            );
            d_in = g.out_dim();
            layers.push(g);
        }
        Ok(Self { layers })
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], v0: Var<'t>, graph: &GraphContext) -> Result<Var<'t>> {
        self.layers.iter().try_fold(v0, |v, layer| layer.forward(p, v, graph))
    }
}

#[cfg(test)]
mod tests;
