//! Full classifier: ViT encoder, label-graph attention decoder and head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gat::{init_nodes, GatConfig, GatStack, GraphContext, PredictionHead};
use crate::label_graph::LabelGraph;
use crate::mae::{load_encoder, patch_batch, Encoder, EncoderCheckpoint, EncoderConfig, CHECKPOINT_VERSION};
use crate::nn::{uniform, Linear};

pub const MODEL_FORMAT: &str = "mirnet-model";
/// Images per forward pass when predicting.
const PREDICT_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_labels: usize,
    pub encoder: EncoderConfig,
    pub gat: GatConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_labels == 0 {
            return Err(Error::invalid("model: num_labels must be positive"));
        }
        self.encoder.validate()?;
        self.gat.validate()
    }

    /// Layer index shared by everything after the encoder.
    pub fn top_layer(&self) -> usize {
        self.encoder.depth + 1
    }
}

/// Parameter layout; weights live in [`Model::store`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub encoder: Encoder,
    pub node_proj: Linear,
    pub label_emb: ParamId,
    pub stack: GatStack,
    pub head: PredictionHead,
}

impl Network {
    fn register(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let top = cfg.top_layer();
        let d = cfg.gat.node_dim;
        let encoder = Encoder::register(store, &cfg.encoder, &mut rng)?;
        let node_proj = Linear::register(store, "gat.node_proj", top, cfg.encoder.embed_dim, d, true, &mut rng);
        let label_emb = store.add("gat.label_emb", top, uniform(&mut rng, &[cfg.num_labels, d], 0.5));
        let stack = GatStack::register(store, &cfg.gat, top, &mut rng)?;
        let head = PredictionHead::register(store, top, 2 * d, cfg.gat.head_hidden, cfg.num_labels, &mut rng);
        Ok(Self {
            encoder,
            node_proj,
            label_emb,
            stack,
            head,
        })
    }

    /// Probabilities `[B, K]` for patches `[B, N, P*P*C]`.
    pub fn forward<'t>(&self, p: &[Var<'t>], x: Var<'t>, graph: &GraphContext) -> Result<Var<'t>> {
        let z = self.encoder.embed(p, x)?;
        let v0 = init_nodes(p, &self.node_proj, self.label_emb, z)?;
        let vl = self.stack.forward(p, v0, graph)?;
        self.head.predict(p, v0, vl)
    }
}

/// Trained (or freshly initialised) classifier with its graph constants.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub network: Network,
    pub store: ParamStore,
    pub graph: LabelGraph,
    pub prevalence: Vec<f64>,
    pub context: GraphContext,
    pub seed: u64,
}

impl Model {
    pub fn new(config: ModelConfig, graph: LabelGraph, prevalence: Vec<f64>, seed: u64) -> Result<Self> {
        if graph.num_labels() != config.num_labels {
            return Err(Error::invalid(format!(
                "graph has {} labels, model {}",
                graph.num_labels(),
                config.num_labels
            )));
        }
        let mut store = ParamStore::new();
        let network = Network::register(&mut store, &config, seed)?;
        let context = GraphContext::new(&graph, &prevalence, config.gat.rare_label_boost, config.gat.confidence_weighting)?;
        Ok(Self {
            config,
            network,
            store,
            graph,
            prevalence,
            context,
            seed,
        })
    }

    /// Copy pretrained encoder weights in; architectures must match.
    pub fn load_encoder(&mut self, ckpt: &EncoderCheckpoint) -> Result<()> {
        if ckpt.config != self.config.encoder {
            return Err(Error::Checkpoint(format!(
                "encoder checkpoint config {:?} differs from model encoder {:?}",
                ckpt.config, self.config.encoder
            )));
        }
        load_encoder(&mut self.store, ckpt)
    }

    pub fn forward<'t>(&self, params: &[Var<'t>], patches: &Tensor) -> Result<Var<'t>> {
        let tape = params
            .first()
            .ok_or_else(|| Error::invalid("model has no parameters"))?
            .tape();
        self.network.forward(params, tape.constant(patches.clone()), &self.context)
    }

    /// Probabilities `[N, K]` without recording gradients.
    pub fn predict(&self, images: &[&Image]) -> Result<Tensor> {
        let k = self.config.num_labels;
        let mut out = Vec::with_capacity(images.len() * k);
        for chunk in images.chunks(PREDICT_CHUNK) {
            let x = patch_batch(chunk, self.config.encoder.patch_size)?;
            out.extend_from_slice(self.predict_patches(&x)?.data());
        }
        Tensor::new(vec![images.len(), k], out)
    }

    pub fn predict_patches(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        Ok(self.forward(&p, x)?.value())
    }

    pub fn checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            format: MODEL_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            config: self.config.clone(),
            graph: self.graph.clone(),
            prevalence: self.prevalence.clone(),
            params: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        if ckpt.format != MODEL_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "expected {MODEL_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut model = Self::new(ckpt.config.clone(), ckpt.graph.clone(), ckpt.prevalence.clone(), ckpt.seed)?;
        if model.store.len() != ckpt.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, architecture needs {}",
                ckpt.params.len(),
                model.store.len()
            )));
        }
        for e in model.store.entries_mut() {
            let t = ckpt
                .params
                .by_name(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {}", e.name)))?;
            if t.shape() != e.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor = t.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, &self.checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&crate::io::read_json(path)?)
    }
}

/// Serialised model: architecture, graph constants and named tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    pub graph: LabelGraph,
    pub prevalence: Vec<f64>,
    pub params: ParamStore,
}
