//! The pipeline verbs and the directory layout they share.
//!
//! ```text
//! <out>/data/            manifest.json, images/*.ppm
//! <out>/pretrain/        encoder.json, log.jsonl
//! <out>/train<tag>/      model.json, log.jsonl, graph.json
//! <out>/boost<tag>/      model.json, plan.json, log.jsonl
//! <out>/eval<tag>/       metrics.json, per_label.csv (+ *_boosted when boosted)
//! <out>/report/          table.csv, table.json, per_label_f1.csv, missed_by_dimension.csv
//! ```
//!
//! `<tag>` is empty for the full model and `-C`, `-G`, `-P` (or combinations)
//! for ablations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mirnet_core::dataset::{generate, Dataset, Split, MANIFEST_FILE};
use mirnet_core::io::{read_json, write_atomic, write_json};
use mirnet_core::mae::{pretrain as run_pretrain, EncoderCheckpoint, PretrainEpoch};
use mirnet_core::metrics::{binarize, evaluate, f1_suite, MetricReport};
use mirnet_core::model::Model;
use mirnet_core::train::{
    boost_finetune, finetune, merge_predictions, predict_split, select_boost_labels, Ablation, BoostingPlan,
    TrainConfig, TrainEpoch,
};

use crate::config::RunConfig;
use crate::error::CliError;

pub const ENCODER_FILE: &str = "encoder.json";
pub const MODEL_FILE: &str = "model.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const GRAPH_FILE: &str = "graph.json";
pub const PLAN_FILE: &str = "plan.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const BOOSTED_METRICS_FILE: &str = "metrics_boosted.json";
pub const PER_LABEL_FILE: &str = "per_label.csv";
pub const BOOSTED_PER_LABEL_FILE: &str = "per_label_boosted.csv";

type Result<T> = std::result::Result<T, CliError>;

/// Where every verb reads and writes.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
    data: PathBuf,
    encoder: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig, out: Option<&Path>) -> Self {
        let root = out
            .map(Path::to_path_buf)
            .or_else(|| cfg.paths.out.clone())
            .unwrap_or_else(|| PathBuf::from("runs/desk"));
        let data = cfg.paths.data.clone().unwrap_or_else(|| root.join("data"));
        let encoder = cfg
            .paths
            .encoder
            .clone()
            .unwrap_or_else(|| root.join("pretrain").join(ENCODER_FILE));
        Self { root, data, encoder }
    }

    pub fn data_dir(&self) -> &Path {
        &self.data
    }

    pub fn manifest(&self) -> PathBuf {
        self.data.join(MANIFEST_FILE)
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn encoder(&self) -> &Path {
        &self.encoder
    }

    pub fn train_dir(&self, a: &Ablation) -> PathBuf {
        self.root.join(format!("train{}", a.tag()))
    }

    pub fn boost_dir(&self, a: &Ablation) -> PathBuf {
        self.root.join(format!("boost{}", a.tag()))
    }

    pub fn eval_dir(&self, a: &Ablation) -> PathBuf {
        self.root.join(format!("eval{}", a.tag()))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Independent per-stage seed derived from the run seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    // FNV-1a over the stage name, mixed with SplitMix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = (seed ^ h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn require(path: &Path, verb: &'static str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Missing {
            path: path.to_path_buf(),
            verb,
        })
    }
}

fn load_dataset(layout: &Layout) -> Result<Dataset> {
    let manifest = layout.manifest();
    require(&manifest, "gen-data")?;
    Ok(Dataset::load(&manifest)?)
}

/// A log record stamped with the run seed.
#[derive(Serialize)]
struct Stamped<'a, T> {
    seed: u64,
    #[serde(flatten)]
    body: &'a T,
}

fn jsonl<T: Serialize>(seed: u64, records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(&Stamped { seed, body: r }).expect("log records serialise") + "\n")
        .collect()
}

/// Generate the synthetic dataset.
pub fn gen_data(cfg: &RunConfig, layout: &Layout) -> Result<PathBuf> {
    let mut g = cfg.data.generator.clone();
    g.seed = stage_seed(cfg.seed, "data");
    let data = generate(&g, cfg.data.n_labeled, cfg.data.n_unlabeled)?;
    let path = data.write(layout.data_dir())?;
    log::info!(
        "wrote {} samples ({} labels) to {}",
        data.manifest.samples.len(),
        data.manifest.num_labels(),
        path.display()
    );
    Ok(path)
}

/// Masked-autoencoder pretraining on the unlabeled pool.
pub fn pretrain(cfg: &RunConfig, layout: &Layout) -> Result<Vec<PretrainEpoch>> {
    let data = load_dataset(layout)?;
    let (images, _) = data.split(Split::PretrainUnlabeled);
    if images.is_empty() {
        return Err(mirnet_core::Error::EmptySplit(Split::PretrainUnlabeled.to_string()).into());
    }
    let seed = stage_seed(cfg.seed, "pretrain");
    let epochs = cfg.pretrain.epochs;
    let out = run_pretrain(&images, &cfg.pretrain, seed, |e| {
        log::info!("pretrain epoch {}/{epochs}: masked MSE {:.6}", e.epoch, e.masked_mse)
    })?;
    let dir = layout.pretrain_dir();
    write_json(layout.encoder(), &out.checkpoint(seed))?;
    write_atomic(&dir.join(LOG_FILE), jsonl(cfg.seed, &out.log).as_bytes())?;
    Ok(out.log)
}

fn train_config(cfg: &RunConfig, ablation: &Ablation) -> TrainConfig {
    let mut t = cfg.train.clone();
    t.ablation = t.ablation.merge(ablation);
    t.encoder = cfg.pretrain.encoder.clone();
    t
}

fn load_encoder(layout: &Layout) -> Result<EncoderCheckpoint> {
    require(layout.encoder(), "pretrain")?;
    let ckpt: EncoderCheckpoint = read_json(layout.encoder())?;
    ckpt.check()?;
    Ok(ckpt)
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    seed: u64,
    #[serde(flatten)]
    graph: mirnet_core::label_graph::GraphExport,
}

/// Fine-tune the full classifier; returns the per-epoch log.
pub fn train(cfg: &RunConfig, layout: &Layout, ablation: &Ablation) -> Result<Vec<TrainEpoch>> {
    let tcfg = train_config(cfg, ablation);
    let data = load_dataset(layout)?;
    let encoder = if tcfg.ablation.no_pretrain {
        None
    } else {
        Some(load_encoder(layout)?)
    };
    let seed = stage_seed(cfg.seed, "train");
    let epochs = tcfg.epochs;
    let out = finetune(&data, encoder.as_ref(), &tcfg, seed, |e| {
        log::info!(
            "train{} epoch {}/{epochs}: loss {:.5} (asl {:.5}, constraint {:.5}, prior {:.5}), val macro-F1 {:.4}",
            tcfg.ablation.tag(),
            e.epoch,
            e.total,
            e.asl,
            e.constraint,
            e.prior,
            e.val_macro_f1
        )
    })?;
    log::info!("best validation macro-F1 at epoch {}", out.best_epoch);
    let dir = layout.train_dir(&tcfg.ablation);
    out.model.save(&dir.join(MODEL_FILE))?;
    write_atomic(&dir.join(LOG_FILE), jsonl(cfg.seed, &out.log).as_bytes())?;
    let graph = GraphFile {
        seed: cfg.seed,
        graph: out.model.graph.export(&data.manifest.label_names),
    };
    write_json(&dir.join(GRAPH_FILE), &graph)?;
    Ok(out.log)
}

/// Boosting plan as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub seed: u64,
    /// Base-model validation F1 per label, which the plan was built from.
    pub base_val_f1: Vec<f64>,
    #[serde(flatten)]
    pub plan: BoostingPlan,
}

fn load_model(dir: &Path, verb: &'static str) -> Result<Model> {
    let path = dir.join(MODEL_FILE);
    require(&path, verb)?;
    Ok(Model::load(&path)?)
}

/// Train the second model on the base model's weak labels.
pub fn boost(cfg: &RunConfig, layout: &Layout, ablation: &Ablation) -> Result<PlanFile> {
    let tcfg = train_config(cfg, ablation);
    let data = load_dataset(layout)?;
    let base = load_model(&layout.train_dir(&tcfg.ablation), "train")?;
    let (probs, truth) = predict_split(&base, &data, Split::Val)?;
    let f1: Vec<f64> = f1_suite(&truth, &binarize(&probs, cfg.boost.threshold))?
        .per_label
        .iter()
        .map(|s| s.f1)
        .collect();
    let plan = select_boost_labels(&f1, cfg.boost.f1_threshold, cfg.boost.replace_count, cfg.boost.augment.clone());
    log::info!("boosting: fine-tune {:?}, replace {:?}", plan.finetune_set, plan.replace_set);
    let objective = tcfg
        .objective
        .build(&data.manifest.prevalence, &data.manifest.rules, &tcfg.ablation)?;
    let seed = stage_seed(cfg.seed, "boost");
    let epochs = cfg.boost.epochs;
    let out = boost_finetune(&base, &plan, &data, &objective, &cfg.boost, seed, |e| {
        log::info!(
            "boost epoch {}/{epochs}: loss {:.5}, val macro-F1 (fine-tune labels) {:.4}",
            e.epoch,
            e.total,
            e.val_macro_f1
        )
    })?;
    let dir = layout.boost_dir(&tcfg.ablation);
    out.model.save(&dir.join(MODEL_FILE))?;
    write_atomic(&dir.join(LOG_FILE), jsonl(cfg.seed, &out.log).as_bytes())?;
    let file = PlanFile {
        seed: cfg.seed,
        base_val_f1: f1,
        plan,
    };
    write_json(&dir.join(PLAN_FILE), &file)?;
    Ok(file)
}

/// Evaluation output for one model on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub model: String,
    pub seed: u64,
    pub split: Split,
    /// Labels taken from the second model (boosted reports only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replace_set: Option<Vec<usize>>,
    pub metrics: MetricReport,
}

/// Model name used in reports, e.g. `MIRNet-C`.
pub fn run_name(a: &Ablation, boosted: bool) -> String {
    format!("MIRNet{}{}", a.tag(), if boosted { "-Boosting" } else { "" })
}

/// Evaluate the trained model, and the boosted ensemble when one exists.
pub fn eval(cfg: &RunConfig, layout: &Layout, ablation: &Ablation) -> Result<Vec<MetricsFile>> {
    let tcfg = train_config(cfg, ablation);
    let a = &tcfg.ablation;
    let data = load_dataset(layout)?;
    let m = &data.manifest;
    let base = load_model(&layout.train_dir(a), "train")?;
    let (probs, truth) = predict_split(&base, &data, Split::Test)?;
    let thr = cfg.eval.threshold;
    let report = |p| evaluate(&truth, p, thr, &m.label_names, &m.groups, &m.rules);
    let dir = layout.eval_dir(a);
    let mut files = vec![MetricsFile {
        model: run_name(a, false),
        seed: cfg.seed,
        split: Split::Test,
        replace_set: None,
        metrics: report(&probs)?,
    }];
    write_json(&dir.join(METRICS_FILE), &files[0])?;
    write_atomic(&dir.join(PER_LABEL_FILE), files[0].metrics.per_label_csv().as_bytes())?;
    log::info!("{}: test macro-F1 {:.4}", files[0].model, files[0].metrics.macro_f1);

    let boost_dir = layout.boost_dir(a);
    let plan_path = boost_dir.join(PLAN_FILE);
    if plan_path.is_file() {
        let plan: PlanFile = read_json(&plan_path)?;
        let second = load_model(&boost_dir, "boost")?;
        let merged = merge_predictions(&probs, &second.predict(&data.split(Split::Test).0)?, &plan.plan.replace_set)?;
        let file = MetricsFile {
            model: run_name(a, true),
            seed: cfg.seed,
            split: Split::Test,
            replace_set: Some(plan.plan.replace_set.clone()),
            metrics: report(&merged)?,
        };
        write_json(&dir.join(BOOSTED_METRICS_FILE), &file)?;
        write_atomic(&dir.join(BOOSTED_PER_LABEL_FILE), file.metrics.per_label_csv().as_bytes())?;
        log::info!("{}: test macro-F1 {:.4}", file.model, file.metrics.macro_f1);
        files.push(file);
    }
    Ok(files)
}

pub use crate::report::report;
