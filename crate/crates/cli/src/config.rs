//! Run configuration: one JSON document with a section per verb.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mirnet_core::dataset::GeneratorConfig;
use mirnet_core::mae::{DecoderConfig, EncoderConfig, PretrainConfig};
use mirnet_core::train::{BoostConfig, TrainConfig};

use crate::error::CliError;

/// The small configuration shipped with the binary.
pub const BUNDLED_DESK: &str = include_str!("../configs/desk.json");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Desk-scale sizes that finish in minutes on one core.
    #[default]
    Desk,
    /// ViT-Base geometry, batch 200 and 200 epochs.
    Paper,
}

fn d_labeled() -> usize {
    1000
}
fn d_unlabeled() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "d_labeled")]
    pub n_labeled: usize,
    #[serde(default = "d_unlabeled")]
    pub n_unlabeled: usize,
    /// The generator's own `seed` is replaced by one derived from the run seed.
    pub generator: GeneratorConfig,
}

fn d_threshold() -> f64 {
    mirnet_core::metrics::DEFAULT_THRESHOLD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "d_threshold")]
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: d_threshold(),
        }
    }
}

/// Optional locations of upstream artifacts; defaults live under the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Directory holding `manifest.json`.
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Pretrained `encoder.json`.
    #[serde(default)]
    pub encoder: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub boost: BoostConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Parse JSON, reporting the offending key path on failure.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{origin}: at `{path}`: {}", e.into_inner()))
        })
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_DESK, "bundled desk config").expect("bundled config parses")
    }

    /// Read `path`, or the bundled config when `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::bundled()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    /// Swap in paper-scale architecture and schedule.
    pub fn apply_profile(&mut self, profile: Profile) {
        if profile == Profile::Desk {
            return;
        }
        let enc = EncoderConfig::paper_scale();
        let g = &mut self.data.generator;
        g.height = enc.height;
        g.width = enc.width;
        g.patch_size = enc.patch_size;
        g.appearance = None;
        self.pretrain.encoder = enc.clone();
        self.pretrain.decoder = DecoderConfig::paper_scale();
        self.pretrain.batch_size = 200;
        self.pretrain.epochs = 200;
        self.train.encoder = enc;
        self.train.epochs = 200;
        self.train.batch_size = 200;
        self.boost.batch_size = 200;
    }

    /// Check every section before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: mirnet_core::Error| CliError::Config(e.to_string());
        let g = &self.data.generator;
        g.validate().map_err(cfg)?;
        self.pretrain.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.boost.validate().map_err(cfg)?;
        let enc = &self.pretrain.encoder;
        if (enc.height, enc.width, enc.patch_size) != (g.height, g.width, g.patch_size) {
            return Err(CliError::Config(format!(
                "pretrain.encoder expects {}x{} images with patch {}, data.generator produces {}x{} with patch {}",
                enc.height, enc.width, enc.patch_size, g.height, g.width, g.patch_size
            )));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(CliError::Config(format!("eval.threshold {} not in (0, 1)", self.eval.threshold)));
        }
        Ok(())
    }
}
