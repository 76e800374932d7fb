//! Dataset manifest: JSON index of samples, labels, splits and label metadata.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};
use crate::losses::{validate_rules, ConstraintRule};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    PretrainUnlabeled,
    Train,
    Val,
    Test,
}

impl Split {
    pub fn is_labeled(self) -> bool {
        self != Split::PretrainUnlabeled
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::PretrainUnlabeled => "pretrain-unlabeled",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Named family of labels, e.g. tongue colour or coating.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelGroup {
    pub name: String,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    /// Path relative to the manifest directory.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
    pub split: Split,
}

impl SampleRecord {
    pub fn label_bits(&self) -> Option<Vec<bool>> {
        self.labels.as_ref().map(|l| l.iter().map(|&b| b == 1).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub label_names: Vec<String>,
    pub groups: Vec<LabelGroup>,
    pub rules: Vec<ConstraintRule>,
    /// Train-split prevalence per label.
    pub prevalence: Vec<f64>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    /// Label matrix (row per sample) for a labeled split.
    pub fn labels(&self, split: Split) -> Vec<Vec<bool>> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .filter_map(SampleRecord::label_bits)
            .collect()
    }

    pub fn compute_prevalence(&self, split: Split) -> Result<Vec<f64>> {
        let k = self.num_labels();
        let mut counts = vec![0usize; k];
        let mut n = 0usize;
        for s in self.samples.iter().filter(|s| s.split == split) {
            let labels = s
                .labels
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("sample {} in split {split} has no labels", s.id)))?;
            for (c, &b) in counts.iter_mut().zip(labels) {
                *c += b as usize;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::EmptySplit(split.to_string()));
        }
        Ok(counts.iter().map(|&c| c as f64 / n as f64).collect())
    }

    /// Structural checks; image files are checked by [`Dataset::load`].
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "manifest schema version {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let k = self.num_labels();
        if k == 0 {
            return Err(Error::invalid("manifest has no labels"));
        }
        let p = self.patch_size;
        if p == 0 || self.height == 0 || self.width == 0 || self.height % p != 0 || self.width % p != 0 {
            return Err(Error::invalid(format!(
                "image size {}x{} not divisible by patch size {p}",
                self.height, self.width
            )));
        }
        let mut seen = vec![false; k];
        for g in &self.groups {
            for &l in &g.labels {
                if l >= k || std::mem::replace(&mut seen[l], true) {
                    return Err(Error::invalid(format!("group `{}` breaks the label partition at {l}", g.name)));
                }
            }
        }
        if let Some(l) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("label {l} belongs to no group")));
        }
        validate_rules(&self.rules, k)?;

        let mut ids = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
            match (&s.labels, s.split.is_labeled()) {
                (Some(l), true) => {
                    if l.len() != k || l.iter().any(|&b| b > 1) {
                        return Err(Error::invalid(format!("sample {}: labels must be {k} bits", s.id)));
                    }
                    let bits = s.label_bits().unwrap_or_default();
                    if let Some(r) = self.rules.iter().find(|r| r.violated(&bits)) {
                        return Err(Error::invalid(format!("sample {} violates rule {r:?}", s.id)));
                    }
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(Error::invalid(format!("unlabeled sample {} carries labels", s.id)));
                }
                (None, true) => {
                    return Err(Error::invalid(format!("sample {} in split {} has no labels", s.id, s.split)));
                }
            }
        }

        if self.prevalence.len() != k {
            return Err(Error::invalid(format!("{} prevalence values for {k} labels", self.prevalence.len())));
        }
        let recomputed = self.compute_prevalence(Split::Train)?;
        for (label, (&stored, &fresh)) in self.prevalence.iter().zip(&recomputed).enumerate() {
            if stored != fresh {
                return Err(Error::PrevalenceMismatch {
                    label,
                    stored,
                    recomputed: fresh,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(format!("serialising manifest: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Manifest plus decoded images, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub images: Vec<Image>,
}

impl Dataset {
    /// Read a manifest, re-validate it and decode every referenced image.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(path)?;
        manifest.validate()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut images = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            let file = root.join(&s.image);
            if !file.is_file() {
                return Err(Error::MissingImage {
                    id: s.id.clone(),
                    path: file,
                });
            }
            let img = Image::read_ppm(&file)?;
            if img.height != manifest.height || img.width != manifest.width {
                return Err(Error::Image {
                    path: file,
                    msg: format!(
                        "size {}x{} differs from manifest {}x{}",
                        img.height, img.width, manifest.height, manifest.width
                    ),
                });
            }
            images.push(img);
        }
        Ok(Self { manifest, root, images })
    }

    pub fn num_labels(&self) -> usize {
        self.manifest.num_labels()
    }

    /// Images and labels of one split.
    pub fn split(&self, split: Split) -> (Vec<&Image>, Vec<Vec<bool>>) {
        let idx = self.manifest.indices(split);
        let images = idx.iter().map(|&i| &self.images[i]).collect();
        let labels = idx
            .iter()
            .filter_map(|&i| self.manifest.samples[i].label_bits())
            .collect();
        (images, labels)
    }
}
