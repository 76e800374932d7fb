//! Synthetic benchmark generation and manifest/image I/O.

mod generator;
mod image;
mod manifest;

use std::path::Path;

pub use generator::{
    generate, render, CorrelatedPair, GeneratedDataset, GeneratorConfig, LabelSampler, Signature,
    PREVALENCE_TOLERANCE,
};
pub use image::{Image, CHANNELS};
pub use manifest::{Dataset, DatasetManifest, LabelGroup, SampleRecord, Split, MANIFEST_SCHEMA_VERSION};

use crate::error::Result;
use crate::io::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";

impl GeneratedDataset {
    /// Write images and `manifest.json` under `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        for (s, img) in self.manifest.samples.iter().zip(&self.images) {
            write_atomic(&dir.join(&s.image), img.to_ppm().as_bytes())?;
        }
        let path = dir.join(MANIFEST_FILE);
        crate::io::write_json(&path, &self.manifest)?;
        Ok(path)
    }

    /// In-memory dataset, identical to writing and loading it again.
    pub fn into_dataset(self) -> Dataset {
        Dataset {
            manifest: self.manifest,
            root: std::path::PathBuf::from("."),
            images: self.images,
        }
    }
}

/// Load a manifest and its images, re-validating every invariant.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    Dataset::load(path)
}

pub fn compute_prevalence(manifest: &DatasetManifest, split: Split) -> Result<Vec<f64>> {
    manifest.compute_prevalence(split)
}
