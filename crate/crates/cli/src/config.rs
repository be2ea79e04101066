//! JSON job files. Every field has a default, unknown keys are rejected and
//! command-line flags override whatever the file sets.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hsiad::desk::DatasetConfig;
use hsiad::detectors::DualWindow;
use hsiad::maskgen::MaskParams;
use hsiad::net::NetworkConfig;
use hsiad::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))
        }
    }
}

pub type SynthJob = DatasetConfig;

/// Architecture choices; the spatial size comes from the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub channels: usize,
    pub heads: [usize; 5],
    pub window_partition: usize,
    pub mlp_ratio: usize,
    /// Leading bands fed to the network; all bands when unset.
    pub bands: Option<usize>,
    pub zero_residual_start: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        let d = NetworkConfig::for_input(64, 64, 1);
        Self {
            channels: d.channels,
            heads: d.heads,
            window_partition: d.window_partition,
            mlp_ratio: d.mlp_ratio,
            bands: None,
            zero_residual_start: false,
        }
    }
}

impl NetworkSpec {
    pub fn resolve(&self, height: usize, width: usize, bands: usize) -> NetworkConfig {
        NetworkConfig {
            channels: self.channels,
            heads: self.heads,
            window_partition: self.window_partition,
            mlp_ratio: self.mlp_ratio,
            input_size: (height, width, self.bands.unwrap_or(bands)),
            zero_residual_start: self.zero_residual_start,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainJob {
    /// Dataset directory with a `manifest.json`.
    pub data: Option<PathBuf>,
    /// Validation cube; the dataset's own validation cube when unset.
    pub val: Option<PathBuf>,
    pub network: NetworkSpec,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    #[default]
    Grx,
    Lrx,
    Enhanced,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectJob {
    /// A cube stem or a directory of cubes.
    pub input: Option<PathBuf>,
    pub detector: DetectorKind,
    pub checkpoint: Option<PathBuf>,
    pub window: DualWindow,
    pub emit_residual: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalJob {
    /// Directory of score maps written by `detect`.
    pub scores: Option<PathBuf>,
    /// Directory holding `<scene>.pgm` truths.
    pub truth: Option<PathBuf>,
    /// Second score directory, reported side by side with the first.
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskPreviewJob {
    pub mask: MaskParams,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for MaskPreviewJob {
    fn default() -> Self {
        Self {
            mask: MaskParams::default(),
            count: 8,
            height: 64,
            width: 64,
            seed: 0,
        }
    }
}
