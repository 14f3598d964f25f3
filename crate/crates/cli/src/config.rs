//! The TOML configuration file. Every section has complete defaults, so a
//! file only needs the keys it changes.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ssae_core::refinement::{RbConfig, RecTarget};
use ssae_core::sae::SaeConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataSection,
    pub smpn: SmpnSection,
    pub sae: SaeSection,
    pub refinement: RefinementSection,
    pub edit: EditSection,
    pub eval: EvalSection,
    pub service: ServiceSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub image_size: usize,
    pub train_split: String,
    pub eval_split: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { image_size: 32, train_split: "train".into(), eval_split: "test".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmpnSection {
    pub base_channels: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub cosine_decay: bool,
    pub checkpoint_every: usize,
    pub mask_threshold: f64,
}

impl Default for SmpnSection {
    fn default() -> Self {
        Self { base_channels: 8, epochs: 50, lr: 2e-3, batch_size: 4, cosine_decay: true, checkpoint_every: 10, mask_threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeSection {
    /// `micro` (32 px), `toy` (64 px) or `full` (256 px).
    pub preset: String,
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub r1_gamma: f64,
    pub r1_every: u64,
    pub checkpoint_every: u64,
}

impl Default for SaeSection {
    fn default() -> Self {
        Self { preset: "micro".into(), steps: 1000, lr: 2e-3, batch_size: 4, r1_gamma: 10.0, r1_every: 16, checkpoint_every: 500 }
    }
}

impl SaeSection {
    pub fn config(&self) -> Result<SaeConfig> {
        match self.preset.as_str() {
            "micro" => Ok(SaeConfig::micro()),
            "toy" => Ok(SaeConfig::toy()),
            "full" => Ok(SaeConfig::full_scale()),
            other => anyhow::bail!("unknown autoencoder preset {other:?} (expected micro, toy or full)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementSection {
    pub pre_fusion_convs: usize,
    pub post_fusion_convs: usize,
    pub channels: usize,
    pub kernel: usize,
    pub disc_channels: usize,
    pub target: RecTarget,
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub strength: f64,
    pub checkpoint_every: u64,
}

impl Default for RefinementSection {
    fn default() -> Self {
        let rb = RbConfig::default();
        Self {
            pre_fusion_convs: rb.pre_fusion_convs,
            post_fusion_convs: rb.post_fusion_convs,
            channels: rb.channels,
            kernel: rb.kernel,
            disc_channels: rb.disc_channels,
            target: rb.target,
            steps: 300,
            lr: 1e-3,
            batch_size: 4,
            strength: 1.0,
            checkpoint_every: 100,
        }
    }
}

impl RefinementSection {
    pub fn rb_config(&self) -> RbConfig {
        RbConfig {
            pre_fusion_convs: self.pre_fusion_convs,
            post_fusion_convs: self.post_fusion_convs,
            channels: self.channels,
            kernel: self.kernel,
            disc_channels: self.disc_channels,
            target: self.target,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub strength: f64,
    /// Decoder layer for the noise; omitted means the last-but-one layer.
    pub injection_layer: Option<usize>,
}

impl Default for EditSection {
    fn default() -> Self {
        Self { strength: 1.0, injection_layer: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub embedder: String,
    pub warmup: usize,
    pub trials: usize,
    pub strength: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { embedder: "toy".into(), warmup: 1, trials: 5, strength: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub host: String,
    pub port: u16,
    pub max_upload_bytes: usize,
    pub session_cap: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080, max_upload_bytes: 8 * 1024 * 1024, session_cap: 64 }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
