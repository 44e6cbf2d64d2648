//! Versioned training config: a flat TOML table. Every key is required so a
//! missing key is reported by name.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use suffixlab_core::toylab::{CharVocab, ToyDatasetConfig, TrainConfig};
use suffixlab_core::ModelConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub format_version: u32,
    pub seed: u64,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub n_queries: usize,
    pub flagged_fraction: f64,
    pub heldout_fraction: f64,
    pub refusal_text: String,
    pub compliance_prefix: String,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub grad_clip: f64,
    pub max_filler: usize,
    pub noise_filler_prob: f64,
    pub refusal_gate: f64,
}

impl TrainFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: Self = toml::from_str(text).map_err(|e| anyhow::anyhow!("{}", e.message()))?;
        if file.format_version != CONFIG_VERSION {
            bail!(
                "config format_version {} unsupported (expected {CONFIG_VERSION})",
                file.format_version
            );
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size: CharVocab::new().len(),
            max_seq_len: self.max_seq_len,
            seed: self.seed,
        }
    }

    pub fn dataset(&self) -> ToyDatasetConfig {
        ToyDatasetConfig {
            n_queries: self.n_queries,
            flagged_fraction: self.flagged_fraction,
            heldout_fraction: self.heldout_fraction,
            refusal_text: self.refusal_text.clone(),
            compliance_prefix: self.compliance_prefix.clone(),
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup: self.warmup,
            grad_clip: self.grad_clip,
            max_filler: self.max_filler,
            noise_filler_prob: self.noise_filler_prob,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}
