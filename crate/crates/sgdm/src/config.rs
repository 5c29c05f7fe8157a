//! The experiment configuration file (TOML) shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sgdm_core::denoiser::{DenoiserConfig, GuidanceKind};
use sgdm_core::diffusion::SamplerConfig;

use crate::annotate::{AnnotationConfig, GuidanceVariant};
use crate::datasets::ShapesConfig;
use crate::error::{invalid, Error, Result};
use crate::training::{DiffusionConfig, TrainConfig};

/// Network size. Guidance kind, cluster count and resolution come from the
/// variant, the annotations and the data section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_resolution: usize,
    pub attention_resolutions: Vec<usize>,
    pub num_heads: usize,
    pub cond_embedding_dim: usize,
    pub cond_mlp_layers: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2],
            blocks_per_resolution: 1,
            attention_resolutions: vec![8],
            num_heads: 4,
            cond_embedding_dim: 128,
            cond_mlp_layers: 2,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn denoiser(&self, kind: GuidanceKind, num_clusters: usize, image_size: usize) -> DenoiserConfig {
        let mut c = DenoiserConfig::new(kind, num_clusters, image_size);
        c.base_channels = self.base_channels;
        c.channel_multipliers = self.channel_multipliers.clone();
        c.blocks_per_resolution = self.blocks_per_resolution;
        c.attention_resolutions = self.attention_resolutions.clone();
        c.num_heads = self.num_heads;
        c.cond_embedding_dim = self.cond_embedding_dim;
        c.cond_mlp_layers = self.cond_mlp_layers;
        c.dropout = self.dropout;
        c
    }
}

/// Which images FID is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSet {
    /// The training corpus itself.
    #[default]
    Train,
    /// A fresh corpus from the same generator with `reference_seed`.
    Fresh,
}

pub const METRIC_NAMES: [&str; 3] = ["fid", "is", "nmi"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub num_samples: usize,
    /// DDIM steps used for evaluation samples.
    pub num_steps: usize,
    pub metrics: Vec<String>,
    pub is_splits: usize,
    pub w_values: Vec<f64>,
    pub reference: ReferenceSet,
    pub reference_seed: u64,
    /// Pick the checkpoint with the lowest FID after training.
    pub select_checkpoint: bool,
    pub select_samples: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            num_samples: 1000,
            num_steps: 50,
            metrics: vec!["fid".into()],
            is_splits: 10,
            w_values: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            reference: ReferenceSet::Train,
            reference_seed: 1_000_003,
            select_checkpoint: false,
            select_samples: 250,
        }
    }
}

pub fn check_metrics(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return invalid("no metrics requested");
    }
    for n in names {
        if !METRIC_NAMES.contains(&n.as_str()) {
            return invalid(format!("unknown metric \"{n}\"; valid names: {}", METRIC_NAMES.join(", ")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: ShapesConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub annotation: AnnotationConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let annotation = AnnotationConfig::default();
        Self {
            data: ShapesConfig { image_size: 32, ..ShapesConfig::default() },
            model: ModelConfig::default(),
            diffusion: DiffusionConfig::default(),
            train: TrainConfig { guidance_variant: annotation.variant, ..TrainConfig::default() },
            sampler: SamplerConfig::default(),
            annotation,
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets the guidance variant for both annotation and training.
    pub fn set_variant(&mut self, v: GuidanceVariant) {
        self.annotation.variant = v;
        self.train.guidance_variant = v;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.annotation.validate()?;
        self.diffusion.schedule()?;
        self.sampler.validate(&self.diffusion.schedule()?)?;
        let k = self.train.guidance_variant.num_clusters(self.annotation.num_clusters, self.data.num_classes);
        self.model.denoiser(self.train.guidance_variant.kind(), k, self.data.image_size).validate()?;
        check_metrics(&self.evaluation.metrics)?;
        let e = &self.evaluation;
        if e.num_samples < 2 || e.select_samples < 2 {
            return invalid("evaluation sample counts must be at least 2");
        }
        if e.num_steps == 0 || e.num_steps > self.diffusion.timesteps || e.is_splits == 0 {
            return invalid("evaluation.num_steps must lie in 1..=timesteps and is_splits must be positive");
        }
        if e.w_values.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return invalid("guidance strengths must be finite and non-negative");
        }
        Ok(())
    }

    /// JSON form embedded in every output file.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Caps rayon's global pool from `SGDM_NUM_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("SGDM_NUM_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| Error::Validation(format!("SGDM_NUM_THREADS={v} is not a positive integer")))?;
    if n == 0 {
        return invalid("SGDM_NUM_THREADS must be positive");
    }
    // A second initialisation (tests, library users) is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
