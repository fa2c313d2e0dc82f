//! Canonical experiment configuration (versioned TOML schema).
//!
//! A config fully determines an experiment up to the run seed: the scenario
//! family (a named preset or an explicit object list), the model
//! hyperparameters, the optimizer settings and the loss weights. The config
//! hash is the SHA-256 of the canonical serialization and is stored in every
//! metrics record so runs can be traced back to their exact configuration.

use crate::context::ContextHead;
use crate::error::{Error, Result};
use crate::losses::{ContrastiveOptions, LossWeights};
use crate::nn::Mlp;
use crate::rng::Rng;
use crate::scenario::{
    twin_occlusion_config, ObjectSpec, OcclusionEvent, ScenarioConfig, TwinOcclusionParams,
};
use crate::tensor::Kernel2D;
use crate::tracker::{KeySource, TrackerOptions, TrackerParams};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_VERSION
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub losses: LossConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// Named scenario family; currently `"twin_occlusion"`. Leave unset for a
    /// fully explicit object list.
    #[serde(default)]
    pub preset: Option<String>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub frames: usize,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub pos_scale: Option<f64>,
    #[serde(default)]
    pub appearance_scale: Option<f64>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub twin_groups: Vec<Vec<usize>>,
    #[serde(default)]
    pub occlusions: Vec<OcclusionEvent>,
}

fn default_noise_sigma() -> f64 {
    0.02
}

impl ScenarioSection {
    /// Materializes the scenario config for a given seed.
    pub fn build(&self, seed: u64) -> Result<ScenarioConfig> {
        match self.preset.as_deref() {
            Some("twin_occlusion") => {
                if !self.objects.is_empty() {
                    return Err(Error::Config(
                        "scenario.objects must be empty when scenario.preset is set".into(),
                    ));
                }
                let mut cfg = twin_occlusion_config(&TwinOcclusionParams {
                    height: self.height,
                    width: self.width,
                    channels: self.channels,
                    classes: self.classes,
                    frames: self.frames,
                    noise_sigma: self.noise_sigma,
                    seed,
                });
                if let Some(p) = self.pos_scale {
                    cfg.pos_scale = p;
                }
                if let Some(a) = self.appearance_scale {
                    cfg.appearance_scale = a;
                }
                Ok(cfg)
            }
            Some(other) => Err(Error::Config(format!(
                "scenario.preset: unknown preset '{other}'"
            ))),
            None => {
                if self.objects.is_empty() {
                    return Err(Error::Config(
                        "scenario.objects: explicit scenarios need at least one object".into(),
                    ));
                }
                Ok(ScenarioConfig {
                    height: self.height,
                    width: self.width,
                    channels: self.channels,
                    classes: self.classes,
                    frames: self.frames,
                    objects: self.objects.clone(),
                    twin_groups: self.twin_groups.clone(),
                    occlusions: self.occlusions.clone(),
                    noise_sigma: self.noise_sigma,
                    pos_scale: self.pos_scale.unwrap_or(0.02),
                    appearance_scale: self.appearance_scale.unwrap_or(2.0),
                    seed,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum KernelModeConfig {
    Average,
    Learnable,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum KeySourceConfig {
    Core,
    Fused,
}

impl From<KeySourceConfig> for KeySource {
    fn from(k: KeySourceConfig) -> Self {
        match k {
            KeySourceConfig::Core => KeySource::Core,
            KeySourceConfig::Fused => KeySource::Fused,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Transformer blocks in the tracker.
    pub blocks: usize,
    /// Context filter size (odd).
    pub kernel_size: usize,
    pub kernel_mode: KernelModeConfig,
    /// Mask binarization threshold for bands and prototypes.
    pub mask_threshold: f64,
    /// Apply the fusion MLP's trailing ReLU (the written form).
    pub final_relu: bool,
    /// Cosine-normalize embeddings inside contrastive losses.
    pub normalize_contrastive: bool,
    /// Draw contrastive negatives from the anchor's frame as well.
    pub same_frame_negatives: bool,
    pub key_source: KeySourceConfig,
    /// Hungarian context alignment in the tracker.
    pub alignment: bool,
    /// Frames sampled per context-head training step.
    pub context_frames: usize,
    /// Clip length for tracker training steps.
    pub tracker_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 6,
            kernel_size: 9,
            kernel_mode: KernelModeConfig::Average,
            mask_threshold: 0.5,
            final_relu: true,
            normalize_contrastive: false,
            same_frame_negatives: false,
            key_source: KeySourceConfig::Fused,
            alignment: true,
            context_frames: 3,
            tracker_frames: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub context_steps: usize,
    pub tracker_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-4,
            weight_decay: 5e-2,
            context_steps: 2000,
            tracker_steps: 300,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub ctx: f64,
    pub pcc: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        LossConfig {
            cls: w.cls,
            bce: w.bce,
            dice: w.dice,
            ctx: w.ctx,
            pcc: w.pcc,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        if config.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "version: unsupported config version {}",
                config.version
            )));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.kernel_size % 2 == 0 || self.model.kernel_size == 0 {
            return Err(Error::Config(format!(
                "model.kernel_size: must be odd and positive, got {}",
                self.model.kernel_size
            )));
        }
        if self.model.blocks == 0 {
            return Err(Error::Config("model.blocks: must be positive".into()));
        }
        if self.model.context_frames < 1 || self.model.tracker_frames < 1 {
            return Err(Error::Config(
                "model.context_frames / model.tracker_frames: must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Canonical serialization (field order fixed by the schema).
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serialization")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.to_canonical_toml().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            cls: self.losses.cls,
            bce: self.losses.bce,
            dice: self.losses.dice,
            ctx: self.losses.ctx,
            pcc: self.losses.pcc,
        }
    }

    pub fn contrastive_options(&self) -> ContrastiveOptions {
        ContrastiveOptions {
            normalize: self.model.normalize_contrastive,
            same_frame_negatives: self.model.same_frame_negatives,
        }
    }

    pub fn tracker_options(&self) -> TrackerOptions {
        TrackerOptions {
            key_source: self.model.key_source.into(),
            alignment: self.model.alignment,
        }
    }

    /// Freshly initialized context head for a given seed.
    pub fn init_context_head(&self, seed: u64) -> Result<ContextHead> {
        let c = self.scenario.channels;
        let kernel = match self.model.kernel_mode {
            KernelModeConfig::Average => Kernel2D::average(self.model.kernel_size)?,
            KernelModeConfig::Learnable => {
                let k = self.model.kernel_size;
                Kernel2D::learnable(k, vec![1.0 / (k * k) as f64; k * k])?
            }
        };
        let mut rng = Rng::new(seed).split(11);
        let mlp = Mlp::xavier(&[2 * c, c, c, c], self.model.final_relu, &mut rng);
        Ok(ContextHead::new(kernel, mlp, self.model.mask_threshold))
    }

    /// Identity-initialized tracker for a given seed.
    pub fn init_tracker(&self, seed: u64) -> TrackerParams {
        TrackerParams::identity_init(self.scenario.channels, self.model.blocks, seed)
    }

    /// Default twin-occlusion experiment (the benchmark configuration).
    pub fn twin_benchmark() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            scenario: ScenarioSection {
                preset: Some("twin_occlusion".into()),
                height: 64,
                width: 64,
                channels: 16,
                classes: 4,
                frames: 12,
                noise_sigma: 0.02,
                pos_scale: None,
                appearance_scale: None,
                objects: Vec::new(),
                twin_groups: Vec::new(),
                occlusions: Vec::new(),
            },
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            losses: LossConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_toml_round_trips() {
        let config = ExperimentConfig::twin_benchmark();
        let text = config.to_canonical_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(config, back);
        assert_eq!(config.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let text = r#"
            version = 1
            [scenario]
            preset = "twin_occlusion"
            height = 32
            width = 32
            channels = 8
            classes = 2
            frames = 6
            [model]
            bogus_knob = 3
        "#;
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        assert!(err.to_string().contains("bogus_knob"), "{err}");
    }

    #[test]
    fn even_kernel_size_is_rejected_with_key_name() {
        let mut config = ExperimentConfig::twin_benchmark();
        config.model.kernel_size = 8;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("kernel_size"));
    }

    #[test]
    fn preset_with_objects_is_rejected() {
        let mut config = ExperimentConfig::twin_benchmark();
        config.scenario.objects.push(ObjectSpec {
            shape: crate::scenario::Shape::Disc { radius: 2.0 },
            start: (5.0, 5.0),
            velocity: (0.0, 0.0),
            class: 0,
            appearance: None,
        });
        assert!(config.scenario.build(0).is_err());
    }

    #[test]
    fn seed_flows_into_the_scenario() {
        let config = ExperimentConfig::twin_benchmark();
        assert_eq!(config.scenario.build(5).unwrap().seed, 5);
        assert_eq!(config.scenario.build(6).unwrap().seed, 6);
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = ExperimentConfig::twin_benchmark();
        let mut other = base.clone();
        other.optimizer.learning_rate = 2e-4;
        assert_ne!(base.hash(), other.hash());
    }
}
