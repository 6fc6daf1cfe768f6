//! Run configuration: TOML with sections, unknown keys rejected, seed
//! overridable through `RIGID_SEED`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::composition::{OptimizerParams, VisibleNetConfig};
use crate::encoders::{BaseEncoderConfig, RecurrentConfig, RegressionOptions};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::pipeline::{EditedFlows, TrainOptions};

pub const SEED_ENV: &str = "RIGID_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub resolution: usize,
    pub latent_layers: usize,
    pub latent_dim: usize,
    pub split_index: usize,
    pub noise_resolution: usize,
    pub channels: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            resolution: g.resolution,
            latent_layers: g.latent_layers,
            latent_dim: g.latent_dim,
            split_index: g.split_index,
            noise_resolution: g.noise_resolution,
            channels: g.channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub episodes: usize,
    pub frames: usize,
    pub frame_resolution: usize,
    pub occluder: bool,
    /// Render generator-native episodes instead of procedural faces.
    pub oracle: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            episodes: 20,
            frames: 6,
            frame_resolution: 32,
            occluder: true,
            oracle: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            alpha: w.alpha,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseEncoderSection {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Generator samples drawn for the regression set.
    pub samples: usize,
}

impl Default for BaseEncoderSection {
    fn default() -> Self {
        let r = RegressionOptions::default();
        Self {
            iterations: r.iterations,
            batch: r.batch,
            lr: r.lr,
            samples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisnetSection {
    pub lr: f64,
    pub iterations: usize,
    pub batch: usize,
    pub channels: Vec<usize>,
}

impl Default for VisnetSection {
    fn default() -> Self {
        let o = OptimizerParams::default();
        Self {
            lr: o.lr,
            iterations: o.iterations,
            batch: o.batch,
            channels: VisibleNetConfig::new(32, 0).channels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditedFlowSource {
    Estimated,
    Original,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub steps: usize,
    pub max_strength: f64,
    pub edited_flows: EditedFlowSource,
    pub train_base_encoder: bool,
    pub cosine_decay: bool,
    pub head_init_std: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            lr: t.lr,
            steps: t.steps,
            max_strength: t.max_strength,
            edited_flows: EditedFlowSource::Estimated,
            train_base_encoder: t.train_base_encoder,
            cosine_decay: t.cosine_decay,
            head_init_std: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub seeds: usize,
    pub eval_episodes: usize,
    pub edit_strength: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            seeds: 3,
            eval_episodes: 10,
            edit_strength: 2.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorSection,
    pub data: DataSection,
    pub losses: LossSection,
    pub base_encoder: BaseEncoderSection,
    pub visnet: VisnetSection,
    pub train: TrainSection,
    pub ablation: AblationSection,
}

impl RunConfig {
    /// Parses and validates TOML text. Does not consult the environment.
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Applies `RIGID_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.generator_config().validate()?;
        self.recurrent_config().validate()?;
        self.visnet_config().validate()?;
        self.loss_weights().validate()?;
        let d = &self.data;
        if d.frames == 0 || d.episodes == 0 {
            return Err(Error::Config("data.frames and data.episodes must be positive".into()));
        }
        if d.oracle && d.frame_resolution != self.generator.resolution {
            return Err(Error::Config("oracle episodes are rendered at the generator resolution".into()));
        }
        for (name, lr) in [("train.lr", self.train.lr), ("visnet.lr", self.visnet.lr), ("base_encoder.lr", self.base_encoder.lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.train.max_strength.is_finite() && self.train.max_strength >= 0.0) {
            return Err(Error::Config("train.max_strength must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let g = &self.generator;
        GeneratorConfig {
            resolution: g.resolution,
            latent_layers: g.latent_layers,
            latent_dim: g.latent_dim,
            split_index: g.split_index,
            noise_resolution: g.noise_resolution,
            channels: g.channels,
            seed: self.seed,
        }
    }

    pub fn base_encoder_config(&self) -> BaseEncoderConfig {
        let g = &self.generator;
        BaseEncoderConfig::new(g.resolution, g.latent_layers, g.latent_dim, g.split_index, self.seed.wrapping_add(1))
    }

    pub fn recurrent_config(&self) -> RecurrentConfig {
        let g = &self.generator;
        let mut c = RecurrentConfig::new(
            g.resolution,
            g.noise_resolution,
            g.latent_layers,
            g.latent_dim,
            g.split_index,
            self.seed.wrapping_add(2),
        );
        c.head_init_std = self.train.head_init_std;
        c
    }

    pub fn visnet_config(&self) -> VisibleNetConfig {
        VisibleNetConfig {
            resolution: self.data.frame_resolution,
            channels: self.visnet.channels.clone(),
            seed: self.seed.wrapping_add(3),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        let l = &self.losses;
        LossWeights {
            alpha: l.alpha,
            lambda1: l.lambda1,
            lambda2: l.lambda2,
            lambda3: l.lambda3,
        }
    }

    pub fn regression_options(&self) -> RegressionOptions {
        let b = &self.base_encoder;
        RegressionOptions {
            iterations: b.iterations,
            batch: b.batch,
            lr: b.lr,
            seed: self.seed.wrapping_add(4),
        }
    }

    pub fn visnet_optimizer(&self) -> OptimizerParams {
        let v = &self.visnet;
        OptimizerParams {
            lr: v.lr,
            iterations: v.iterations,
            batch: v.batch,
            seed: self.seed.wrapping_add(5),
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        let t = &self.train;
        TrainOptions {
            steps: t.steps,
            lr: t.lr,
            seed: self.seed.wrapping_add(6),
            weights: self.loss_weights(),
            max_strength: t.max_strength,
            edited_flows: match t.edited_flows {
                EditedFlowSource::Estimated => EditedFlows::Estimated,
                EditedFlowSource::Original => EditedFlows::Original,
            },
            estimator: Default::default(),
            train_base_encoder: t.train_base_encoder,
            cosine_decay: t.cosine_decay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 16);
        let mut d = c.clone();
        d.seed = 9;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml("seed = 4\n[train]\nsteps = 10\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.losses, LossSection::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[train]\nstepz = 10\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("stepz")), "{err}");
        let err = RunConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[generator]\nsplit_index = 20\n").is_err());
        assert!(RunConfig::from_toml("[losses]\nlambda2 = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlr = 0.0\n").is_err());
        assert!(RunConfig::from_toml("[data]\noracle = true\nframe_resolution = 48\n").is_err());
    }
}
