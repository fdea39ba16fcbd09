//! Composite run configuration: one TOML file mirrors the per-module config
//! structs, field for field. CLI flags override file values, which override
//! the desk-scale defaults (documented precedence: flags > file > defaults).

use crate::discriminator::DiscriminatorConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::inversion::InversionConfig;
use crate::losses::SsimConfig;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_side")]
    pub image_side: usize,
    #[serde(default = "default_generator")]
    pub generator: GeneratorConfig,
    #[serde(default = "default_discriminator")]
    pub discriminator: DiscriminatorConfig,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub inversion: InversionConfig,
    #[serde(default)]
    pub ssim: SsimConfig,
}

fn default_side() -> usize {
    64
}

fn default_generator() -> GeneratorConfig {
    GeneratorConfig::desk(64)
}

fn default_discriminator() -> DiscriminatorConfig {
    DiscriminatorConfig::desk(64)
}

fn default_encoder() -> EncoderConfig {
    EncoderConfig::desk(64, 128)
}

impl RunConfig {
    /// Desk-scale defaults at a resolution.
    pub fn desk(image_side: usize) -> Self {
        RunConfig {
            seed: 0,
            image_side,
            generator: GeneratorConfig::desk(image_side),
            discriminator: DiscriminatorConfig::desk(image_side),
            encoder: EncoderConfig::desk(image_side, 128),
            train: TrainConfig::default(),
            inversion: InversionConfig::default(),
            ssim: SsimConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.inversion.validate()?;
        self.ssim.validate()?;
        if self.generator.image_side != self.image_side
            || self.discriminator.image_side != self.image_side
            || self.encoder.image_side != self.image_side
        {
            return Err(Error::Config(
                "generator, discriminator and encoder must share image_side".into(),
            ));
        }
        if self.generator.latent_dim != self.encoder.latent_dim {
            return Err(Error::Config(
                "generator and encoder must share latent_dim".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Format(format!("bad config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Echo the fully resolved configuration (provenance file for re-runs).
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
