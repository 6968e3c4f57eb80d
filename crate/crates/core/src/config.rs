//! Hyperparameters. Every struct here serializes to TOML with field names
//! matching the Rust fields, so a config file mirrors [`TrainingConfig`].

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PirError, Result};

/// Distance used by the generator-side reconstruction loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconMetric {
    /// Mean absolute pixel error.
    L1,
    /// Deep-feature distance from the perceptual backend.
    #[default]
    Perceptual,
    /// L1 between content codes and between style codes of input and reconstruction.
    CodeL1,
    /// Generator-side logistic loss of the discriminator on the reconstruction.
    Adversarial,
}

/// Which image of the pair the generator-side loss reconstructs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReconDirection {
    /// Rebuild `G_S(z)` from the content of `G_T(z)`.
    SourceOnly,
    /// Rebuild `G_T(z)` from the content of `G_S(z)`.
    TargetOnly,
    #[default]
    Both,
}

/// Parse a unit variant by its config-file name.
fn variant<T: for<'de> Deserialize<'de>>(s: &str, what: &str) -> Result<T> {
    T::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(s))
        .map_err(|_| PirError::config(format!("unknown {what} `{s}`")))
}

impl FromStr for ReconMetric {
    type Err = PirError;

    fn from_str(s: &str) -> Result<Self> {
        variant(s, "recon_metric")
    }
}

impl FromStr for ReconDirection {
    type Err = PirError;

    fn from_str(s: &str) -> Result<Self> {
        variant(s, "recon_direction")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the generator-side reconstruction loss.
    pub lambda1: f64,
    /// Weight of the translator-side reconstruction loss.
    pub lambda2: f64,
    pub recon_metric: ReconMetric,
    pub recon_direction: ReconDirection,
    /// Share of the patch head in the adversarial losses; the image head gets the rest.
    pub patch_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            recon_metric: ReconMetric::Perceptual,
            recon_direction: ReconDirection::Both,
            patch_weight: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(PirError::config("lambda1 must be a finite value >= 0"));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(PirError::config("lambda2 must be a finite value >= 0"));
        }
        if !(0.0..=1.0).contains(&self.patch_weight) {
            return Err(PirError::config("patch_weight must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Network widths shared by the generator, discriminator and translator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub mapping_lr_mul: f64,
    /// One entry per synthesis block, coarsest first.
    pub gen_channels: Vec<usize>,
    /// fromRGB width followed by the three downsampling stages.
    pub disc_channels: Vec<usize>,
    /// Channels of the content code.
    pub content_channels: usize,
    /// Width of the first content/style encoder stage.
    pub translator_channels: usize,
    pub style_dim: usize,
    /// Seed of the fixed per-layer synthesis noise.
    pub noise_seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            w_dim: 64,
            mapping_layers: 3,
            mapping_lr_mul: 1.0,
            gen_channels: vec![64, 48, 32, 16],
            disc_channels: vec![16, 32, 64, 64],
            content_channels: 32,
            translator_channels: 16,
            style_dim: 8,
            noise_seed: 1234,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub iterations: u64,
    pub f_steps_per_iter: usize,
    /// Identity-reconstruction steps on source samples that fit the
    /// translator before adaptation starts. Without them the first generator
    /// updates follow the gradient of a random translator.
    pub f_warmup_steps: usize,
    pub batch_size: usize,
    pub lr_d: f64,
    pub lr_g: f64,
    pub lr_f: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub loss: LossConfig,
    pub k_shot: usize,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Naive fine-tuning: no translator, no reconstruction loss.
    pub baseline_mode: bool,
    /// Reuse the generator-phase latent batch in the translator phase.
    pub share_z: bool,
    /// Keep the target generator's mapping network at its source values.
    pub freeze_mapping: bool,
    /// Weight of the real-image gradient penalty on the discriminator; 0 disables it.
    pub r1_gamma: f64,
    pub resolution: usize,
    pub z_dim: usize,
    /// Generated samples per evaluation.
    pub eval_samples: usize,
    /// Constant of the balance index.
    pub balance_constant: f64,
    pub arch: ArchConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            f_steps_per_iter: 4,
            f_warmup_steps: 0,
            batch_size: 4,
            lr_d: 2e-3,
            lr_g: 2e-3,
            lr_f: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            loss: LossConfig::default(),
            k_shot: 10,
            seed: 0,
            checkpoint_interval: 500,
            baseline_mode: false,
            share_z: false,
            freeze_mapping: true,
            r1_gamma: 1.0,
            resolution: 64,
            z_dim: 128,
            eval_samples: 1000,
            balance_constant: 1000.0,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !matches!(self.resolution, 8 | 16 | 32 | 64) {
            return Err(PirError::config(format!(
                "resolution must be one of 8, 16, 32, 64 (got {})",
                self.resolution
            )));
        }
        if self.z_dim == 0 {
            return Err(PirError::config("z_dim must be positive"));
        }
        if self.batch_size == 0 {
            return Err(PirError::config("batch_size must be positive"));
        }
        if self.k_shot == 0 {
            return Err(PirError::config("k_shot must be positive"));
        }
        if self.f_steps_per_iter == 0 && !self.baseline_mode {
            return Err(PirError::config(
                "f_steps_per_iter must be >= 1 unless baseline_mode is set",
            ));
        }
        for (name, lr) in [("lr_d", self.lr_d), ("lr_g", self.lr_g), ("lr_f", self.lr_f)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(PirError::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(PirError::config("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.r1_gamma >= 0.0 && self.r1_gamma.is_finite()) {
            return Err(PirError::config("r1_gamma must be a finite non-negative number"));
        }
        if !(self.balance_constant.is_finite() && self.balance_constant > 0.0) {
            return Err(PirError::config("balance_constant must be positive and finite"));
        }
        let a = &self.arch;
        if a.gen_channels.len() != 4 {
            return Err(PirError::config("arch.gen_channels needs 4 entries"));
        }
        if a.disc_channels.len() != 4 {
            return Err(PirError::config("arch.disc_channels needs 4 entries"));
        }
        if a.mapping_layers < 1 || a.w_dim == 0 || a.style_dim == 0 {
            return Err(PirError::config("mapping_layers, w_dim and style_dim must be positive"));
        }
        if a.content_channels < 4 || a.translator_channels < 2 {
            return Err(PirError::config("translator widths too small"));
        }
        if [&a.gen_channels, &a.disc_channels]
            .iter()
            .any(|c| c.contains(&0))
        {
            return Err(PirError::config("channel counts must be positive"));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Small widths at 32 px: the desk-scale setting the test suite trains with.
    pub fn toy() -> Self {
        Self {
            resolution: 32,
            f_warmup_steps: 300,
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = TrainingConfig::toy();
        cfg.loss.recon_metric = ReconMetric::CodeL1;
        cfg.loss.recon_direction = ReconDirection::TargetOnly;
        let s = cfg.to_toml_string().unwrap();
        assert!(s.contains("f_steps_per_iter = 4"));
        assert!(s.contains("recon_direction = \"target_only\""));
        assert_eq!(TrainingConfig::from_toml_str(&s).unwrap(), cfg);
    }

    #[test]
    fn enum_names_parse() {
        assert_eq!("code_l1".parse::<ReconMetric>().unwrap(), ReconMetric::CodeL1);
        assert_eq!("source_only".parse::<ReconDirection>().unwrap(), ReconDirection::SourceOnly);
        assert!(matches!("sideways".parse::<ReconDirection>(), Err(PirError::InvalidConfig(_))));
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = TrainingConfig::from_toml_str("iterations = 7\n[loss]\nlambda1 = 0.5\n").unwrap();
        assert_eq!(cfg.iterations, 7);
        assert_eq!(cfg.loss.lambda1, 0.5);
        assert_eq!(cfg.loss.lambda2, 1.0);
        assert_eq!(cfg.f_steps_per_iter, 4);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainingConfig::from_toml_str("unknown_key = 1").is_err());
        assert!(TrainingConfig::from_toml_str("f_steps_per_iter = 0").is_err());
        assert!(TrainingConfig::from_toml_str("f_steps_per_iter = 0\nbaseline_mode = true").is_ok());
        assert!(TrainingConfig::from_toml_str("[loss]\npatch_weight = 1.5").is_err());
        assert!(TrainingConfig::from_toml_str("resolution = 48").is_err());
    }
}
