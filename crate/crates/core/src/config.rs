//! Run configuration and its textual (TOML) form.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Every knob of a training run. The file form is a flat TOML table whose keys
/// are these field names; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Index of the last patch-VAE scale (`M`). Scales `0..=M` are VAE scales.
    pub vae_scales: usize,
    /// Index of the finest scale (`N`).
    pub finest_scale: usize,
    /// Temporal sampling strides (`Omega`).
    pub strides: Vec<usize>,
    pub beta_vae: f64,
    pub beta_adv: f64,
    /// Gradient-penalty weight (`lambda`).
    pub gp_weight: f64,
    /// Width of every hidden convolution block.
    pub channels: usize,
    pub latent_dim: usize,
    pub blocks: usize,
    pub kernel: usize,
    /// Kernel extent of the encoder; `Some(1)` gives the receptive-field-1 ablation.
    pub encoder_kernel: Option<usize>,
    /// Kernel extent of the VAE-scale generators `G^0..=G^M`.
    pub vae_generator_kernel: Option<usize>,
    pub lr: f64,
    /// Per-scale multiplier applied to the encoder and `G^0` learning rate.
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub iters_per_scale: usize,
    pub critic_steps: usize,
    /// Image mode: 2D kernels and a single frame.
    pub spatial_only: bool,
    pub seed: u64,
    pub base_height: usize,
    pub max_height: usize,
    pub scale_growth: f64,
    /// Per-voxel loss magnitude that aborts a scale.
    pub divergence_limit: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            vae_scales: 3,
            finest_scale: 9,
            strides: vec![1, 2, 3, 4],
            beta_vae: 0.1,
            beta_adv: 0.1,
            gp_weight: 10.0,
            channels: 64,
            latent_dim: 128,
            blocks: 5,
            kernel: 3,
            encoder_kernel: None,
            vae_generator_kernel: None,
            lr: 5e-4,
            lr_decay: 0.2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            iters_per_scale: 20_000,
            critic_steps: 3,
            spatial_only: false,
            seed: 0,
            base_height: 32,
            max_height: 256,
            scale_growth: 1.33,
            divergence_limit: 1e6,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vae_scales == 0 {
            return fail("vae_scales must be at least 1: scale 0 is always a VAE scale".into());
        }
        if self.vae_scales > self.finest_scale {
            return fail(format!("vae_scales ({}) must not exceed finest_scale ({})", self.vae_scales, self.finest_scale));
        }
        if self.strides.is_empty() || self.strides.contains(&0) {
            return fail(format!("strides must be non-empty positive integers, got {:?}", self.strides));
        }
        for (name, v) in [("beta_vae", self.beta_vae), ("beta_adv", self.beta_adv), ("gp_weight", self.gp_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.blocks == 0 {
            return fail("blocks must be at least 1".into());
        }
        for (name, k) in [
            ("kernel", Some(self.kernel)),
            ("encoder_kernel", self.encoder_kernel),
            ("vae_generator_kernel", self.vae_generator_kernel),
        ] {
            if let Some(k) = k {
                if k % 2 == 0 {
                    return fail(format!("{name} must be odd, got {k}"));
                }
            }
        }
        if self.channels == 0 || self.latent_dim == 0 {
            return fail("channels and latent_dim must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return fail("lr and lr_decay must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if self.base_height == 0 || self.max_height < self.base_height {
            return fail(format!("need 0 < base_height <= max_height, got {} / {}", self.base_height, self.max_height));
        }
        if !(self.scale_growth >= 1.0) {
            return fail(format!("scale_growth must be >= 1, got {}", self.scale_growth));
        }
        Ok(())
    }

    /// Frames per training slice: `LCM(strides) + 1`, or 1 in image mode.
    pub fn slice_frames(&self) -> usize {
        if self.spatial_only {
            1
        } else {
            self.strides.iter().fold(1, |acc, &s| lcm(acc, s)) + 1
        }
    }

    /// Stable short hash identifying this configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn encoder_kernel(&self) -> usize {
        self.encoder_kernel.unwrap_or(self.kernel)
    }

    /// Kernel extent of the generator at `scale`.
    pub fn generator_kernel(&self, scale: usize) -> usize {
        if scale <= self.vae_scales {
            self.vae_generator_kernel.unwrap_or(self.kernel)
        } else {
            self.kernel
        }
    }

    pub fn is_vae_scale(&self, scale: usize) -> bool {
        scale <= self.vae_scales
    }
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_slice_is_thirteen_frames() {
        assert_eq!(RunConfig::default().slice_frames(), 13);
        let image = RunConfig { spatial_only: true, ..RunConfig::default() };
        assert_eq!(image.slice_frames(), 1);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let config = RunConfig { seed: 7, channels: 8, ..RunConfig::default() };
        let back = RunConfig::from_toml_str(&config.to_toml_string()).unwrap();
        assert_eq!(config, back);
        assert!(matches!(RunConfig::from_toml_str("bogus = 1"), Err(Error::Config(_))));
        let partial = RunConfig::from_toml_str("finest_scale = 4\nvae_scales = 2").unwrap();
        assert_eq!(partial.finest_scale, 4);
        assert_eq!(partial.latent_dim, 128);
    }

    #[test]
    fn validation() {
        let bad = |c: RunConfig| c.validate().is_err();
        assert!(bad(RunConfig { vae_scales: 0, ..Default::default() }));
        assert!(bad(RunConfig { vae_scales: 10, ..Default::default() }));
        assert!(bad(RunConfig { strides: vec![], ..Default::default() }));
        assert!(bad(RunConfig { kernel: 4, ..Default::default() }));
        assert!(bad(RunConfig { beta_vae: -1.0, ..Default::default() }));
        assert!(!bad(RunConfig { vae_scales: 9, ..Default::default() }));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..Default::default() };
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
