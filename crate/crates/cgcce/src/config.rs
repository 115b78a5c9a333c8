//! Model configuration and its validation rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pyramid strides are fixed: a 4-stage encoder at 1/4 .. 1/32 resolution.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Full model configuration. Serializes as a flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channel width per encoder stage.
    pub stage_channels: [usize; 4],
    /// Transformer block count per encoder stage.
    pub stage_depths: [usize; 4],
    /// Attention heads per stage.
    pub attn_heads: [usize; 4],
    /// Key/value spatial reduction ratio per stage.
    pub sra_reduction: [usize; 4],
    /// Kernel sizes of the multi-convolution enhancement branch.
    pub scem_kernels: Vec<usize>,
    pub enable_gccm: bool,
    pub enable_cgrr: bool,
    pub enable_scem: bool,
    pub enable_cfd: bool,
    /// Input tile side length; must divide by 32.
    pub tile_size: usize,
    /// Probability threshold for binarizing predictions.
    pub threshold: f64,
}

impl ModelConfig {
    /// Small widths for CPU-scale tests and experiments.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            stage_channels: [16, 32, 64, 128],
            stage_depths: [1, 1, 1, 1],
            attn_heads: [1, 2, 4, 8],
            sra_reduction: [8, 4, 2, 1],
            scem_kernels: vec![3, 5, 7],
            enable_gccm: true,
            enable_cgrr: true,
            enable_scem: true,
            enable_cfd: true,
            tile_size: 256,
            threshold: 0.5,
        }
    }

    /// Production-scale widths mirroring common pyramid-transformer settings.
    pub fn full() -> ModelConfig {
        ModelConfig {
            stage_channels: [64, 128, 320, 512],
            stage_depths: [3, 4, 18, 3],
            attn_heads: [1, 2, 5, 8],
            sra_reduction: [8, 4, 2, 1],
            scem_kernels: vec![3, 5, 7],
            enable_gccm: true,
            enable_cgrr: true,
            enable_scem: true,
            enable_cfd: true,
            tile_size: 256,
            threshold: 0.5,
        }
    }

    pub fn with_tile(mut self, tile: usize) -> ModelConfig {
        self.tile_size = tile;
        self
    }

    /// Check every structural invariant; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        for (j, (&c, &h)) in self.stage_channels.iter().zip(&self.attn_heads).enumerate() {
            if c == 0 {
                return Err(Error::Config(format!("stage_channels[{j}] must be positive")));
            }
            if h == 0 {
                return Err(Error::Config(format!("attn_heads[{j}] must be positive")));
            }
            if c % h != 0 {
                return Err(Error::Config(format!(
                    "stage_channels[{j}] not divisible by attn_heads[{j}]"
                )));
            }
        }
        for (j, &d) in self.stage_depths.iter().enumerate() {
            if d == 0 {
                return Err(Error::Config(format!("stage_depths[{j}] must be positive")));
            }
        }
        for (j, &r) in self.sra_reduction.iter().enumerate() {
            if r == 0 {
                return Err(Error::Config(format!("sra_reduction[{j}] must be positive")));
            }
        }
        if self.scem_kernels.is_empty() {
            return Err(Error::Config("scem_kernels must be non-empty".into()));
        }
        for &k in &self.scem_kernels {
            if k % 2 == 0 {
                return Err(Error::Config(format!("scem_kernels contains even kernel {k}")));
            }
        }
        if self.tile_size == 0 || self.tile_size % 32 != 0 {
            return Err(Error::Config(format!(
                "tile_size {} not divisible by 32",
                self.tile_size
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold {} outside (0,1)",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<ModelConfig> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("bad config JSON: {e}")))
    }
}

/// Validate and pass through a configuration.
pub fn validate_config(cfg: ModelConfig) -> Result<ModelConfig> {
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_default_accepted() {
        assert!(validate_config(ModelConfig::toy()).is_ok());
        assert!(validate_config(ModelConfig::full()).is_ok());
    }

    #[test]
    fn indivisible_channels_rejected_with_field_name() {
        let mut cfg = ModelConfig::toy();
        cfg.stage_channels = [16, 32, 64, 130];
        let err = validate_config(cfg).unwrap_err().to_string();
        assert!(
            err.contains("stage_channels[3] not divisible by attn_heads[3]"),
            "unexpected message: {err}"
        );
    }

    #[test]
    fn even_kernel_rejected_by_name() {
        let mut cfg = ModelConfig::toy();
        cfg.scem_kernels = vec![3, 4];
        let err = validate_config(cfg).unwrap_err().to_string();
        assert!(err.contains("even kernel 4"), "unexpected message: {err}");
    }

    #[test]
    fn bad_tile_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.tile_size = 100;
        assert!(validate_config(cfg).is_err());
    }

    #[test]
    fn json_round_trip_structurally_equal() {
        let cfg = ModelConfig::toy();
        let parsed = ModelConfig::from_json(&cfg.to_json()).unwrap();
        let validated = validate_config(parsed).unwrap();
        assert_eq!(cfg, validated);
    }

    #[test]
    fn json_is_flat_with_exact_field_names() {
        let v: serde_json::Value = serde_json::from_str(&ModelConfig::toy().to_json()).unwrap();
        let obj = v.as_object().unwrap();
        for key in [
            "stage_channels",
            "stage_depths",
            "attn_heads",
            "sra_reduction",
            "scem_kernels",
            "enable_gccm",
            "enable_cgrr",
            "enable_scem",
            "enable_cfd",
            "tile_size",
            "threshold",
        ] {
            assert!(obj.contains_key(key), "missing field {key}");
        }
        assert_eq!(obj.len(), 11);
    }
}
