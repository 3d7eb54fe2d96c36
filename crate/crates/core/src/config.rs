//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("in_channels must be 1 (gray) or 3 (color), got {0}")]
    InChannels(usize),
    #[error("base_channels must be >= 4 and divisible by 4, got {0}")]
    BaseChannels(usize),
    #[error("kernel_size must be odd, got {0}")]
    KernelSize(usize),
    #[error("{field} must be positive")]
    NotPositive { field: &'static str },
    #[error("precision must be 32 or 64, got {0}")]
    Precision(u32),
    #[error("config parse error: {0}")]
    Parse(String),
}

/// Element width of the numeric graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl TryFrom<u32> for Precision {
    type Error = ConfigError;

    fn try_from(bits: u32) -> Result<Self, ConfigError> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(ConfigError::Precision(other)),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        s.parse::<u32>().map_err(|_| ConfigError::Parse(format!("precision {s:?}")))?.try_into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub dyn_kernels: usize,
    /// Growth rate of every dense block; defaults to `base_channels`.
    pub fe_growth: Option<usize>,
    /// Softmax temperature of the attention weights.
    pub temperature: f64,
    /// Add the dynamic-convolution input back onto its output.
    pub additive_fusion: bool,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 64,
            kernel_size: 5,
            dyn_kernels: 4,
            fe_growth: None,
            temperature: 1.0,
            additive_fusion: false,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The full-size color network.
    pub fn paper_color() -> Self {
        Self::default()
    }

    pub fn paper_gray() -> Self {
        Self { in_channels: 1, ..Self::default() }
    }

    /// A small gray network for tests and quick experiments.
    pub fn toy(base_channels: usize) -> Self {
        Self { in_channels: 1, base_channels, ..Self::default() }
    }

    pub fn growth(&self) -> usize {
        self.fe_growth.unwrap_or(self.base_channels)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !matches!(self.in_channels, 1 | 3) {
            return Err(ConfigError::InChannels(self.in_channels));
        }
        if self.base_channels < 4 || !self.base_channels.is_multiple_of(4) {
            return Err(ConfigError::BaseChannels(self.base_channels));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(ConfigError::KernelSize(self.kernel_size));
        }
        if self.dyn_kernels == 0 {
            return Err(ConfigError::NotPositive { field: "dyn_kernels" });
        }
        if self.growth() == 0 {
            return Err(ConfigError::NotPositive { field: "fe_growth" });
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(ConfigError::NotPositive { field: "temperature" });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_full_size_network() {
        let c = ModelConfig::default();
        assert_eq!((c.base_channels, c.kernel_size, c.dyn_kernels, c.growth()), (64, 5, 4, 64));
        c.validate().unwrap();
    }

    #[test]
    fn invalid_fields_are_rejected() {
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            c.validate().unwrap_err()
        };
        assert_eq!(bad(|c| c.in_channels = 2), ConfigError::InChannels(2));
        assert_eq!(bad(|c| c.base_channels = 6), ConfigError::BaseChannels(6));
        assert_eq!(bad(|c| c.kernel_size = 4), ConfigError::KernelSize(4));
        assert!(matches!(bad(|c| c.temperature = 0.0), ConfigError::NotPositive { .. }));
    }

    #[test]
    fn precision_serializes_as_bits() {
        let c = ModelConfig { precision: Precision::F64, ..ModelConfig::toy(8) };
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"precision\":64"), "{s}");
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"precision":16}"#).is_err());
    }
}
