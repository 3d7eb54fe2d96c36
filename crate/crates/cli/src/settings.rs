//! Run configuration: a TOML file with `[model]`, `[train]` and `[data]`
//! tables, plus command-line overrides.

use std::path::{Path, PathBuf};

use mwdcnn::data::NoiseMode;
use mwdcnn::training::{LossKind, LrSchedule, TrainPlan};
use mwdcnn::{ModelConfig, Precision};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    /// Directory of clean training images (PNG/PGM/PPM).
    pub train_dir: Option<PathBuf>,
    pub patches_per_image: usize,
    pub patch_size: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self { train_dir: None, patches_per_image: 40, patch_size: 48 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainPlan,
    pub data: DataSettings,
}

/// Values given on the command line; each one replaces the file's value.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// TOML run configuration
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for weights, patch sampling and noise
    #[arg(long)]
    pub seed: Option<u64>,
    /// Noise level on the 0..255 scale
    #[arg(long, conflicts_with = "blind")]
    pub sigma: Option<f64>,
    /// Draw sigma uniformly from [0, 55] per patch
    #[arg(long)]
    pub blind: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Constant learning rate instead of the configured schedule
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// 1 (gray) or 3 (color)
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long, value_parser = ["mse", "charbonnier"])]
    pub loss: Option<String>,
    #[arg(long, value_parser = ["32", "64"])]
    pub precision: Option<String>,
    /// Training image directory
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub patches_per_image: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Stop after this many iterations
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn resolve(o: &Overrides) -> Result<Self, String> {
        let mut c = match &o.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        c.apply(o)?;
        c.model.validate().map_err(|e| e.to_string())?;
        c.train.validate().map_err(|e| e.to_string())?;
        if c.data.patch_size == 0 || c.data.patch_size % 2 != 0 {
            return Err(format!("patch_size must be even and positive, got {}", c.data.patch_size));
        }
        if c.data.patches_per_image == 0 {
            return Err("patches_per_image must be at least 1".into());
        }
        Ok(c)
    }

    fn apply(&mut self, o: &Overrides) -> Result<(), String> {
        if let Some(s) = o.seed {
            self.model.seed = s;
            self.train.seed = s;
        }
        if let Some(s) = o.sigma {
            self.train.noise = NoiseMode::Fixed(s);
        }
        if o.blind {
            self.train.noise = NoiseMode::BLIND;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
            if self.train.schedule.last_epoch() < e && o.lr.is_none() {
                // stretch the final stage so shorter or longer runs keep the last rate
                if let Some(last) = self.train.schedule.stages.last_mut() {
                    last.0 = e;
                }
            }
        }
        if let Some(lr) = o.lr {
            self.train.schedule = LrSchedule::constant(lr, self.train.epochs);
        }
        if let Some(b) = o.batch {
            self.train.batch_size = b;
        }
        if let Some(c) = o.base_channels {
            self.model.base_channels = c;
        }
        if let Some(c) = o.channels {
            self.model.in_channels = c;
        }
        if let Some(l) = &o.loss {
            self.train.loss = l.parse::<LossKind>()?;
        }
        if let Some(p) = &o.precision {
            self.model.precision = p.parse::<Precision>().map_err(|e| e.to_string())?;
        }
        if let Some(d) = &o.data {
            self.data.train_dir = Some(d.clone());
        }
        if let Some(n) = o.patches_per_image {
            self.data.patches_per_image = n;
        }
        if let Some(n) = o.patch_size {
            self.data.patch_size = n;
        }
        if o.max_iterations.is_some() {
            self.train.max_iterations = o.max_iterations;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig { model: ModelConfig::toy(8), ..RunConfig::default() };
        c.train.noise = NoiseMode::BLIND;
        c.data.train_dir = Some("imgs".into());
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn file_values_and_overrides() {
        let mut c = RunConfig::from_toml(
            "[model]\nin_channels = 1\nbase_channels = 8\n[train]\nbatch_size = 4\nepochs = 2\nnoise = { fixed = 15.0 }\n",
        )
        .unwrap();
        assert_eq!(c.train.noise, NoiseMode::Fixed(15.0));
        let o = Overrides {
            sigma: Some(25.0),
            epochs: Some(120),
            seed: Some(7),
            loss: Some("charbonnier".into()),
            ..Overrides::default()
        };
        c.apply(&o).unwrap();
        assert_eq!((c.model.seed, c.train.seed, c.train.epochs), (7, 7, 120));
        assert_eq!(c.train.schedule.last_epoch(), 120);
        assert_eq!(c.train.loss, LossKind::Charbonnier);
        assert_eq!(c.train.noise, NoiseMode::Fixed(25.0));
        c.train.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[model]\nwidth = 3\n").is_err());
    }
}
