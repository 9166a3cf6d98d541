//! Top-level TOML configuration shared by the command-line tools.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Preprocessor;
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_FPR_LIMIT;
use crate::inference::{kernel_for_size, InferenceConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub category: String,
    pub resize: u32,
    pub crop: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = Preprocessor::default();
        Self {
            root: PathBuf::from("data"),
            category: String::from("toy"),
            resize: p.resize,
            crop: p.crop,
        }
    }
}

impl DataConfig {
    pub fn preprocessor(&self) -> Result<Preprocessor> {
        Preprocessor::new(self.resize, self.crop)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fpr_limit: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fpr_limit: DEFAULT_FPR_LIMIT,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

impl AppConfig {
    /// 32x32 images, small network, mean filter scaled to the resolution.
    pub fn desk() -> Self {
        let train = TrainConfig::desk();
        let size = train.image_size;
        Self {
            data: DataConfig {
                resize: size as u32,
                crop: size as u32,
                ..DataConfig::default()
            },
            inference: InferenceConfig {
                kernel: kernel_for_size(size),
                ..InferenceConfig::default()
            },
            train,
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.preprocessor()?;
        if self.data.crop as usize != self.train.image_size {
            return Err(Error::Config(format!(
                "data.crop ({}) must equal train.image_size ({})",
                self.data.crop, self.train.image_size
            )));
        }
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for cfg in [AppConfig::default(), AppConfig::desk()] {
            cfg.validate().unwrap();
            assert_eq!(AppConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = AppConfig::from_toml("[train]\nepochs = 10\nlr_drop_epoch = 5\n[inference]\nlambda = 0.5\n").unwrap();
        assert_eq!(cfg.train.epochs, 10);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.inference.lambda, 0.5);
        assert_eq!(cfg.data.crop, 224);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(AppConfig::from_toml("[train]\nepochz = 3\n").is_err());
    }
}
