//! JSON run configuration: model, frequency cutoff, training and paths.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{McmsError, Result};
use crate::freq::DEFAULT_TAU;
use crate::net::ModelConfig;
use crate::train_eval::TrainConfig;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreqConfig {
    pub tau: f64,
}

impl Default for FreqConfig {
    fn default() -> Self {
        FreqConfig { tau: DEFAULT_TAU }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directory holding `manifest.json`.
    pub data: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Every setting of a run. Missing keys take defaults; unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub freq: FreqConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

fn prefixed(section: &str, e: McmsError) -> McmsError {
    match e {
        McmsError::Config { key, reason } => McmsError::Config {
            key: format!("{section}.{key}"),
            reason,
        },
        other => other,
    }
}

impl RunConfig {
    /// Model settings with the frequency cutoff filled in.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            freq_tau: self.freq.tau,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.freq.tau) {
            return Err(McmsError::Config {
                key: "freq.tau".into(),
                reason: format!("{} outside [0, 2]", self.freq.tau),
            });
        }
        self.model_config().validate().map_err(|e| prefixed("model", e))?;
        self.train.validate().map_err(|e| prefixed("train", e))
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|source| McmsError::Json {
            path: origin.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Write `resolved_config.json` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| McmsError::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_json()).map_err(|e| McmsError::io(&path, e))?;
        Ok(path)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| McmsError::io(path, e))?;
    RunConfig::from_json(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RunConfig> {
        RunConfig::from_json(s, Path::new("test.json"))
    }

    #[test]
    fn empty_object_gives_defaults() {
        let c = parse("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.base_width, 32);
        assert_eq!(c.freq.tau, 0.1);
        assert_eq!(c.train.lr, 0.0001);
        assert_eq!(c.train.batch, 8);
    }

    #[test]
    fn validation_names_the_key() {
        match parse(r#"{"model":{"base_width":12}}"#) {
            Err(e @ McmsError::Config { .. }) => assert!(e.to_string().contains("base_width"), "{e}"),
            other => panic!("{other:?}"),
        }
        match parse(r#"{"train":{"crop":40}}"#) {
            Err(McmsError::Config { key, .. }) => assert_eq!(key, "train.crop"),
            other => panic!("{other:?}"),
        }
        assert!(parse(r#"{"freq":{"tau":3.0}}"#).is_err());
        let unknown = parse(r#"{"model":{"width":8}}"#).unwrap_err();
        assert!(unknown.to_string().contains("width"));
        assert!(parse("{not json").is_err());
    }

    #[test]
    fn resolved_round_trip() {
        let c = parse(r#"{"model":{"base_width":8,"stage3_blocks":4},"freq":{"tau":0.2},"train":{"steps":5}}"#).unwrap();
        assert_eq!(c.model_config().freq_tau, 0.2);
        let dir = tempfile::tempdir().unwrap();
        let p = c.write_resolved(dir.path()).unwrap();
        assert_eq!(load_config(&p).unwrap(), c);
    }
}
