//! Run configuration file (TOML). Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::decoder::ModelConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `images/` and `masks/`.
    pub root: PathBuf,
    /// Directory for checkpoints and the training log.
    pub out_dir: PathBuf,
    #[serde(default)]
    pub allow_any_size: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.model.decoder.validate()?;
        self.train.validate()?;
        self.augment.validate()
    }

    /// Parses and validates the file and checks that the data root exists
    /// and the output directory's parent exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !cfg.data.root.is_dir() {
            return Err(Error::Config(format!(
                "data.root {} is not a directory",
                cfg.data.root.display()
            )));
        }
        let parent = cfg.data.out_dir.parent().filter(|p| !p.as_os_str().is_empty());
        if parent.is_some_and(|p| !p.is_dir()) {
            return Err(Error::Config(format!(
                "parent of data.out_dir {} does not exist",
                cfg.data.out_dir.display()
            )));
        }
        Ok(cfg)
    }
}

/// Model section alone, as accepted by `infer --config`.
pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    #[derive(Deserialize)]
    struct Partial {
        #[serde(default)]
        model: ModelConfig,
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    // full validation first so typos elsewhere in the file are not ignored
    if let Ok(full) = RunConfig::from_toml(&text) {
        return Ok(full.model);
    }
    let p: Partial = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    p.model.encoder.validate()?;
    p.model.decoder.validate()?;
    Ok(p.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
[train]
epochs = 3
batch_size = 4
seed = 11

[model.encoder]
sr_ratios = [8, 4, 2, 1]

[model.decoder]
upsample = "transposed"

[data]
root = "data"
out_dir = "runs/a"
"#;

    #[test]
    fn parse_serialize_parse_is_fixed_point() {
        let a = RunConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(a.train.epochs, 3);
        assert_eq!(a.train.lr, 1e-4);
        let text = a.to_toml().unwrap();
        let b = RunConfig::from_toml(&text).unwrap();
        assert_eq!(a, b);
        assert_eq!(text, b.to_toml().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = SAMPLE.replace("epochs = 3", "epoch = 3");
        let err = RunConfig::from_toml(&bad).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("epoch"), "{err}");
        let bad = format!("{SAMPLE}\n[extra]\nx = 1\n");
        assert!(RunConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let bad = SAMPLE.replace("batch_size = 4", "batch_size = 0");
        assert_eq!(RunConfig::from_toml(&bad).unwrap_err().exit_code(), 2);
        let bad = SAMPLE.replace("sr_ratios = [8, 4, 2, 1]", "heads = [1, 2, 3, 8]");
        assert!(RunConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn load_checks_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, SAMPLE.replace("\"data\"", "\"/definitely/missing\"")).unwrap();
        assert!(RunConfig::load(&p).unwrap_err().to_string().contains("data.root"));
    }
}
