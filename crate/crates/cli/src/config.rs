//! Run configuration: defaults, then an optional TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use capgan::decoding::DecodeConfig;
use capgan::pipeline::ModelSizes;
use capgan::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Everything a command needs to reproduce its outputs.
///
/// The root `seed` is copied into `train.seed` and `decode.seed` after
/// merging, so a single value drives every random stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub model: ModelSizes,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory written by `prepare-data`.
    pub data_dir: Option<PathBuf>,
    /// Directory holding checkpoints and logs of one experiment.
    pub run_dir: Option<PathBuf>,
    /// Generator checkpoint for `pretrain-d` and `generate`.
    pub generator: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_owned(),
            reason: e.message().to_owned(),
        })
    }

    /// Propagates the root seed and validates every section.
    pub fn finish(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.decode.seed = self.seed;
        self.train.validate()?;
        self.decode.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises to TOML")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| CliError::io(path, e))
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.paths
            .data_dir
            .as_deref()
            .ok_or_else(|| CliError::Usage("no data directory: pass --data or set paths.data_dir".into()))
    }

    pub fn run_dir(&self) -> Result<&Path> {
        self.paths
            .run_dir
            .as_deref()
            .ok_or_else(|| CliError::Usage("no run directory: pass --run-dir or set paths.run_dir".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut c = RunConfig {
            seed: 9,
            ..RunConfig::default()
        };
        c.train.adversarial_learning_rate = Some(1e-4);
        c.paths.data_dir = Some("data".into());
        let c = c.finish().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.seed, 9);
    }

    #[test]
    fn partial_files_fill_from_defaults() {
        let c: RunConfig = toml::from_str("seed = 3\n[train]\nmle_epochs = 2\n").unwrap();
        assert_eq!(c.train.mle_epochs, 2);
        assert_eq!(c.train.d_pretrain_epochs, TrainConfig::default().d_pretrain_epochs);
        assert_eq!(c.decode, DecodeConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("seeed = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nepochs = 1\n").is_err());
    }

    #[test]
    fn stage_epoch_defaults() {
        let t = RunConfig::default().train;
        assert_eq!((t.mle_epochs, t.d_pretrain_epochs, t.se_pretrain_epochs, t.adversarial_epochs), (25, 5, 25, 30));
        assert_eq!(RunConfig::default().decode.n_captions, 5);
    }
}
