//! Run configuration and provenance stamping.
//!
//! A config is one TOML file; every key can be overridden from the command
//! line with a flag of the same name (`normal_limit` -> `--normal-limit`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::train::TrainConfig;
use crate::{fsutil, Backbone, DatasetName, Error, Result, TOOL_VERSION};

/// Environment variable selecting the compute device.
pub const DEVICE_ENV: &str = "CXR_DEVICE";

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub out: PathBuf,
    pub device: String,
    pub covid_repo: Option<PathBuf>,
    pub chestxray8: Option<PathBuf>,
    pub kaggle_pneumonia: Option<PathBuf>,
    /// Keep only the first N normal images (by id) after dedup.
    pub normal_limit: Option<usize>,
    pub datasets: Vec<DatasetName>,
    pub backbones: Vec<Backbone>,
    pub folds: Vec<u8>,
    pub pretrained: bool,
    pub weights_dir: PathBuf,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: DEFAULT_SEED,
            out: PathBuf::from("out"),
            device: "cpu".to_string(),
            covid_repo: None,
            chestxray8: None,
            kaggle_pneumonia: None,
            normal_limit: None,
            datasets: DatasetName::ALL.to_vec(),
            backbones: Backbone::BENCHMARK.to_vec(),
            folds: vec![1, 2, 3, 4, 5],
            pretrained: true,
            weights_dir: PathBuf::from("weights"),
            train: TrainConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str, origin: &str) -> Result<Config> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            reason: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = fsutil::read_to_string(path)?;
        Config::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the device environment variable if the config left the default.
    pub fn apply_env(&mut self) {
        if let Ok(dev) = std::env::var(DEVICE_ENV) {
            if !dev.is_empty() {
                self.device = dev;
            }
        }
    }

    pub fn check_device(&self) -> Result<()> {
        match self.device.as_str() {
            "cpu" => Ok(()),
            other => Err(Error::UnsupportedDevice(other.to_string())),
        }
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.seed, &self.digest())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out.join("manifest.tsv")
    }

    pub fn dataset_path(&self, name: DatasetName) -> PathBuf {
        self.out.join(format!("{name}.tsv"))
    }

    pub fn fold_path(&self, name: DatasetName) -> PathBuf {
        self.out.join(format!("{name}.folds"))
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out.join("runs")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.out.join("checkpoints")
    }

    pub fn tables_dir(&self) -> PathBuf {
        self.out.join("tables")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }
}

/// Stamp embedded into every emitted artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub seed: u64,
    pub config_digest: String,
}

impl Provenance {
    pub fn new(seed: u64, config_digest: &str) -> Provenance {
        Provenance {
            tool: TOOL_VERSION.to_string(),
            seed,
            config_digest: config_digest.to_string(),
        }
    }

    /// `#`-prefixed header lines for text artifacts.
    pub fn header(&self, kind: &str) -> String {
        format!(
            "# {kind}\n# tool={}\n# run_seed={}\n# config_digest={}\n",
            self.tool, self.seed, self.config_digest
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml(), "mem").unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = Config::from_toml("seed = 7\nbackbones = [\"tiny_cnn\"]\n[train]\nepochs = 3\n", "mem").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.backbones, [Backbone::TinyCnn]);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 3);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_toml("sead = 7\n", "mem").is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = Config::default();
        let mut b = Config::default();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn device_check() {
        let mut c = Config::default();
        assert!(c.check_device().is_ok());
        c.device = "cuda:0".into();
        assert!(matches!(c.check_device(), Err(Error::UnsupportedDevice(_))));
    }
}
