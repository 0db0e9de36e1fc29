//! Flat `key = value` run configuration (TOML syntax).
//!
//! Training keys mirror [`TrainConfig`] field names exactly; the remaining
//! keys describe the student group, the dataset and the optional teacher.
//! Unknown keys are rejected by name.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{GroupMode, StudentGroupConfig};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    Cnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Synthetic Gaussian mixture.
    Gaussian,
    /// IDX image/label file pairs.
    Idx,
    /// CIFAR-10 binary record files.
    Cifar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,

    // group
    pub m: usize,
    pub group_mode: GroupMode,
    pub architecture: Architecture,
    pub hidden: usize,
    pub feature_dim: usize,
    pub proj_dim: Option<usize>,

    // data
    pub dataset: DatasetKind,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub class_separation: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// Overrides the per-dataset default (on for images, off for vectors).
    pub augment: Option<bool>,

    // teacher (okddip_plus_kd, kd_only)
    pub teacher_hidden: usize,
    pub teacher_epochs: usize,
}

/// Keys whose default is "absent", so they do not appear when serializing.
const OPTIONAL_KEYS: [&str; 8] = [
    "proj_dim",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "train_path",
    "test_path",
    "augment",
];

impl Default for RunConfig {
    /// The desk-scale setup: 10-class Gaussian mixture, 5000/1000 split,
    /// 32 inputs, four MLP students, 100 epochs.
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            m: 4,
            group_mode: GroupMode::BranchBased,
            architecture: Architecture::Mlp,
            hidden: 64,
            feature_dim: 64,
            proj_dim: None,
            dataset: DatasetKind::Gaussian,
            num_classes: 10,
            train_per_class: 500,
            test_per_class: 100,
            input_dim: 32,
            class_separation: 4.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_path: None,
            test_path: None,
            augment: None,
            teacher_hidden: 256,
            teacher_epochs: 100,
        }
    }
}

impl RunConfig {
    pub fn known_keys() -> BTreeSet<String> {
        let table = toml::Table::try_from(RunConfig::default()).expect("default config serializes");
        table
            .keys()
            .cloned()
            .chain(OPTIONAL_KEYS.iter().map(|k| k.to_string()))
            .collect()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let known = Self::known_keys();
        let unknown: Vec<String> = table.keys().filter(|k| !known.contains(*k)).cloned().collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The effective configuration as a config file.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.m < 2 {
            return Err(Error::Config(format!("m must be at least 2, got {}", self.m)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.dataset == DatasetKind::Gaussian && (self.train_per_class == 0 || self.test_per_class == 0) {
            return Err(Error::Config("train_per_class and test_per_class must be positive".into()));
        }
        Ok(())
    }

    /// Student group for the given input geometry.
    pub fn group_config(&self, input: crate::models::InputShape, num_classes: usize, seed: u64) -> StudentGroupConfig {
        use crate::models::InputShape;
        let mut cfg = match (self.architecture, input) {
            (Architecture::Cnn, InputShape::Image { channels, height, width }) => {
                StudentGroupConfig::cnn(self.m, channels, height, width, num_classes, seed)
            }
            _ => StudentGroupConfig::mlp_with(self.m, input.numel(), self.hidden, self.feature_dim, num_classes, seed),
        };
        cfg.mode = self.group_mode;
        cfg.proj_dim = self.proj_dim;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Method;

    #[test]
    fn defaults_roundtrip_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert!(text.contains("T = 3.0"));
        assert!(text.contains("lr_drop_epochs = [50, 75]"));
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let cfg = RunConfig::from_toml_str(
            "epochs = 7\nT = 4.0\nmethod = \"ablation:mean\"\nm = 5\ngroup_mode = \"network_based\"\nproj_dim = 8\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.temperature, 4.0);
        assert_eq!(cfg.train.method, "ablation:mean".parse::<Method>().unwrap());
        assert_eq!(cfg.m, 5);
        assert_eq!(cfg.group_mode, GroupMode::NetworkBased);
        assert_eq!(cfg.proj_dim, Some(8));
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_are_listed_by_name() {
        let err = RunConfig::from_toml_str("epochs = 3\nlearning_rate = 0.1\ntemperature = 2\n").unwrap_err();
        match &err {
            Error::UnknownKeys(keys) => assert_eq!(keys, &["learning_rate", "temperature"]),
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "lr0 = -1.0",
            "momentum = 1.0",
            "lr_drop_epochs = [10, 5]",
            "method = \"nope\"",
            "m = 1",
            "epochs = \"ten\"",
            "epochs = ",
        ] {
            assert!(RunConfig::from_toml_str(text).is_err(), "{text}");
        }
    }

    #[test]
    fn every_train_field_is_a_key() {
        let keys = RunConfig::known_keys();
        for k in [
            "epochs", "batch_size", "lr0", "momentum", "weight_decay", "lr_drop_epochs",
            "lr_drop_factor", "T", "rampup_epochs", "seed", "method", "detach_targets",
            "aggregate_logits",
        ] {
            assert!(keys.contains(k), "{k}");
        }
    }
}
