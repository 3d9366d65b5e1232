//! Run configuration: a flat JSON object. Unknown keys are rejected and every
//! key has a default, so `{}` is a valid configuration.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `run_id` | `"run"` | label written into the trajectory CSV |
//! | `arch` | `"mini-vanillanet"` | `mini-vanillanet`, `mini-resnet` or `mini-cnn` |
//! | `depth` | `5` | mini-vanillanet depth, 4 to 6 |
//! | `width` | `16` | stem width (mini-vanillanet, mini-resnet) |
//! | `widths` | `[16, 32]` | per-stage widths (mini-cnn) |
//! | `blocks` | `[1, 1]` | blocks per stage (mini-resnet) |
//! | `n` | `3` | series terms; 0 keeps the plain base activation |
//! | `base` | `"relu"` | `relu`, `leakyrelu`, `leakyrelu:<slope>`, `gelu`, `silu` |
//! | `insertion` | `"downsampling_only"` | mini-resnet: `full` or `downsampling_only` |
//! | `mask` | none | mini-resnet: one flag per stride-2 block |
//! | `blended` | `false` | mini-vanillanet: blended-activation training |
//! | `dataset` | `"synthetic"` | `cifar10`, `mnist`, `folder` or `synthetic` |
//! | `data_dir` | none | dataset directory (`folder` expects `train/` and `test/`) |
//! | `train_limit`, `test_limit` | none | keep only the first samples of a split |
//! | `synthetic_classes` | `4` | synthetic: class count |
//! | `synthetic_train_per_class` | `32` | synthetic: training samples per class |
//! | `synthetic_test_per_class` | `16` | synthetic: test samples per class |
//! | `synthetic_shape` | `[3, 16, 16]` | synthetic: sample extents |
//! | `synthetic_noise` | `0.1` | synthetic: noise standard deviation |
//! | `epochs` | `10` | training epochs |
//! | `batch` | `64` | batch size |
//! | `lr`, `lr_min` | `1e-3`, `0` | peak and floor learning rate |
//! | `schedule` | `"cosine"` | `cosine` or `constant`, applied per epoch |
//! | `optimizer` | `"adam"` | `adam` or `sgd` |
//! | `beta1`, `beta2`, `adam_eps` | `0.9`, `0.999`, `1e-8` | Adam |
//! | `momentum` | `0.9` | SGD |
//! | `dropout` | `0` | dropout rate before the classifier |
//! | `seed` | `0` | master seed |
//! | `loss` | `"cross_entropy"` | `cross_entropy` or `bce_with_logits` |
//! | `patience` | none | early stopping on validation accuracy |
//! | `dtype` | `"f32"` | `f32` or `f64` |
//! | `out` | `"runs/run"` | output directory |
//! | `probes` | `100` | fusion equivalence probe count |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::Insertion;
use crate::nn::{self, BaseActivation, LossKind};
use crate::optim::{OptimizerKind, Schedule};
use crate::tensor::DType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "mini-vanillanet")]
    MiniVanillanet,
    #[serde(rename = "mini-resnet")]
    MiniResnet,
    #[serde(rename = "mini-cnn")]
    MiniCnn,
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini-vanillanet" => Ok(Arch::MiniVanillanet),
            "mini-resnet" => Ok(Arch::MiniResnet),
            "mini-cnn" => Ok(Arch::MiniCnn),
            other => Err(Error::InvalidConfig(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Mnist,
    Folder,
    Synthetic,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "mnist" => Ok(DatasetKind::Mnist),
            "folder" => Ok(DatasetKind::Folder),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::InvalidConfig(format!("unknown dataset {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub arch: Arch,
    pub depth: usize,
    pub width: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub n: usize,
    pub base: BaseActivation,
    pub insertion: Insertion,
    pub mask: Option<Vec<bool>>,
    pub blended: bool,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synthetic_classes: usize,
    pub synthetic_train_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub synthetic_shape: [usize; 3],
    pub synthetic_noise: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub momentum: f64,
    pub dropout: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub patience: Option<usize>,
    pub dtype: DType,
    pub out: PathBuf,
    pub probes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            arch: Arch::MiniVanillanet,
            depth: 5,
            width: 16,
            widths: vec![16, 32],
            blocks: vec![1, 1],
            n: 3,
            base: BaseActivation::Relu,
            insertion: Insertion::DownsamplingOnly,
            mask: None,
            blended: false,
            dataset: DatasetKind::Synthetic,
            data_dir: None,
            train_limit: None,
            test_limit: None,
            synthetic_classes: 4,
            synthetic_train_per_class: 32,
            synthetic_test_per_class: 16,
            synthetic_shape: [3, 16, 16],
            synthetic_noise: 0.1,
            epochs: 10,
            batch: 64,
            lr: 1e-3,
            lr_min: 0.0,
            schedule: Schedule::Cosine,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            momentum: 0.9,
            dropout: 0.0,
            seed: 0,
            loss: LossKind::CrossEntropy,
            patience: None,
            dtype: DType::F32,
            out: PathBuf::from("runs/run"),
            probes: 100,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileMissing(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks the invariants that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad(format!("lr_min must be in [0, lr], got {}", self.lr_min));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.patience == Some(0) {
            return bad("patience must be at least 1".into());
        }
        if self.probes == 0 {
            return bad("probes must be at least 1".into());
        }
        if self.dataset != DatasetKind::Synthetic && self.data_dir.is_none() {
            return bad(format!("dataset {:?} needs data_dir", self.dataset));
        }
        if self.dataset == DatasetKind::Synthetic && self.synthetic_classes < 2 {
            return bad("synthetic_classes must be at least 2".into());
        }
        nn::check_dropout_rate(self.dropout)
    }

    /// SHA-256 of the canonical (compact, key-sorted) JSON form.
    pub fn hash(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let canonical = serde_json::to_string(&value)?;
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"epoch": 3}"#).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(m) if m.contains("epoch")));
    }

    #[test]
    fn round_trip_and_hash() {
        let cfg =
            RunConfig::from_json(r#"{"arch": "mini-cnn", "base": "gelu", "dropout": 0.2, "dtype": "f64"}"#).unwrap();
        assert_eq!(cfg.arch, Arch::MiniCnn);
        assert_eq!(cfg.base, BaseActivation::Gelu);
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        assert_ne!(RunConfig::default().hash().unwrap(), cfg.hash().unwrap());
        assert_eq!(cfg.hash().unwrap().len(), 64);
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        for bad in [
            RunConfig {
                dropout: 1.0,
                ..RunConfig::default()
            },
            RunConfig {
                dataset: DatasetKind::Mnist,
                ..RunConfig::default()
            },
            RunConfig {
                epochs: 0,
                ..RunConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
