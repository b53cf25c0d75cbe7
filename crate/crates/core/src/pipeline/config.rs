//! Training configuration, its TOML form and content hash.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention_fusion::mlp_widths;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::NetConfig;
use crate::preprocess::{AugmentStage, AugmentationPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::InvalidConfig(format!("unknown stage `{other}`"))),
        }
    }
}

/// ECAB shape: reduction rate `r` and odd hidden-layer count `h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcabConfig {
    pub reduction: usize,
    pub hidden: usize,
}

impl Default for EcabConfig {
    fn default() -> Self {
        EcabConfig { reduction: 4, hidden: 5 }
    }
}

/// Mini-batch k-means settings shared by the three pseudo-label views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSettings {
    pub minibatch_size: usize,
    pub max_iters: usize,
    pub n_init: usize,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        ClusterSettings {
            minibatch_size: 256,
            max_iters: 100,
            n_init: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// PK batches per epoch; 0 means one sweep over the identities (`ceil(ids / P)`).
    pub iters_per_epoch: usize,
    pub base_lr: f64,
    /// Epochs at which the pre-training rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    /// Linear warmup from `base_lr / 10` over this many pre-training epochs.
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    /// Identities per batch.
    pub batch_p: usize,
    /// Images per identity in a batch.
    pub batch_k: usize,
    pub eta: f64,
    /// Pseudo-identity count for each clustering view.
    pub k_clusters: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub ecab: EcabConfig,
    pub cluster: ClusterSettings,
    pub net: NetConfig,
    pub augmentation: AugmentationPolicy,
}

impl TrainConfig {
    /// Full-scale hyperparameters. The built-in backbone is the small convolutional one.
    pub fn full(stage: Stage) -> Self {
        let finetune = stage == Stage::Finetune;
        let aug_stage = if finetune { AugmentStage::Finetune } else { AugmentStage::Pretrain };
        let mut net = NetConfig::toy();
        net.input_size = (256, 128);
        TrainConfig {
            stage,
            epochs: if finetune { 80 } else { 120 },
            iters_per_epoch: if finetune { 400 } else { 0 },
            base_lr: 3.5e-4,
            lr_milestones: if finetune { vec![] } else { vec![40, 70] },
            lr_gamma: 0.1,
            warmup_epochs: if finetune { 0 } else { 10 },
            weight_decay: 5e-4,
            batch_p: 32,
            batch_k: 4,
            eta: 0.999,
            k_clusters: 900,
            seed: 1,
            loss: LossWeights::default(),
            ecab: EcabConfig::default(),
            cluster: ClusterSettings::default(),
            net,
            augmentation: AugmentationPolicy::full(aug_stage),
        }
    }

    /// Desk-scale settings for the synthetic data: 64x32 inputs, 8x4 batches and a
    /// schedule compressed to ten pre-training epochs.
    pub fn toy(stage: Stage) -> Self {
        let finetune = stage == Stage::Finetune;
        let base = Self::full(stage);
        TrainConfig {
            epochs: if finetune { 5 } else { 10 },
            iters_per_epoch: if finetune { 50 } else { 40 },
            lr_milestones: if finetune { vec![] } else { vec![6, 8] },
            warmup_epochs: if finetune { 0 } else { 1 },
            batch_p: 8,
            batch_k: 4,
            eta: if finetune { 0.99 } else { base.eta },
            k_clusters: 15,
            seed: 7,
            cluster: ClusterSettings {
                minibatch_size: 64,
                max_iters: 100,
                n_init: 10,
            },
            net: NetConfig::toy(),
            augmentation: AugmentationPolicy::toy(base.augmentation.stage),
            ..base
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_p * self.batch_k
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_p < 2 || self.batch_k < 2 {
            return bad(format!(
                "batch {}x{} cannot form triplets; need P >= 2 and K >= 2",
                self.batch_p, self.batch_k
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr = {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return bad(format!("eta = {} outside [0, 1)", self.eta));
        }
        if !(self.weight_decay >= 0.0 && self.lr_gamma > 0.0) {
            return bad("weight_decay must be >= 0 and lr_gamma > 0".into());
        }
        if self.k_clusters == 0 {
            return bad("k_clusters must be >= 1".into());
        }
        if self.cluster.minibatch_size == 0 || self.cluster.n_init == 0 {
            return bad("cluster minibatch_size and n_init must be >= 1".into());
        }
        if self.net.input_size != self.augmentation.target_size {
            return bad(format!(
                "network input {:?} differs from augmentation target {:?}",
                self.net.input_size, self.augmentation.target_size
            ));
        }
        self.loss.validate()?;
        self.augmentation.validate()?;
        let channels = self.net.widths.last().copied().unwrap_or(0);
        mlp_widths(channels, self.ecab.reduction, self.ecab.hidden)?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 (hex) of the TOML serialization.
    pub fn hash(&self) -> String {
        let text = self.to_toml().expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Default pseudo-identity count per target dataset.
pub fn target_cluster_count(target: &str) -> Option<usize> {
    match target.to_ascii_lowercase().as_str() {
        "cuhk03" | "cuhk" | "market1501" | "market" => Some(900),
        "msmt17" | "msmt" => Some(2500),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_defaults() {
        let p = TrainConfig::full(Stage::Pretrain);
        assert_eq!((p.epochs, p.base_lr, p.lr_milestones.clone(), p.lr_gamma), (120, 3.5e-4, vec![40, 70], 0.1));
        assert_eq!((p.warmup_epochs, p.batch_p, p.batch_k, p.loss.kappa), (10, 32, 4, 1.0));
        let f = TrainConfig::full(Stage::Finetune);
        assert_eq!((f.epochs, f.iters_per_epoch, f.eta), (80, 400, 0.999));
        let w = f.loss;
        assert_eq!((w.alpha, w.beta, w.gamma, w.delta, w.margin), (1.0, 1.0, 0.5, 0.5, 0.3));
        assert_eq!((f.ecab.reduction, f.ecab.hidden), (4, 5));
        let a = &f.augmentation;
        assert_eq!((a.flip_prob, a.color_dropout_prob, a.erase_prob), (0.5, 0.4, 0.5));
        assert_eq!(f.batch_size(), 128);
        p.validate().unwrap();
        f.validate().unwrap();
        TrainConfig::toy(Stage::Pretrain).validate().unwrap();
        TrainConfig::toy(Stage::Finetune).validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let cfg = TrainConfig::toy(Stage::Finetune);
        let text = cfg.to_toml().unwrap();
        assert!(text.lines().any(|l| l.trim() == "eta = 0.99"));
        let back = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let base = TrainConfig::toy(Stage::Finetune);
        for cfg in [
            TrainConfig { eta: 1.1, ..base.clone() },
            TrainConfig { eta: 1.0, ..base.clone() },
            TrainConfig { batch_k: 1, ..base.clone() },
            TrainConfig { ecab: EcabConfig { reduction: 4, hidden: 4 }, ..base.clone() },
            TrainConfig { ecab: EcabConfig { reduction: 16, hidden: 5 }, ..base.clone() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!(TrainConfig::from_toml("stage = \"pretrain\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn cluster_presets() {
        assert_eq!(target_cluster_count("CUHK03"), Some(900));
        assert_eq!(target_cluster_count("market1501"), Some(900));
        assert_eq!(target_cluster_count("msmt17"), Some(2500));
        assert_eq!(target_cluster_count("duke"), None);
    }
}
