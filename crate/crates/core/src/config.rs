//! Run configuration: a flat TOML file of typed keys.
//!
//! ```toml
//! dataset = "data/ratings.tsv"
//! seed = 7
//! preset = "tall"
//! n_experts = 4
//! epochs = 120
//! sync_alpha = 0.05
//! ```
//!
//! Every key has a default; unknown keys are rejected. The preset expands
//! into concrete toggles (expert count, weighting, mode, gap) in
//! [`RunConfig::ensemble_config`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SplitRatios;
use crate::error::{Error, Result};
use crate::expert::ExpertDims;
use crate::mixture::{EnsembleConfig, KlWeighting, DEFAULT_GATE_EPS};
use crate::sync::{SyncConfig, WeightMode};
use crate::tensor::AdamConfig;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// One expert, unit weights.
    Multvae,
    /// Loss-driven mixture, unit weights.
    Lmoe,
    /// Mixture with loss-change weights and no gap.
    LmoeLc,
    /// Mixture with raw-loss weights after the gap.
    LmoeGapRaw,
    /// Mixture with loss-change weights after the gap.
    Tall,
    /// Toggles taken verbatim from the `n_experts` and `sync_*` keys.
    Custom,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Self::Multvae,
        Self::Lmoe,
        Self::LmoeLc,
        Self::LmoeGapRaw,
        Self::Tall,
        Self::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Multvae => "multvae",
            Self::Lmoe => "lmoe",
            Self::LmoeLc => "lmoe_lc",
            Self::LmoeGapRaw => "lmoe_gap_raw",
            Self::Tall => "tall",
            Self::Custom => "custom",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|p| p.as_str()).collect();
                Error::Config(format!(
                    "unknown preset {s:?} (one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Interaction file; relative paths resolve against the config file.
    pub dataset: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rating_threshold: Option<f64>,
    /// Users and items with fewer interactions are dropped (0 disables).
    pub min_interactions: usize,
    pub seed: u64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub hidden: usize,
    pub latent: usize,
    pub n_experts: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub beta_max: f64,
    pub anneal_frac: f64,
    pub dropout: f64,
    pub gate_eps: f64,
    pub kl_weighting: KlWeighting,
    pub sync_enabled: bool,
    pub sync_alpha: f64,
    pub sync_gap: usize,
    pub sync_window: usize,
    pub sync_mode: WeightMode,
    pub preset: Preset,
    pub k: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let sync = SyncConfig::default();
        let ratios = SplitRatios::default();
        Self {
            dataset: PathBuf::from("interactions.tsv"),
            rating_threshold: None,
            min_interactions: 0,
            seed: 0,
            split_train: ratios.train,
            split_val: ratios.val,
            split_test: ratios.test,
            hidden: 100,
            latent: 50,
            n_experts: 4,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.adam.lr,
            adam_beta1: train.adam.beta1,
            adam_beta2: train.adam.beta2,
            adam_eps: train.adam.eps,
            beta_max: train.beta_max,
            anneal_frac: train.anneal_frac,
            dropout: train.dropout,
            gate_eps: DEFAULT_GATE_EPS,
            kl_weighting: KlWeighting::default(),
            sync_enabled: true,
            sync_alpha: sync.alpha,
            sync_gap: sync.gap,
            sync_window: sync.window,
            sync_mode: sync.mode,
            preset: Preset::Tall,
            k: train.k,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; a relative `dataset` or `output_dir` is resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.dataset.is_relative() {
            cfg.dataset = base.join(&cfg.dataset);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are TOML-representable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.split_ratios().validate()?;
        ExpertDims::new(1, self.hidden, self.latent)?;
        if self.n_experts == 0 {
            return Err(Error::Config("n_experts must be at least 1".into()));
        }
        if let Some(t) = self.rating_threshold {
            if !t.is_finite() {
                return Err(Error::Config("rating_threshold must be finite".into()));
            }
        }
        self.train_config().validate()?;
        self.sync_config().validate()?;
        if !(self.gate_eps > 0.0) {
            return Err(Error::Config("gate_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.split_train,
            val: self.split_val,
            test: self.split_test,
        }
    }

    pub fn dims(&self, n_items: usize) -> Result<ExpertDims> {
        ExpertDims::new(n_items, self.hidden, self.latent)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            beta_max: self.beta_max,
            anneal_frac: self.anneal_frac,
            dropout: self.dropout,
            k: self.k,
            seed: self.seed,
        }
    }

    fn sync_config(&self) -> SyncConfig {
        SyncConfig {
            alpha: self.sync_alpha,
            gap: self.sync_gap,
            window: self.sync_window,
            mode: self.sync_mode,
        }
    }

    /// Expands the preset into concrete training toggles.
    pub fn ensemble_config(&self) -> EnsembleConfig {
        let sync = self.sync_config();
        let (n_experts, sync) = match self.preset {
            Preset::Multvae => (1, None),
            Preset::Lmoe => (self.n_experts, None),
            Preset::LmoeLc => (
                self.n_experts,
                Some(SyncConfig {
                    gap: 0,
                    mode: WeightMode::LossChange,
                    ..sync
                }),
            ),
            Preset::LmoeGapRaw => (
                self.n_experts,
                Some(SyncConfig {
                    mode: WeightMode::RawLoss,
                    ..sync
                }),
            ),
            Preset::Tall => (
                self.n_experts,
                Some(SyncConfig {
                    mode: WeightMode::LossChange,
                    ..sync
                }),
            ),
            Preset::Custom => (self.n_experts, self.sync_enabled.then_some(sync)),
        };
        EnsembleConfig {
            n_experts,
            gate_eps: self.gate_eps,
            kl_weighting: self.kl_weighting,
            train: self.train_config(),
            sync,
        }
    }

    /// Digest of the canonical configuration, output location excluded.
    pub fn config_hash(&self) -> String {
        let mut keyed = self.clone();
        keyed.output_dir = PathBuf::new();
        digest(keyed.to_toml().as_bytes())
    }

    /// Digest of the keys that determine the prepared split: the dataset
    /// location, filtering, seed and fold ratios.
    pub fn data_hash(&self) -> String {
        #[derive(Serialize)]
        struct DataKeys<'a> {
            dataset: &'a Path,
            #[serde(skip_serializing_if = "Option::is_none")]
            rating_threshold: Option<f64>,
            min_interactions: usize,
            seed: u64,
            split_train: f64,
            split_val: f64,
            split_test: f64,
        }
        let keys = DataKeys {
            dataset: &self.dataset,
            rating_threshold: self.rating_threshold,
            min_interactions: self.min_interactions,
            seed: self.seed,
            split_train: self.split_train,
            split_val: self.split_val,
            split_test: self.split_test,
        };
        digest(
            toml::to_string(&keys)
                .expect("TOML-representable")
                .as_bytes(),
        )
    }
}

pub(crate) fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
