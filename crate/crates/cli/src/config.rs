//! Declarative run configuration.
//!
//! A run is described by a TOML file with optional top-level keys
//! `dataset`, `limit` and `seed` and optional `[model]`, `[train]` and
//! `[synthetic]` tables. Layers are merged key by key (later layers win):
//! built-in defaults, the configuration recorded in a checkpoint, the
//! `--config` file, then command-line flags. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use csa_core::data::{DataSource, SyntheticConfig};
use csa_core::model::{ModelSpec, Variant};
use csa_core::train::{default_milestones, TrainConfig};
use csa_core::CsaError;
use serde::{Deserialize, Serialize};

/// Seed used for the model, the shuffle order and the synthetic data when
/// none is given.
pub const DEFAULT_SEED: u64 = 1;
pub const SYNTHETIC_EPOCHS: usize = 10;
pub const IDX_EPOCHS: usize = 20;

macro_rules! overlay {
    ($base:expr, $top:expr; $($field:ident),* $(,)?) => {{
        let (base, top) = ($base, $top);
        Self { $($field: top.$field.or(base.$field)),* }
    }};
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage_channels: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks_per_stage: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduction: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_grad_weights: Option<bool>,
}

impl ModelSection {
    fn overlay(self, top: Self) -> Self {
        overlay!(self, top; variant, stage_channels, blocks_per_stage, reduction, seed, stop_grad_weights)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub milestones: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nesterov: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<bool>,
}

impl TrainSection {
    fn overlay(self, top: Self) -> Self {
        overlay!(self, top; epochs, batch_size, lr, milestones, momentum, weight_decay, nesterov, seed, augment)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_test: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bar_length: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bar_width: Option<f64>,
}

impl SyntheticSection {
    fn overlay(self, top: Self) -> Self {
        overlay!(self, top; seed, n_train, n_test, num_classes, size, noise, jitter, bar_length, bar_width)
    }
}

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

/// One configuration layer. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    /// `synthetic` or `idx:<dir>`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "is_default")]
    pub model: ModelSection,
    #[serde(skip_serializing_if = "is_default")]
    pub train: TrainSection,
    #[serde(skip_serializing_if = "is_default")]
    pub synthetic: SyntheticSection,
}

fn invalid(msg: impl Into<String>) -> CsaError {
    CsaError::InvalidConfig(msg.into())
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CsaError> {
        toml::from_str(text).map_err(|e| invalid(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self, CsaError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn overlay(self, top: Self) -> Self {
        ConfigFile {
            dataset: top.dataset.or(self.dataset),
            limit: top.limit.or(self.limit),
            seed: top.seed.or(self.seed),
            model: self.model.overlay(top.model),
            train: self.train.overlay(top.train),
            synthetic: self.synthetic.overlay(top.synthetic),
        }
    }

    /// Fills every unset key with its default and validates the result.
    ///
    /// The synthetic task defaults to [`TrainConfig::synthetic`], IDX data
    /// to [`TrainConfig::default`]. Milestones not given explicitly are
    /// scaled to the epoch budget. A top-level `seed` applies to every
    /// section that does not set its own.
    pub fn resolve(&self) -> Result<RunConfig, CsaError> {
        // TOML integers are signed 64-bit, so larger seeds could not be echoed.
        for s in [self.seed, self.model.seed, self.train.seed, self.synthetic.seed].into_iter().flatten() {
            if s > i64::MAX as u64 {
                return Err(invalid(format!("seed {s} exceeds {}", i64::MAX)));
            }
        }
        let seed = self.seed.unwrap_or(DEFAULT_SEED);
        let dataset: DataSource = self.dataset.as_deref().unwrap_or("synthetic").parse()?;
        let dataset = match dataset {
            DataSource::Synthetic(_) => {
                let s = &self.synthetic;
                let d = SyntheticConfig::default();
                let cfg = SyntheticConfig {
                    seed: s.seed.unwrap_or(seed),
                    n_train: s.n_train.unwrap_or(d.n_train),
                    n_test: s.n_test.unwrap_or(d.n_test),
                    num_classes: s.num_classes.unwrap_or(d.num_classes),
                    size: s.size.unwrap_or(d.size),
                    noise: s.noise.unwrap_or(d.noise),
                    jitter: s.jitter.unwrap_or(d.jitter),
                    bar_length: s.bar_length.unwrap_or(d.bar_length),
                    bar_width: s.bar_width.unwrap_or(d.bar_width),
                };
                cfg.validate()?;
                DataSource::Synthetic(cfg)
            }
            idx => {
                if !is_default(&self.synthetic) {
                    return Err(invalid("[synthetic] settings given for an IDX dataset"));
                }
                idx
            }
        };
        if self.limit == Some(0) {
            return Err(invalid("limit must be positive"));
        }

        let num_classes = match &dataset {
            DataSource::Synthetic(cfg) => cfg.num_classes,
            DataSource::Idx { num_classes, .. } => *num_classes,
        };
        let m = &self.model;
        let d = ModelSpec::default();
        let model = ModelSpec {
            variant: m.variant.unwrap_or(d.variant),
            in_channels: 1,
            stage_channels: m.stage_channels.clone().unwrap_or(d.stage_channels),
            blocks_per_stage: m.blocks_per_stage.unwrap_or(d.blocks_per_stage),
            reduction: m.reduction.unwrap_or(d.reduction),
            num_classes,
            seed: m.seed.unwrap_or(seed),
            stop_grad_weights: m.stop_grad_weights.unwrap_or(d.stop_grad_weights),
        };
        model.validate()?;

        let t = &self.train;
        let synthetic = matches!(dataset, DataSource::Synthetic(_));
        let epochs = t.epochs.unwrap_or(if synthetic { SYNTHETIC_EPOCHS } else { IDX_EPOCHS });
        let base = if synthetic {
            TrainConfig::synthetic(epochs)
        } else {
            TrainConfig::for_epochs(epochs)
        };
        let train = TrainConfig {
            epochs,
            batch_size: t.batch_size.unwrap_or(base.batch_size),
            lr: t.lr.unwrap_or(base.lr),
            milestones: t.milestones.clone().unwrap_or_else(|| default_milestones(epochs)),
            momentum: t.momentum.unwrap_or(base.momentum),
            weight_decay: t.weight_decay.unwrap_or(base.weight_decay),
            nesterov: t.nesterov.unwrap_or(base.nesterov),
            seed: t.seed.unwrap_or(seed),
            augment: t.augment.unwrap_or(base.augment),
        };
        train.validate()?;

        Ok(RunConfig {
            dataset,
            limit: self.limit,
            seed,
            model,
            train,
        })
    }
}

/// Fully resolved run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DataSource,
    pub limit: Option<usize>,
    pub seed: u64,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

pub fn dataset_string(source: &DataSource) -> String {
    match source {
        DataSource::Synthetic(_) => "synthetic".into(),
        DataSource::Idx { dir, .. } => format!("idx:{}", dir.display()),
    }
}

impl RunConfig {
    /// Every setting as an explicit layer; resolving it gives back `self`.
    pub fn echo(&self) -> ConfigFile {
        let m = &self.model;
        let t = &self.train;
        let synthetic = match &self.dataset {
            DataSource::Synthetic(s) => SyntheticSection {
                seed: Some(s.seed),
                n_train: Some(s.n_train),
                n_test: Some(s.n_test),
                num_classes: Some(s.num_classes),
                size: Some(s.size),
                noise: Some(s.noise),
                jitter: Some(s.jitter),
                bar_length: Some(s.bar_length),
                bar_width: Some(s.bar_width),
            },
            DataSource::Idx { .. } => SyntheticSection::default(),
        };
        ConfigFile {
            dataset: Some(dataset_string(&self.dataset)),
            limit: self.limit,
            seed: Some(self.seed),
            model: ModelSection {
                variant: Some(m.variant),
                stage_channels: Some(m.stage_channels.clone()),
                blocks_per_stage: Some(m.blocks_per_stage),
                reduction: Some(m.reduction),
                seed: Some(m.seed),
                stop_grad_weights: Some(m.stop_grad_weights),
            },
            train: TrainSection {
                epochs: Some(t.epochs),
                batch_size: Some(t.batch_size),
                lr: Some(t.lr),
                milestones: Some(t.milestones.clone()),
                momentum: Some(t.momentum),
                weight_decay: Some(t.weight_decay),
                nesterov: Some(t.nesterov),
                seed: Some(t.seed),
                augment: Some(t.augment),
            },
            synthetic,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.echo()).expect("config echo is always serialisable")
    }

    pub fn idx_dir(&self) -> Option<&PathBuf> {
        match &self.dataset {
            DataSource::Idx { dir, .. } => Some(dir),
            DataSource::Synthetic(_) => None,
        }
    }
}
