//! Experiment configuration files (TOML) and their resolution against
//! command-line overrides.

use std::path::{Path, PathBuf};

use decorr_core::data::PadMode;
use decorr_core::model::{lookup, ModelSpec};
use decorr_core::train::TrainConfig;
use decorr_core::Precision;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub kind: DatasetKind,
    /// Directory holding the dataset files. Defaults to a subdirectory of
    /// the data dir (`mnist` or `cifar-10-batches-bin`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    // synthetic only
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    4
}

fn default_train_per_class() -> usize {
    500
}

fn default_test_per_class() -> usize {
    250
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            root: None,
            train_limit: None,
            test_limit: None,
            classes: default_classes(),
            train_per_class: default_train_per_class(),
            test_per_class: default_test_per_class(),
            seed: 0,
        }
    }
}

/// Training hyperparameters; absent keys take the full-recipe defaults,
/// absent `tap_stages` taps every stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap_stages: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_initial: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_drop_epochs: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_drop_factor: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<Precision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pad_mode: Option<PadMode>,
}

impl TrainSection {
    fn resolve(&self, num_stages: usize) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            lambda: self.lambda.unwrap_or(d.lambda),
            tap_stages: self
                .tap_stages
                .clone()
                .unwrap_or_else(|| (0..num_stages).collect()),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            eval_batch_size: self.eval_batch_size.unwrap_or(d.eval_batch_size),
            lr_initial: self.lr_initial.unwrap_or(d.lr_initial),
            lr_drop_epochs: self.lr_drop_epochs.clone().unwrap_or(d.lr_drop_epochs),
            lr_drop_factor: self.lr_drop_factor.unwrap_or(d.lr_drop_factor),
            momentum: self.momentum.unwrap_or(d.momentum),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            seed: self.seed.unwrap_or(d.seed),
            precision: self.precision.unwrap_or(d.precision),
            augment: self.augment.unwrap_or(d.augment),
            pad_mode: self.pad_mode.unwrap_or(d.pad_mode),
        }
    }

    fn from_resolved(c: &TrainConfig) -> Self {
        TrainSection {
            lambda: Some(c.lambda),
            tap_stages: Some(c.tap_stages.clone()),
            epochs: Some(c.epochs),
            batch_size: Some(c.batch_size),
            eval_batch_size: Some(c.eval_batch_size),
            lr_initial: Some(c.lr_initial),
            lr_drop_epochs: Some(c.lr_drop_epochs.clone()),
            lr_drop_factor: Some(c.lr_drop_factor),
            momentum: Some(c.momentum),
            weight_decay: Some(c.weight_decay),
            seed: Some(c.seed),
            precision: Some(c.precision),
            augment: Some(c.augment),
            pad_mode: Some(c.pad_mode),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainSection,
}

fn default_model() -> String {
    "mini3".into()
}

fn default_repeats() -> usize {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: default_model(),
            out_dir: None,
            repeats: default_repeats(),
            dataset: DatasetConfig::default(),
            train: TrainSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML document. Unknown keys are errors naming the key.
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }
}

/// Values given on the command line; each replaces the file value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
    pub repeats: Option<usize>,
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
}

/// A configuration with every choice made explicit.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    /// Snapshot that reproduces this run when fed back as `--config`.
    pub config: ExperimentConfig,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub data_root: Option<PathBuf>,
    pub repeats: usize,
}

pub const DEFAULT_OUT_DIR: &str = "decorr-out";

impl Resolved {
    pub fn new(mut config: ExperimentConfig, over: &Overrides) -> Result<Self, CliError> {
        let spec = lookup(&config.model)?;
        if let Some(v) = over.seed {
            config.train.seed = Some(v);
        }
        if let Some(v) = over.precision {
            config.train.precision = Some(v);
        }
        if let Some(v) = over.lambda {
            config.train.lambda = Some(v);
        }
        if let Some(v) = over.epochs {
            config.train.epochs = Some(v);
        }
        if let Some(v) = over.repeats {
            config.repeats = v;
        }
        if let Some(v) = &over.out {
            config.out_dir = Some(v.clone());
        }
        if config.repeats == 0 {
            return Err(CliError::Config("repeats must be at least 1".into()));
        }
        let out = config
            .out_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        config.out_dir = Some(out.clone());

        let data_root = match config.dataset.kind {
            DatasetKind::Synthetic => None,
            kind => {
                let root = match (&config.dataset.root, &over.data_dir) {
                    (Some(root), _) => root.clone(),
                    (None, Some(dir)) => default_root(dir, kind),
                    (None, None) => {
                        return Err(CliError::MissingData(format!(
                            "no data directory for {kind:?}; pass --data-dir or set {}",
                            decorr_core::data::DATA_DIR_ENV
                        )))
                    }
                };
                config.dataset.root = Some(root.clone());
                Some(root)
            }
        };

        let train = config.train.resolve(spec.num_stages());
        train.validate()?;
        if let Some(&s) = train.tap_stages.iter().find(|&&s| s >= spec.num_stages()) {
            return Err(CliError::Config(format!(
                "tap stage {s} does not exist; {} has {} stages",
                spec.name,
                spec.num_stages()
            )));
        }
        config.train = TrainSection::from_resolved(&train);
        Ok(Resolved {
            repeats: config.repeats,
            config,
            spec,
            train,
            out,
            data_root,
        })
    }
}

fn default_root(data_dir: &Path, kind: DatasetKind) -> PathBuf {
    let sub = match kind {
        DatasetKind::Mnist => "mnist",
        DatasetKind::Cifar10 => "cifar-10-batches-bin",
        DatasetKind::Synthetic => return data_dir.to_path_buf(),
    };
    let nested = data_dir.join(sub);
    if nested.is_dir() {
        nested
    } else {
        data_dir.to_path_buf()
    }
}
