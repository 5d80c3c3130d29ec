//! Declarative run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use jemcal_core::data::{gen_gaussian_mixture, gen_spirals, gen_two_moons, Dataset};
use jemcal_core::model::ModelConfig;
use jemcal_core::sgld::{DataBox, SgldConfig};
use jemcal_core::training::{LrSchedule, Mode, TrainConfig};
use jemcal_core::Activation;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::csvio;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {cause}")]
    Read {
        path: PathBuf,
        cause: std::io::Error,
    },
    #[error("invalid config {path}: {cause}")]
    Parse {
        path: PathBuf,
        cause: toml::de::Error,
    },
    #[error("invalid config: field `{field}`: {msg}")]
    Field { field: &'static str, msg: String },
}

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    GaussianMixture {
        classes: usize,
        dim: usize,
        n_per_class: usize,
        separation: f64,
    },
    TwoMoons {
        n: usize,
        noise: f64,
    },
    Spirals {
        n: usize,
        turns: f64,
        noise: f64,
    },
    /// Feature CSV; the label column defaults to the last one.
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label_column: Option<usize>,
        classes: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    LeakyRelu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub activation: ActivationKind,
    /// Negative-side slope of the leaky ReLU.
    pub slope: f64,
    pub temperature: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: ActivationKind::LeakyRelu,
            slope: 0.05,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Softmax,
    Jem,
}

impl From<ModeKind> for Mode {
    fn from(m: ModeKind) -> Self {
        match m {
            ModeKind::Softmax => Mode::Softmax,
            ModeKind::Jem => Mode::Jem,
        }
    }
}

impl From<Mode> for ModeKind {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Softmax => ModeKind::Softmax,
            Mode::Jem => ModeKind::Jem,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub mode: ModeKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub gen_weight: f64,
    pub buffer_capacity: usize,
    pub eval_every: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: t.mode.into(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.schedule.base_rate,
            warmup_steps: t.schedule.warmup_steps,
            decay_epochs: t.schedule.decay_epochs,
            decay_factor: t.schedule.decay_factor,
            momentum: t.momentum,
            gen_weight: t.gen_weight,
            buffer_capacity: t.buffer_capacity,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgldSpec {
    pub steps: usize,
    pub step_size: f64,
    pub noise_scale: f64,
    pub decouple_noise: bool,
    pub reinit_prob: f64,
    /// Elementwise gradient clip; `0` disables clipping.
    pub clip_grad: f64,
    pub box_low: f64,
    pub box_high: f64,
}

impl Default for SgldSpec {
    fn default() -> Self {
        let s = SgldConfig::practical();
        Self {
            steps: s.steps,
            step_size: s.step_size,
            noise_scale: s.noise_scale,
            decouple_noise: s.decouple_noise,
            reinit_prob: s.reinit_prob,
            clip_grad: s.clip_grad.unwrap_or(0.0),
            box_low: s.bounds.low,
            box_high: s.bounds.high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSpec {
    pub bins: usize,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self { bins: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; see the CLI for the fallback order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataSpec,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub sgld: SgldSpec,
    #[serde(default)]
    pub metrics: MetricsSpec,
}

fn field(field: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Field { field, msg: msg.into() }
}

impl RunConfig {
    pub fn with_data(data: DataSpec) -> Self {
        Self {
            seed: 0,
            out: None,
            data,
            split: SplitSpec::default(),
            model: ModelSpec::default(),
            train: TrainSpec::default(),
            sgld: SgldSpec::default(),
            metrics: MetricsSpec::default(),
        }
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|cause| ConfigError::Parse {
            path: path.to_path_buf(),
            cause,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|cause| ConfigError::Read {
            path: path.to_path_buf(),
            cause,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// SHA-256 of the TOML text.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    /// Field-level checks that serde cannot express.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match &self.data {
            DataSpec::GaussianMixture {
                classes,
                dim,
                n_per_class,
                separation,
            } => {
                if *classes < 2 {
                    return Err(field("data.classes", "need at least 2 classes"));
                }
                if *dim == 0 {
                    return Err(field("data.dim", "must be positive"));
                }
                if *n_per_class == 0 {
                    return Err(field("data.n_per_class", "must be positive"));
                }
                if !(*separation >= 0.0) || !separation.is_finite() {
                    return Err(field("data.separation", "must be finite and >= 0"));
                }
            }
            DataSpec::TwoMoons { n, noise } | DataSpec::Spirals { n, noise, .. } => {
                if *n < 2 || n % 2 != 0 {
                    return Err(field("data.n", "must be a positive even number"));
                }
                if !(*noise >= 0.0) || !noise.is_finite() {
                    return Err(field("data.noise", "must be finite and >= 0"));
                }
                if let DataSpec::Spirals { turns, .. } = &self.data {
                    if !(*turns > 0.0) || !turns.is_finite() {
                        return Err(field("data.turns", "must be positive"));
                    }
                }
            }
            DataSpec::Csv { path, classes, .. } => {
                if *classes < 2 {
                    return Err(field("data.classes", "need at least 2 classes"));
                }
                if path.as_os_str().is_empty() {
                    return Err(field("data.path", "is empty"));
                }
            }
        }
        let s = &self.split;
        if [s.train, s.dev, s.test].iter().any(|f| !(*f >= 0.0)) || (s.train + s.dev + s.test - 1.0).abs() > 1e-9 {
            return Err(field("split", "fractions must be non-negative and sum to 1"));
        }
        if !(s.train > 0.0 && s.test > 0.0) {
            return Err(field("split", "train and test fractions must be positive"));
        }
        if !(self.model.temperature > 0.0) || !self.model.temperature.is_finite() {
            return Err(field("model.temperature", "must be positive"));
        }
        if self.model.hidden.contains(&0) {
            return Err(field("model.hidden", "layer widths must be positive"));
        }
        if !(self.sgld.clip_grad >= 0.0) {
            return Err(field("sgld.clip_grad", "must be >= 0 (0 disables clipping)"));
        }
        if self.metrics.bins == 0 {
            return Err(field("metrics.bins", "must be positive"));
        }
        self.train_config()
            .validate()
            .map_err(|e| field("train/sgld", e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.model.hidden.clone(),
            activation: match self.model.activation {
                ActivationKind::LeakyRelu => Activation::LeakyRelu { slope: self.model.slope },
                ActivationKind::Tanh => Activation::Tanh,
            },
            temperature: self.model.temperature,
        }
    }

    pub fn sgld_config(&self) -> SgldConfig {
        let s = &self.sgld;
        SgldConfig {
            steps: s.steps,
            step_size: s.step_size,
            noise_scale: s.noise_scale,
            reinit_prob: s.reinit_prob,
            clip_grad: (s.clip_grad > 0.0).then_some(s.clip_grad),
            decouple_noise: s.decouple_noise,
            bounds: DataBox {
                low: s.box_low,
                high: s.box_high,
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            mode: t.mode.into(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            schedule: LrSchedule {
                base_rate: t.lr,
                warmup_steps: t.warmup_steps,
                decay_epochs: t.decay_epochs.clone(),
                decay_factor: t.decay_factor,
            },
            momentum: t.momentum,
            gen_weight: t.gen_weight,
            sgld: self.sgld_config(),
            buffer_capacity: t.buffer_capacity,
            model: self.model_config(),
            seed: self.seed,
            eval_every: t.eval_every,
            bins: self.metrics.bins,
        }
    }

    /// Raw (unstandardized) dataset with train/dev/test splits.
    pub fn raw_dataset(&self) -> Result<Dataset, DatasetError> {
        let ds = match &self.data {
            DataSpec::GaussianMixture {
                classes,
                dim,
                n_per_class,
                separation,
            } => gen_gaussian_mixture(*classes, *dim, *n_per_class, *separation, self.seed)?,
            DataSpec::TwoMoons { n, noise } => gen_two_moons(*n, *noise, self.seed)?,
            DataSpec::Spirals { n, turns, noise } => gen_spirals(*n, *turns, *noise, self.seed)?,
            DataSpec::Csv {
                path,
                label_column,
                classes,
            } => {
                if !path.exists() {
                    return Err(DatasetError::Missing(path.clone()));
                }
                csvio::ingest_csv(path, *label_column, *classes)?
            }
        };
        let s = &self.split;
        Ok(ds.split([s.train, s.dev, s.test], self.seed)?)
    }

    /// Split and standardized dataset, as used for training.
    pub fn dataset(&self) -> Result<Dataset, DatasetError> {
        let b = self.sgld_config().bounds;
        Ok(self.raw_dataset()?.standardize_with(Some(b))?)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("field `data.path`: file {0} does not exist")]
    Missing(PathBuf),
    #[error(transparent)]
    Csv(#[from] csvio::CsvError),
    #[error("dataset: {0}")]
    Core(jemcal_core::Error),
}

impl From<jemcal_core::Error> for DatasetError {
    fn from(e: jemcal_core::Error) -> Self {
        DatasetError::Core(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixture() -> RunConfig {
        RunConfig::with_data(DataSpec::GaussianMixture {
            classes: 4,
            dim: 2,
            n_per_class: 50,
            separation: 2.5,
        })
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = mixture();
        cfg.seed = 17;
        cfg.train.decay_epochs = vec![3, 9];
        cfg.sgld.step_size = 0.1 + 0.2;
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text, Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let text = "[data]\nsource = \"two_moons\"\nn = 100\nnoise = 0.1\n";
        let cfg = RunConfig::from_toml(text, Path::new("x.toml")).unwrap();
        assert_eq!(cfg.train, TrainSpec::default());
        assert_eq!(cfg.metrics.bins, 15);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let text = "[data]\nsource = \"two_moons\"\nn = 100\nnoise = 0.1\n[train]\nepoks = 3\n";
        let err = RunConfig::from_toml(text, Path::new("x.toml")).unwrap_err().to_string();
        assert!(err.contains("epoks") && err.contains("line 6"), "{err}");
        let text = "[data]\nsource = \"two_moons\"\nn = 100\nnoise = 0.1\ncolour = 1\n";
        assert!(RunConfig::from_toml(text, Path::new("x.toml")).is_err());
    }

    #[test]
    fn missing_csv_path_names_the_field() {
        let text = "[data]\nsource = \"csv\"\nclasses = 3\n";
        let err = RunConfig::from_toml(text, Path::new("x.toml")).unwrap_err().to_string();
        assert!(err.contains("path"), "{err}");
    }

    #[test]
    fn field_validation() {
        let mut cfg = mixture();
        cfg.split.test = 0.5;
        assert!(matches!(cfg.validate(), Err(ConfigError::Field { field: "split", .. })));
        let mut cfg = mixture();
        cfg.metrics.bins = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = mixture();
        let mut b = mixture();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
