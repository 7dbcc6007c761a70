//! Flat JSON config documents for the CLI.
//!
//! Each subcommand accepts a single JSON object whose keys are a fixed set of
//! training, loss, data and grid fields. Keys outside that set are rejected
//! before deserialization so that typos surface as errors.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::longtail::{
    generate_balanced_test, generate_synthetic, ingest_csv, subsample_to_profile, CsvSchema,
    Dataset, LongTailProfile, SyntheticDataSpec,
};
use crate::losses::LossFamily;
use crate::trainer::{Architecture, TrainConfig};

/// A beta axis value: a number in `[0, 1)` or `"none"` for the plain loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaSetting {
    None,
    Value(f64),
}

impl BetaSetting {
    pub fn as_option(&self) -> Option<f64> {
        match self {
            BetaSetting::None => None,
            BetaSetting::Value(b) => Some(*b),
        }
    }
}

impl fmt::Display for BetaSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaSetting::None => f.write_str("none"),
            BetaSetting::Value(b) => write!(f, "{b}"),
        }
    }
}

impl std::str::FromStr for BetaSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(BetaSetting::None);
        }
        let b: f64 = s
            .parse()
            .map_err(|_| Error::Config(format!("beta must be a number or \"none\", got '{s}'")))?;
        if !(0.0..1.0).contains(&b) {
            return Err(Error::Config(format!("beta must lie in [0, 1), got {b}")));
        }
        Ok(BetaSetting::Value(b))
    }
}

impl<'de> Deserialize<'de> for BetaSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let s = match Raw::deserialize(d)? {
            Raw::Num(b) => b.to_string(),
            Raw::Text(t) => t,
        };
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for BetaSetting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BetaSetting::None => s.serialize_str("none"),
            BetaSetting::Value(b) => s.serialize_f64(*b),
        }
    }
}

/// Optimizer and schedule keys shared by `train` and `sweep`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainKeys {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub decay_epochs: Option<Vec<usize>>,
    pub decay_factor: Option<f64>,
    pub focal_lr_multiplier: Option<f64>,
    /// `"linear"` or `"mlp"`.
    pub architecture: Option<String>,
    pub hidden_size: Option<usize>,
}

impl TrainKeys {
    pub const KEYS: &'static [&'static str] = &[
        "epochs",
        "batch_size",
        "lr",
        "momentum",
        "weight_decay",
        "warmup_epochs",
        "decay_epochs",
        "decay_factor",
        "focal_lr_multiplier",
        "architecture",
        "hidden_size",
    ];

    /// Applies the keys on top of `base`. Setting `epochs` without
    /// `decay_epochs` rescales the default milestones.
    pub fn apply(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut c = match self.epochs {
            Some(e) => base.with_epochs(e),
            None => base,
        };
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.momentum {
            c.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = self.warmup_epochs {
            c.warmup_epochs = v;
        }
        if let Some(v) = &self.decay_epochs {
            c.decay_epochs = v.clone();
        }
        if let Some(v) = self.decay_factor {
            c.decay_factor = v;
        }
        if let Some(v) = self.focal_lr_multiplier {
            c.focal_lr_multiplier = v;
        }
        c.architecture = match (self.architecture.as_deref(), self.hidden_size) {
            (None | Some("linear"), None) => c.architecture,
            (Some("linear"), Some(_)) => {
                return Err(Error::Config(
                    "hidden_size only applies to architecture \"mlp\"".into(),
                ))
            }
            (None | Some("mlp"), Some(hidden)) => Architecture::Mlp { hidden },
            (Some("mlp"), None) => Architecture::Mlp { hidden: 64 },
            (Some(other), _) => {
                return Err(Error::Config(format!("unknown architecture '{other}'")))
            }
        };
        if self.architecture.as_deref() == Some("linear") {
            c.architecture = Architecture::Linear;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Loss keys of a single training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossKeys {
    pub family: Option<LossFamily>,
    pub gamma: Option<f64>,
    pub beta: Option<BetaSetting>,
    pub seed: Option<u64>,
}

impl LossKeys {
    pub const KEYS: &'static [&'static str] = &["family", "gamma", "beta", "seed"];
}

/// Where training and test data come from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataKeys {
    pub dataset_id: Option<String>,
    pub n_classes: Option<usize>,
    pub base_count: Option<u64>,
    pub imbalance: Option<f64>,
    pub dim: Option<usize>,
    pub class_mean_scale: Option<f64>,
    pub noise_std: Option<f64>,
    pub test_per_class: Option<u64>,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

impl DataKeys {
    pub const KEYS: &'static [&'static str] = &[
        "dataset_id",
        "n_classes",
        "base_count",
        "imbalance",
        "dim",
        "class_mean_scale",
        "noise_std",
        "test_per_class",
        "train_csv",
        "test_csv",
    ];

    pub fn source(&self) -> Result<DataSource> {
        match (&self.train_csv, &self.test_csv) {
            (Some(train), Some(test)) => {
                let synthetic_only = [
                    self.base_count.is_some(),
                    self.dim.is_some(),
                    self.class_mean_scale.is_some(),
                    self.noise_std.is_some(),
                    self.test_per_class.is_some(),
                ];
                if synthetic_only.iter().any(|&b| b) {
                    return Err(Error::Config(
                        "synthetic data keys cannot be combined with train_csv/test_csv".into(),
                    ));
                }
                Ok(DataSource::Csv {
                    id: self.dataset_id.clone().unwrap_or_else(|| "csv".into()),
                    train: train.clone(),
                    test: test.clone(),
                    n_classes: self.n_classes,
                })
            }
            (None, None) => {
                let d = SyntheticSetup::default();
                let setup = SyntheticSetup {
                    id: self.dataset_id.clone().unwrap_or(d.id),
                    n_classes: self.n_classes.unwrap_or(d.n_classes),
                    base_count: self.base_count.unwrap_or(d.base_count),
                    dim: self.dim.unwrap_or(d.dim),
                    class_mean_scale: self.class_mean_scale.unwrap_or(d.class_mean_scale),
                    noise_std: self.noise_std.unwrap_or(d.noise_std),
                    test_per_class: self.test_per_class.unwrap_or(d.test_per_class),
                };
                setup.validate()?;
                Ok(DataSource::Synthetic(setup))
            }
            _ => Err(Error::Config(
                "train_csv and test_csv must be given together".into(),
            )),
        }
    }
}

/// Sweep grid axes and sweep-only options.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridKeys {
    pub families: Option<Vec<LossFamily>>,
    pub betas: Option<Vec<BetaSetting>>,
    pub gammas: Option<Vec<f64>>,
    pub imbalances: Option<Vec<f64>>,
    pub seeds: Option<Vec<u64>>,
    pub val_fraction: Option<f64>,
    pub tail_k: Option<usize>,
}

impl GridKeys {
    pub const KEYS: &'static [&'static str] = &[
        "families",
        "betas",
        "gammas",
        "imbalances",
        "seeds",
        "val_fraction",
        "tail_k",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSetup {
    pub id: String,
    pub n_classes: usize,
    pub base_count: u64,
    pub dim: usize,
    pub class_mean_scale: f64,
    pub noise_std: f64,
    pub test_per_class: u64,
}

impl Default for SyntheticSetup {
    fn default() -> Self {
        Self {
            id: "synthetic".into(),
            n_classes: 10,
            base_count: 1000,
            dim: 20,
            class_mean_scale: 3.0,
            noise_std: 1.0,
            test_per_class: 500,
        }
    }
}

impl SyntheticSetup {
    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be >= 2".into()));
        }
        if self.base_count == 0 || self.test_per_class == 0 {
            return Err(Error::Config(
                "base_count and test_per_class must be >= 1".into(),
            ));
        }
        self.spec(0).validate()
    }

    pub fn spec(&self, seed: u64) -> SyntheticDataSpec {
        SyntheticDataSpec {
            dim: self.dim,
            class_mean_scale: self.class_mean_scale,
            noise_std: self.noise_std,
            rng_seed: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSetup),
    Csv {
        id: String,
        train: PathBuf,
        test: PathBuf,
        n_classes: Option<usize>,
    },
}

/// A materialized train/test pair for one imbalance level and seed.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset_id: String,
    pub profile: LongTailProfile,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn dataset_id(prefix: &str, imbalance: f64) -> String {
    format!("{prefix}_if{imbalance}")
}

impl DataSource {
    pub fn id(&self) -> &str {
        match self {
            DataSource::Synthetic(s) => &s.id,
            DataSource::Csv { id, .. } => id,
        }
    }

    /// Synthetic data draws class means and samples from `seed`. Ingested
    /// training data is subsampled to a long-tailed profile whose head count
    /// is the smallest available class count; the test file is used as is.
    pub fn prepare(&self, imbalance: f64, seed: u64) -> Result<PreparedData> {
        let dataset_id = dataset_id(self.id(), imbalance);
        match self {
            DataSource::Synthetic(s) => {
                let profile =
                    LongTailProfile::from_imbalance(s.n_classes, s.base_count, imbalance)?;
                let spec = s.spec(seed);
                let train = generate_synthetic(&profile, &spec)?;
                let test = generate_balanced_test(s.n_classes, s.test_per_class, &spec)?;
                Ok(PreparedData {
                    dataset_id,
                    profile,
                    train,
                    test,
                })
            }
            DataSource::Csv {
                train,
                test,
                n_classes,
                ..
            } => {
                let (full, test) = load_csv_pair(train, test, *n_classes)?;
                let head = *full
                    .class_counts()
                    .as_slice()
                    .iter()
                    .min()
                    .expect("non-empty");
                if head == 0 {
                    return Err(Error::Config(
                        "ingested training data has an empty class".into(),
                    ));
                }
                let profile = LongTailProfile::from_imbalance(full.n_classes(), head, imbalance)?;
                let train = subsample_to_profile(&full, &profile, seed)?;
                Ok(PreparedData {
                    dataset_id,
                    profile,
                    train,
                    test,
                })
            }
        }
    }
}

/// Reads a train/test CSV pair and checks that they agree on shape.
pub fn load_csv_pair(
    train: &Path,
    test: &Path,
    n_classes: Option<usize>,
) -> Result<(Dataset, Dataset)> {
    let train = ingest_csv(train, &CsvSchema { n_classes })?;
    let schema = CsvSchema {
        n_classes: Some(n_classes.unwrap_or(train.n_classes())),
    };
    let test = ingest_csv(test, &schema)?;
    if train.dim() != test.dim() {
        return Err(Error::Shape(format!(
            "train has {} features, test has {}",
            train.dim(),
            test.dim()
        )));
    }
    Ok((train, test))
}

/// Parses a flat JSON object, rejecting keys outside `allowed`.
pub fn parse_flat<T: DeserializeOwned>(text: &str, allowed: &[&[&str]]) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
    for key in obj.keys() {
        if !allowed.iter().any(|set| set.contains(&key.as_str())) {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

/// Config document of the `train` subcommand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainFile {
    #[serde(flatten)]
    pub train: TrainKeys,
    #[serde(flatten)]
    pub loss: LossKeys,
    #[serde(flatten)]
    pub data: DataKeys,
}

impl TrainFile {
    pub fn parse(text: &str) -> Result<Self> {
        parse_flat(text, &[TrainKeys::KEYS, LossKeys::KEYS, DataKeys::KEYS])
    }
}

/// Config document of the `sweep` subcommand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepFile {
    #[serde(flatten)]
    pub train: TrainKeys,
    #[serde(flatten)]
    pub grid: GridKeys,
    #[serde(flatten)]
    pub data: DataKeys,
}

impl SweepFile {
    pub fn parse(text: &str) -> Result<Self> {
        if let Ok(serde_json::Value::Object(obj)) = serde_json::from_str::<serde_json::Value>(text)
        {
            if obj.contains_key("imbalance") {
                return Err(Error::Config(
                    "sweep configs take 'imbalances' (a list), not 'imbalance'".into(),
                ));
            }
        }
        parse_flat(text, &[TrainKeys::KEYS, GridKeys::KEYS, DataKeys::KEYS])
    }
}

/// Config document of the `gen-data` subcommand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataFile {
    #[serde(flatten)]
    pub data: DataKeys,
    pub seed: Option<u64>,
}

impl DataFile {
    pub fn parse(text: &str) -> Result<Self> {
        parse_flat(text, &[DataKeys::KEYS, &["seed"]])
    }
}
