use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelParams, ComputeModel};
use crate::dataset::{PartitionScheme, PartitionSpec, UnlearnTarget};
use crate::error::{Error, Result};
use crate::nn::{Activation, ModelSpec, SgdConfig};
use crate::pruning::{MaskOptions, MaskScope};

/// Experiment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Soul,
    Retrain,
    FedauLike,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Soul, Arm::Retrain, Arm::FedauLike];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Soul => "soul",
            Arm::Retrain => "retrain",
            Arm::FedauLike => "fedau_like",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "soul" => Ok(Arm::Soul),
            "retrain" => Ok(Arm::Retrain),
            "fedau_like" | "fedau" => Ok(Arm::FedauLike),
            other => Err(Error::InvalidConfig(format!("unknown arm {other:?}"))),
        }
    }
}

/// Where training and test samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// Gaussian clusters; dimensionality and class count follow the model.
    Blobs {
        train_samples: usize,
        test_samples: usize,
        spread: f64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

/// How the server averages the unlearning models of several clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnWeighting {
    /// Weight each client by its number of forgotten samples.
    ByUnlearnCount,
    Uniform,
}

/// Client weighting of the learning-model average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `1/K` for every client.
    Unweighted,
    /// `|D_k| / |D|`.
    BySize,
}

/// Starting point of each client's persistent unlearning model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnInit {
    /// Fresh initialisation from a per-client seed.
    PerClient,
    /// A copy of the initial global model.
    Shared,
}

/// How the retrain baseline is billed for time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainCharge {
    /// One from-scratch run per unlearning request.
    PerRequest,
    /// A single run regardless of the request count.
    Once,
}

/// Fully specified experiment. Every field has a default, so a config file
/// only needs the values it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub sgd: SgdConfig,
    pub data: DataSource,
    pub partition: PartitionSpec,
    pub rounds: usize,
    pub unlearn_clients: usize,
    pub unlearn_ratio: f64,
    pub unlearn_target: UnlearnTarget,
    pub relabel_exclude_original: bool,
    pub alpha: f64,
    pub beta: f64,
    pub l1_fraction: f64,
    pub l1_scope: MaskScope,
    pub selective_mask: MaskOptions,
    pub unlearn_weighting: UnlearnWeighting,
    pub aggregation: Aggregation,
    pub distribute_unlearned: bool,
    pub unlearn_init: UnlearnInit,
    pub retrain_charge: RetrainCharge,
    pub channel: ChannelParams,
    pub compute: ComputeModel,
    pub field_size_m: f64,
    pub drone_height_m: f64,
    pub tx_power_w: f64,
    pub master_seed: u64,
    pub seeds: usize,
    pub arms: Vec<Arm>,
}

impl Default for ExperimentConfig {
    /// Desk-scale defaults: 10 drones, 2000 synthetic samples in 16
    /// dimensions, 4 classes, a 16→32→4 network and 60 rounds.
    fn default() -> Self {
        Self {
            model: ModelSpec {
                input_dim: 16,
                hidden_dims: vec![32],
                num_classes: 4,
                activation: Activation::Relu,
                init_seed: 0,
            },
            sgd: SgdConfig::default(),
            data: DataSource::Blobs {
                train_samples: 2000,
                test_samples: 1000,
                spread: 1.0,
            },
            partition: PartitionSpec {
                num_clients: 10,
                scheme: PartitionScheme::IidUniform,
                seed: 0,
            },
            rounds: 60,
            unlearn_clients: 5,
            unlearn_ratio: 0.10,
            unlearn_target: UnlearnTarget::Samples,
            relabel_exclude_original: false,
            alpha: 0.2,
            beta: 0.20,
            l1_fraction: 0.75,
            l1_scope: MaskScope::Global,
            selective_mask: MaskOptions::default(),
            unlearn_weighting: UnlearnWeighting::ByUnlearnCount,
            aggregation: Aggregation::Unweighted,
            distribute_unlearned: false,
            unlearn_init: UnlearnInit::Shared,
            retrain_charge: RetrainCharge::PerRequest,
            channel: ChannelParams::default(),
            compute: ComputeModel::default(),
            field_size_m: 10_000.0,
            drone_height_m: 100.0,
            tx_power_w: 3.0,
            master_seed: 2025,
            seeds: 5,
            arms: Arm::ALL.to_vec(),
        }
    }
}

impl ExperimentConfig {
    /// Constants of the published simulation setup: 50 drones, 200 rounds,
    /// SGD with η = 0.01, λ = 4e-5, batch 32, two local episodes, β = 0.2,
    /// and the radio parameters. The model and data stay desk-sized.
    pub fn published_setup() -> Self {
        let mut cfg = Self::default();
        cfg.partition.num_clients = 50;
        cfg.rounds = 200;
        cfg.sgd = SgdConfig {
            learning_rate: 1e-2,
            weight_decay: 4e-5,
            batch_size: 32,
            local_episodes: 2,
        };
        cfg.data = DataSource::Blobs {
            train_samples: 10_000,
            test_samples: 2_000,
            spread: 1.0,
        };
        cfg.unlearn_clients = 5;
        cfg.unlearn_ratio = 0.10;
        cfg.beta = 0.20;
        cfg.alpha = 0.2;
        cfg.channel = ChannelParams::default();
        cfg.field_size_m = 10_000.0;
        cfg.drone_height_m = 100.0;
        cfg.tx_power_w = 3.0;
        cfg
    }

    /// Read a JSON or TOML file (by extension); missing fields take their
    /// default values.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_over(&Self::default(), path)
    }

    /// Read a JSON or TOML file whose fields override `base`. Tables merge
    /// recursively, so a file may set a single nested field.
    pub fn load_over(base: &Self, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let file: serde_json::Value = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)?,
            _ => serde_json::from_str(&text)?,
        };
        let mut merged = serde_json::to_value(base)?;
        merge(&mut merged, file);
        Ok(serde_json::from_value(merged)?)
    }

    /// Fill values that depend on other fields, such as the modelled FLOPs
    /// per sample, so the written config reproduces the run exactly.
    pub fn resolved(mut self) -> Self {
        if let ComputeModel::Modeled {
            flops_per_sample, ..
        } = &mut self.compute
        {
            if *flops_per_sample == 0.0 {
                // Forward plus backward pass, two FLOPs per multiply-add.
                *flops_per_sample = 6.0 * self.model.param_count() as f64;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sgd.validate()?;
        self.channel.validate()?;
        self.compute.validate()?;
        let k = self.partition.num_clients;
        if k == 0 {
            return Err(Error::InvalidConfig("num_clients must be >= 1".into()));
        }
        if self.unlearn_clients > k {
            return Err(Error::InvalidConfig(format!(
                "unlearn_clients {} exceeds num_clients {k}",
                self.unlearn_clients
            )));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be >= 1".into()));
        }
        if !(self.unlearn_ratio > 0.0 && self.unlearn_ratio < 1.0) {
            return Err(Error::OutOfRange(format!(
                "unlearn_ratio {} not in (0, 1)",
                self.unlearn_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::OutOfRange(format!(
                "alpha {} not in [0, 1]",
                self.alpha
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::OutOfRange(format!(
                "beta {} not in (0, 1]",
                self.beta
            )));
        }
        if !(0.0..1.0).contains(&self.l1_fraction) {
            return Err(Error::OutOfRange(format!(
                "l1_fraction {} not in [0, 1)",
                self.l1_fraction
            )));
        }
        if let UnlearnTarget::Class { class } = self.unlearn_target {
            if class >= self.model.num_classes {
                return Err(Error::OutOfRange(format!("unlearn class {class}")));
            }
        }
        for (name, v) in [
            ("field_size_m", self.field_size_m),
            ("drone_height_m", self.drone_height_m),
            ("tx_power_w", self.tx_power_w),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        if let DataSource::Blobs {
            train_samples,
            test_samples,
            spread,
        } = self.data
        {
            if train_samples < k {
                return Err(Error::InvalidConfig(format!(
                    "{train_samples} training samples for {k} clients"
                )));
            }
            if test_samples == 0 {
                return Err(Error::InvalidConfig("test_samples must be >= 1".into()));
            }
            if !(spread.is_finite() && spread >= 0.0) {
                return Err(Error::InvalidConfig("spread must be >= 0".into()));
            }
        }
        if self.seeds == 0 {
            return Err(Error::InvalidConfig("seeds must be >= 1".into()));
        }
        if self.arms.is_empty() {
            return Err(Error::InvalidConfig("no arms selected".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    use serde_json::Value;
    match (base, over) {
        // Tagged enums switch variant wholesale when the tag changes.
        (Value::Object(b), Value::Object(o))
            if ["kind", "mode"]
                .iter()
                .all(|t| o.get(*t).is_none() || o.get(*t) == b.get(*t)) =>
        {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::published_setup().validate().unwrap();
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: ExperimentConfig = toml::from_str("rounds = 7\nalpha = 0.3\n").unwrap();
        assert_eq!(cfg.rounds, 7);
        assert_eq!(cfg.alpha, 0.3);
        assert_eq!(cfg.partition.num_clients, 10);
    }

    #[test]
    fn file_overrides_merge_into_base() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "[partition]\nnum_clients = 12\n[data]\nspread = 2.0\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::load_over(&ExperimentConfig::published_setup(), &path).unwrap();
        assert_eq!(cfg.partition.num_clients, 12);
        assert_eq!(cfg.rounds, 200);
        assert_eq!(
            cfg.data,
            DataSource::Blobs {
                train_samples: 10_000,
                test_samples: 2_000,
                spread: 2.0
            }
        );

        let json = dir.path().join("c.json");
        std::fs::write(
            &json,
            r#"{"data": {"kind": "csv", "train": "a.csv", "test": "b.csv"}}"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&json).unwrap();
        assert!(matches!(cfg.data, DataSource::Csv { .. }));
        std::fs::write(&json, r#"{"rounds": "many"}"#).unwrap();
        assert!(ExperimentConfig::load(&json).unwrap_err().is_config_error());
    }

    #[test]
    fn resolved_config_round_trips_through_json() {
        let cfg = ExperimentConfig::default().resolved();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        match cfg.compute {
            ComputeModel::Modeled {
                flops_per_sample, ..
            } => assert_eq!(flops_per_sample, 6.0 * 676.0),
            ComputeModel::Measured => unreachable!(),
        }
    }

    #[test]
    fn invalid_values_rejected() {
        let cfg = ExperimentConfig {
            unlearn_clients: 11,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            alpha: 1.5,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig {
            l1_fraction: 1.0,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!("nope".parse::<Arm>().is_err());
    }
}
