//! JSON experiment configs.
//!
//! Parsing is strict: unknown keys are rejected and every error carries the
//! key path it refers to. The parsed config is resolved, meaning every
//! optional field is filled with its default, so serializing it again yields
//! a complete record of the run.

use std::fs;
use std::path::{Path, PathBuf};

use fmlsim_core::datasets::{self, Dataset, SynthSpec};
use fmlsim_core::federation::{FederationConfig, Hyperparams, Merge, Strategy};
use fmlsim_core::models::{Architecture, ModelSpec};
use fmlsim_core::partition::PartitionMode;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Mnist {
        /// Keep only the first `n` training samples.
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Cifar10 {
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Cifar100 {
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Gaussian class blobs, see [`SynthSpec`].
    Synthetic {
        seed: u64,
        classes: usize,
        sample_shape: Vec<usize>,
        #[serde(default = "one")]
        spread: f64,
        #[serde(default = "one")]
        separation: f64,
        #[serde(default)]
        class_offset: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        latent_dim: Option<usize>,
        #[serde(default = "synth_train")]
        train: usize,
        #[serde(default = "synth_test")]
        test: usize,
    },
}

fn one() -> f64 {
    1.0
}

fn synth_train() -> usize {
    2000
}

fn synth_test() -> usize {
    500
}

impl DatasetConfig {
    pub fn mnist() -> Self {
        DatasetConfig::Mnist {
            train_limit: None,
            test_limit: None,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DatasetConfig::Mnist { .. } | DatasetConfig::Cifar10 { .. } => 10,
            DatasetConfig::Cifar100 { .. } => 100,
            DatasetConfig::Synthetic { classes, .. } => *classes,
        }
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            DatasetConfig::Mnist { .. } => vec![1, 28, 28],
            DatasetConfig::Cifar10 { .. } | DatasetConfig::Cifar100 { .. } => vec![3, 32, 32],
            DatasetConfig::Synthetic { sample_shape, .. } => sample_shape.clone(),
        }
    }

    /// Model used when the config names none: MLP for MNIST and synthetic
    /// data, CNN1 for CIFAR.
    pub fn default_model(&self) -> ModelSpec {
        let arch = match self {
            DatasetConfig::Cifar10 { .. } | DatasetConfig::Cifar100 { .. } => Architecture::Cnn1,
            _ => Architecture::Mlp,
        };
        ModelSpec::new(arch, self.sample_shape(), self.classes())
    }

    /// Loads `(train, test)`, reading files below `root`.
    pub fn load(&self, root: &Path) -> Result<(Dataset, Dataset)> {
        let (pair, train_limit, test_limit) = match self {
            DatasetConfig::Mnist { train_limit, test_limit } => (
                datasets::load_mnist(&root.join(datasets::MNIST_DIR))?,
                *train_limit,
                *test_limit,
            ),
            DatasetConfig::Cifar10 { train_limit, test_limit } => (
                datasets::load_cifar10(&root.join(datasets::CIFAR10_DIR))?,
                *train_limit,
                *test_limit,
            ),
            DatasetConfig::Cifar100 { train_limit, test_limit } => (
                datasets::load_cifar100(&root.join(datasets::CIFAR100_DIR))?,
                *train_limit,
                *test_limit,
            ),
            DatasetConfig::Synthetic {
                seed,
                classes,
                sample_shape,
                spread,
                separation,
                class_offset,
                latent_dim,
                train,
                test,
            } => {
                let spec = SynthSpec {
                    seed: *seed,
                    classes: *classes,
                    sample_shape: sample_shape.clone(),
                    spread: *spread,
                    separation: *separation,
                    class_offset: *class_offset,
                    latent_dim: *latent_dim,
                };
                (spec.train_test(*train, *test)?, None, None)
            }
        };
        let (mut train, mut test) = pair;
        if let Some(n) = train_limit {
            train = train.take(n)?;
        }
        if let Some(n) = test_limit {
            test = test.take(n)?;
        }
        Ok((train, test))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    /// `"iid"` or `{"noniid": p}`.
    #[serde(default = "iid")]
    pub mode: PartitionMode,
    #[serde(default)]
    pub seed: u64,
}

fn iid() -> PartitionMode {
    PartitionMode::Iid
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Evaluate each meme on its client's validate set.
    #[serde(default)]
    pub meme: bool,
    /// Evaluate the global model on every validate set.
    #[serde(default)]
    pub global_validate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    /// One dataset per client, for clients with different tasks. Clients
    /// naming the same dataset share it and are partitioned together.
    #[serde(default)]
    pub client_datasets: Vec<DatasetConfig>,
    pub partition: PartitionConfig,
    pub strategy: Strategy,
    #[serde(default)]
    pub merge: Option<Merge>,
    /// Global model. A `split` keeps only the trunk global.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    /// Personalized models, one per client (fml only).
    #[serde(default)]
    pub client_models: Vec<ModelSpec>,
    #[serde(default)]
    pub hp: Hyperparams,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

pub const DEFAULT_OUTPUT: &str = "results.csv";

impl ExperimentConfig {
    pub fn new(dataset: DatasetConfig, clients: usize, strategy: Strategy) -> Self {
        Self {
            dataset,
            client_datasets: Vec::new(),
            partition: PartitionConfig {
                clients,
                mode: PartitionMode::Iid,
                seed: 0,
            },
            strategy,
            merge: None,
            model: None,
            client_models: Vec::new(),
            hp: Hyperparams::default(),
            report: ReportConfig::default(),
            output: None,
        }
    }

    pub fn clients(&self) -> usize {
        self.partition.clients
    }

    /// Dataset of client `k`.
    pub fn client_dataset(&self, k: usize) -> &DatasetConfig {
        self.client_datasets.get(k).unwrap_or(&self.dataset)
    }

    pub fn model_spec(&self) -> ModelSpec {
        self.model.clone().unwrap_or_else(|| self.dataset.default_model())
    }

    pub fn merge_rule(&self) -> Merge {
        self.merge.unwrap_or_else(|| self.strategy.default_merge())
    }

    pub fn output_path(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }

    /// Sets both the training seed and the partition seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.hp.seed = seed;
        self.partition.seed = seed;
        self
    }

    /// Fills every optional field with its default and checks constraints.
    pub fn resolve(mut self) -> Result<Self> {
        self.merge = Some(self.merge_rule());
        self.model = Some(self.model_spec());
        self.output = Some(self.output_path());
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.partition.clients;
        if k == 0 {
            return Err(HarnessError::config("partition.clients", "need at least one client"));
        }
        if self.hp.local_epochs == 0 {
            return Err(HarnessError::config("hp.local_epochs", "must be at least 1"));
        }
        self.hp
            .validate()
            .map_err(|e| HarnessError::config("hp", e.to_string()))?;
        for (name, len) in [
            ("client_datasets", self.client_datasets.len()),
            ("client_models", self.client_models.len()),
        ] {
            if len != 0 && len != k {
                return Err(HarnessError::config(
                    name,
                    format!("expected 0 or {k} entries (one per client), got {len}"),
                ));
            }
        }
        let merge = self.merge_rule();
        if self.strategy == Strategy::Fml && merge != Merge::Uniform {
            return Err(HarnessError::config("merge", "fml merges memes uniformly"));
        }
        if !self.client_models.is_empty() && self.strategy != Strategy::Fml {
            return Err(HarnessError::config(
                "client_models",
                format!("per-client models need the fml strategy, not {}", self.strategy.name()),
            ));
        }

        let model = self.model_spec();
        model
            .layer_plan()
            .map_err(|e| HarnessError::config("model", e.to_string()))?;
        let trunk = model.split.is_some();
        if trunk && self.strategy != Strategy::Fml {
            return Err(HarnessError::config(
                "model.split",
                format!("a trunk split requires the fml strategy, not {}", self.strategy.name()),
            ));
        }

        let mut class_counts = Vec::with_capacity(k);
        for c in 0..k {
            let ds = self.client_dataset(c);
            let ds_path = if self.client_datasets.is_empty() {
                "dataset".to_string()
            } else {
                format!("client_datasets[{c}]")
            };
            if ds.sample_shape() != model.input_shape {
                return Err(HarnessError::config(
                    "model.input_shape",
                    format!("{:?} does not match {ds_path} samples {:?}", model.input_shape, ds.sample_shape()),
                ));
            }
            let classes = match self.client_models.get(c) {
                Some(spec) => {
                    let path = format!("client_models[{c}]");
                    spec.layer_plan()
                        .map_err(|e| HarnessError::config(path.clone(), e.to_string()))?;
                    if spec.input_shape != ds.sample_shape() {
                        return Err(HarnessError::config(
                            format!("{path}.input_shape"),
                            format!("{:?} does not match {ds_path} samples {:?}", spec.input_shape, ds.sample_shape()),
                        ));
                    }
                    if spec.split.is_some() {
                        return Err(HarnessError::config(
                            format!("{path}.split"),
                            "personalized models are never split",
                        ));
                    }
                    spec.classes
                }
                None => ds.classes(),
            };
            if classes != ds.classes() {
                return Err(HarnessError::config(
                    format!("client_models[{c}].classes"),
                    format!("{classes} classes but {ds_path} has {}", ds.classes()),
                ));
            }
            class_counts.push(classes);
        }
        let mixed = class_counts.iter().any(|&c| c != class_counts[0]);
        if !trunk && (mixed || class_counts[0] != model.classes) {
            return Err(HarnessError::config(
                "model.split",
                format!(
                    "clients have {class_counts:?} classes and the global model {}; \
                     differing class counts need a trunk split",
                    model.classes
                ),
            ));
        }
        Ok(())
    }

    /// The core simulation config this experiment runs.
    pub fn federation(&self) -> FederationConfig {
        let mut cfg = FederationConfig::new(self.strategy, self.model_spec(), self.hp.clone());
        cfg.merge = self.merge_rule();
        cfg.report_meme = self.report.meme;
        cfg.report_global_validate = self.report.global_validate;
        cfg
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parses and resolves a config from JSON text.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        HarnessError::config(path, e.into_inner().to_string())
    })?;
    cfg.resolve()
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_is_fully_defaulted() {
        let cfg = parse_config_str(r#"{"dataset": {"name": "mnist"}, "strategy": "fedavg", "partition": {"clients": 5}}"#)
            .unwrap();
        assert_eq!(cfg.merge, Some(Merge::Weighted));
        assert_eq!(cfg.model.as_ref().unwrap().arch, Architecture::Mlp);
        assert_eq!(cfg.hp, Hyperparams::default());
        assert_eq!(cfg.partition.mode, PartitionMode::Iid);
        assert_eq!(cfg.output, Some(PathBuf::from(DEFAULT_OUTPUT)));
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = parse_config_str(
            r#"{"dataset": {"name": "mnist"}, "strategy": "fml", "partition": {"clients": 5}, "hp": {"lr": 0.1, "epochs": 3}}"#,
        )
        .unwrap_err();
        let HarnessError::Config { path, message } = err else {
            panic!("{err}")
        };
        assert_eq!(path, "hp.epochs");
        assert!(message.contains("epochs"), "{message}");
    }

    #[test]
    fn bad_enum_names_its_path() {
        let err = parse_config_str(r#"{"dataset": {"name": "mnist"}, "strategy": "fedsgd", "partition": {"clients": 5}}"#)
            .unwrap_err();
        assert!(matches!(err, HarnessError::Config { ref path, .. } if path == "strategy"), "{err}");
    }
}
