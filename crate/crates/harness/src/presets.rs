//! Named experiment configs.
//!
//! Every Table 1 cell exists at full scale (200 rounds, full data) and at
//! desk scale (`-desk`: 50 rounds, CIFAR subsampled). Desk presets shrink
//! rounds and data only; α, β, E and the partition mode are unchanged.

use fmlsim_core::federation::Strategy;
use fmlsim_core::models::{Architecture, ModelSpec};
use fmlsim_core::partition::PartitionMode;

use crate::config::{DatasetConfig, ExperimentConfig};

#[derive(Clone, Debug)]
pub struct Preset {
    pub name: String,
    pub description: String,
    pub config: ExperimentConfig,
}

const FULL_ROUNDS: usize = 200;
const DESK_ROUNDS: usize = 50;
const CLIENTS: usize = 5;

#[derive(Clone, Copy)]
enum Data {
    Mnist,
    Cifar10,
    Cifar100,
}

impl Data {
    fn name(self) -> &'static str {
        match self {
            Data::Mnist => "mnist",
            Data::Cifar10 => "cifar10",
            Data::Cifar100 => "cifar100",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Data::Mnist => "MNIST",
            Data::Cifar10 => "CIFAR10",
            Data::Cifar100 => "CIFAR100",
        }
    }

    fn config(self, desk: bool) -> DatasetConfig {
        let (train_limit, test_limit) = match (self, desk) {
            (Data::Mnist, _) | (_, false) => (None, None),
            (_, true) => (Some(10_000), Some(2_000)),
        };
        match self {
            Data::Mnist => DatasetConfig::Mnist { train_limit, test_limit },
            Data::Cifar10 => DatasetConfig::Cifar10 { train_limit, test_limit },
            Data::Cifar100 => DatasetConfig::Cifar100 { train_limit, test_limit },
        }
    }

    /// Shards per client at Non-IID levels 1, 2, 3.
    fn shards(self, level: usize) -> usize {
        let base = [6, 4, 2][level - 1];
        match self {
            Data::Cifar100 => base * 10,
            _ => base,
        }
    }
}

/// Table 1 columns.
const COLUMNS: [(Data, Architecture); 6] = [
    (Data::Mnist, Architecture::Mlp),
    (Data::Mnist, Architecture::LeNet5),
    (Data::Cifar10, Architecture::Cnn1),
    (Data::Cifar10, Architecture::Cnn2),
    (Data::Cifar100, Architecture::Cnn1),
    (Data::Cifar100, Architecture::Cnn2),
];

const METHODS: [Strategy; 3] = [Strategy::FedAvg, Strategy::FedProx, Strategy::Fml];

/// Reported global top-1 accuracy (%), indexed `[setting][method][column]`
/// with settings IID, Non-IID(1), (2), (3).
const TABLE1: [[[f64; 6]; 3]; 4] = [
    [
        [98.44, 99.29, 85.90, 87.49, 56.11, 60.88],
        [98.14, 99.13, 83.91, 86.15, 32.41, 59.23],
        [98.49, 99.37, 85.93, 87.41, 57.11, 62.50],
    ],
    [
        [97.40, 98.92, 80.41, 82.64, 53.77, 57.76],
        [97.35, 98.75, 77.46, 80.88, 47.83, 55.60],
        [97.70, 99.07, 80.86, 82.69, 54.21, 59.77],
    ],
    [
        [96.84, 98.67, 78.85, 81.17, 50.86, 56.82],
        [96.98, 98.50, 76.53, 78.87, 45.46, 55.34],
        [97.00, 98.71, 78.64, 80.85, 52.92, 55.93],
    ],
    [
        [90.46, 96.45, 63.22, 64.12, 41.48, 50.36],
        [80.03, 87.55, 58.07, 62.01, 41.29, 49.51],
        [93.77, 96.70, 62.42, 66.75, 46.30, 51.86],
    ],
];

fn setting_name(level: usize) -> String {
    match level {
        0 => "iid".into(),
        l => format!("noniid{l}"),
    }
}

fn setting_label(level: usize) -> String {
    match level {
        0 => "IID".into(),
        l => format!("Non-IID ({l})"),
    }
}

fn method_label(s: Strategy) -> &'static str {
    match s {
        Strategy::FedAvg => "FedAvg",
        Strategy::FedProx => "FedProx",
        Strategy::Fml => "FML",
    }
}

fn arch_label(a: Architecture) -> &'static str {
    match a {
        Architecture::Mlp => "MLP",
        Architecture::LeNet5 => "LeNet5",
        Architecture::Cnn1 => "CNN1",
        Architecture::Cnn2 => "CNN2",
        Architecture::Custom => "custom",
    }
}

fn scale(name: String, desk: bool) -> String {
    if desk { format!("{name}-desk") } else { name }
}

fn scale_note(desk: bool, data: Data) -> &'static str {
    match (desk, data) {
        (false, _) => "full scale, 200 rounds",
        (true, Data::Mnist) => "desk scale, 50 rounds",
        (true, _) => "desk scale, 50 rounds, 10000 train / 2000 test samples",
    }
}

fn table1_presets(out: &mut Vec<Preset>) {
    for (col, &(data, arch)) in COLUMNS.iter().enumerate() {
        for level in 0..4 {
            for (m, &strategy) in METHODS.iter().enumerate() {
                for desk in [false, true] {
                    let ds = data.config(desk);
                    let mut cfg = ExperimentConfig::new(ds.clone(), CLIENTS, strategy);
                    cfg.model = Some(ModelSpec::new(arch, ds.sample_shape(), ds.classes()));
                    if level > 0 {
                        cfg.partition.mode = PartitionMode::NonIid(data.shards(level));
                    }
                    cfg.hp.rounds = if desk { DESK_ROUNDS } else { FULL_ROUNDS };
                    let name = scale(
                        format!("{}-{}-{}-{}", data.name(), arch.name(), setting_name(level), strategy.name()),
                        desk,
                    );
                    cfg.output = Some(format!("results/{name}.csv").into());
                    let description = format!(
                        "Table 1 cell {} / {} / {} / {} (reported {:.2}%), K=5, E=5, {}",
                        data.label(),
                        arch_label(arch),
                        setting_label(level),
                        method_label(strategy),
                        TABLE1[level][m][col],
                        scale_note(desk, data),
                    );
                    out.push(Preset {
                        name,
                        description,
                        config: cfg,
                    });
                }
            }
        }
    }
}

/// Personalized-vs-global comparison on private validate sets (Fig. 3),
/// for FML and both baselines on MNIST MLP Non-IID(3).
fn dh_presets(out: &mut Vec<Preset>) {
    for strategy in METHODS {
        for desk in [false, true] {
            let mut cfg = ExperimentConfig::new(DatasetConfig::mnist(), CLIENTS, strategy);
            cfg.partition.mode = PartitionMode::NonIid(2);
            cfg.hp.rounds = if desk { DESK_ROUNDS } else { FULL_ROUNDS };
            cfg.report.global_validate = true;
            let name = scale(format!("mnist-mlp-dh-{}", strategy.name()), desk);
            cfg.output = Some(format!("results/{name}.csv").into());
            out.push(Preset {
                description: format!(
                    "Fig. 3 data heterogeneity, {} on MNIST MLP Non-IID (3), private validate accuracy, {}",
                    method_label(strategy),
                    scale_note(desk, Data::Mnist)
                ),
                name,
                config: cfg,
            });
        }
    }
}

fn mixed_models(ds: &DatasetConfig) -> Vec<ModelSpec> {
    let shape = ds.sample_shape();
    let classes = ds.classes();
    [
        Architecture::Mlp,
        Architecture::LeNet5,
        Architecture::Cnn1,
        Architecture::Cnn2,
        Architecture::Cnn2,
    ]
    .into_iter()
    .map(|a| ModelSpec::new(a, shape.clone(), classes))
    .collect()
}

/// Global LeNet5, personalized 1xMLP, 1xLeNet5, 1xCNN1, 2xCNN2 (Fig. 4).
fn mh_presets(out: &mut Vec<Preset>) {
    let cases = [
        (
            "cifar10-mh-fml",
            DatasetConfig::Cifar10 { train_limit: None, test_limit: None },
            FULL_ROUNDS,
            "full scale, 200 rounds",
        ),
        (
            "cifar10-mh-fml-desk",
            DatasetConfig::Cifar10 { train_limit: Some(5_000), test_limit: Some(1_000) },
            20,
            "desk scale, 20 rounds, 5000 train / 1000 test samples",
        ),
        (
            "mnist-mh-fml-desk",
            DatasetConfig::Mnist { train_limit: Some(2_000), test_limit: Some(1_000) },
            10,
            "MNIST subset stand-in, 10 rounds, 2000 train / 1000 test samples",
        ),
    ];
    for (name, ds, rounds, note) in cases {
        let mut cfg = ExperimentConfig::new(ds.clone(), CLIENTS, Strategy::Fml);
        cfg.model = Some(ModelSpec::new(Architecture::LeNet5, ds.sample_shape(), ds.classes()));
        cfg.client_models = mixed_models(&ds);
        cfg.hp.rounds = rounds;
        cfg.output = Some(format!("results/{name}.csv").into());
        out.push(Preset {
            name: name.into(),
            description: format!(
                "Fig. 4 model heterogeneity, global LeNet5, clients MLP, LeNet5, CNN1, 2xCNN2, IID, {note}"
            ),
            config: cfg,
        });
    }
}

/// Layer index right after CNN2's flatten: the conv stack is the trunk.
pub const CNN2_TRUNK_SPLIT: usize = 10;

/// Two clients with 10- and 100-class tasks sharing the CNN2 conv trunk,
/// personalized LeNet5 and CNN1 (Fig. 5).
fn oh_presets(out: &mut Vec<Preset>) {
    let cifar = |desk: bool| {
        let (train_limit, test_limit) = if desk { (Some(5_000), Some(1_000)) } else { (None, None) };
        vec![
            DatasetConfig::Cifar10 { train_limit, test_limit },
            DatasetConfig::Cifar100 { train_limit, test_limit },
        ]
    };
    let cases = [
        ("cifar-oh-fml", cifar(false), FULL_ROUNDS, "full scale, 200 rounds"),
        (
            "cifar-oh-fml-desk",
            cifar(true),
            20,
            "desk scale, 20 rounds, 5000 train / 1000 test samples per task",
        ),
        (
            "synth-oh-fml-desk",
            synth_class_split(),
            20,
            "class-split synthetic stand-in on 3x16x16 inputs, lr 0.03, 20 rounds",
        ),
    ];
    for (name, pools, rounds, note) in cases {
        let shape = pools[0].sample_shape();
        let mut cfg = ExperimentConfig::new(pools[0].clone(), 2, Strategy::Fml);
        cfg.model = Some(ModelSpec::new(Architecture::Cnn2, shape.clone(), pools[0].classes()).with_split(CNN2_TRUNK_SPLIT));
        cfg.client_models = vec![
            ModelSpec::new(Architecture::LeNet5, shape.clone(), pools[0].classes()),
            ModelSpec::new(Architecture::Cnn1, shape, pools[1].classes()),
        ];
        cfg.client_datasets = pools;
        cfg.hp.rounds = rounds;
        if name.starts_with("synth") {
            cfg.hp.lr = 0.03;
        }
        cfg.output = Some(format!("results/{name}.csv").into());
        out.push(Preset {
            name: name.into(),
            description: format!(
                "Fig. 5 objective heterogeneity, 10- and 100-class clients on a shared CNN2 conv trunk with adaptors, {note}"
            ),
            config: cfg,
        });
    }
}

/// 10- and 100-class synthetic tasks drawn from disjoint prototypes of one
/// generator.
pub fn synth_class_split() -> Vec<DatasetConfig> {
    let task = |classes: usize, class_offset: usize, train: usize, test: usize| DatasetConfig::Synthetic {
        seed: 11,
        classes,
        sample_shape: vec![3, 16, 16],
        spread: 1.0,
        separation: 0.8,
        class_offset,
        latent_dim: None,
        train,
        test,
    };
    vec![task(10, 0, 1000, 500), task(100, 10, 3000, 1000)]
}

/// Cheap synthetic runs for smoke tests (Fig. 2 / Fig. 3 trajectories).
fn synth_presets(out: &mut Vec<Preset>) {
    for (strategy, mode, setting) in [
        (Strategy::FedAvg, PartitionMode::Iid, "iid"),
        (Strategy::FedAvg, PartitionMode::NonIid(2), "noniid3"),
        (Strategy::FedProx, PartitionMode::NonIid(2), "noniid3"),
        (Strategy::Fml, PartitionMode::NonIid(2), "noniid3"),
    ] {
        let ds = DatasetConfig::Synthetic {
            seed: 3,
            classes: 10,
            sample_shape: vec![1, 1, 32],
            spread: 1.0,
            separation: 0.5,
            class_offset: 0,
            latent_dim: None,
            train: 2000,
            test: 500,
        };
        let mut cfg = ExperimentConfig::new(ds, CLIENTS, strategy);
        cfg.partition.mode = mode;
        cfg.hp.rounds = 5;
        cfg.hp.local_epochs = 2;
        cfg.hp.batch_size = 32;
        cfg.report.global_validate = true;
        let name = format!("synth-mlp-{setting}-{}-desk", strategy.name());
        cfg.output = Some(format!("results/{name}.csv").into());
        out.push(Preset {
            description: format!(
                "Fig. 2 / Fig. 3 trajectory smoke run, {} on 10-class synthetic blobs, {}, 5 rounds, E=2",
                method_label(strategy),
                if setting == "iid" { "IID" } else { "Non-IID (3)" }
            ),
            name,
            config: cfg,
        });
    }
}

pub fn presets() -> Vec<Preset> {
    let mut out = Vec::new();
    table1_presets(&mut out);
    dh_presets(&mut out);
    mh_presets(&mut out);
    oh_presets(&mut out);
    synth_presets(&mut out);
    out
}

pub fn preset(name: &str) -> Option<Preset> {
    presets().into_iter().find(|p| p.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_configs_valid() {
        let all = presets();
        let mut names: Vec<&str> = all.iter().map(|p| p.name.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), all.len());
        for p in &all {
            p.config.clone().resolve().unwrap_or_else(|e| panic!("{}: {e}", p.name));
        }
    }

    #[test]
    fn every_preset_names_an_anchor() {
        for p in presets() {
            assert!(
                p.description.contains("Table 1") || p.description.contains("Fig."),
                "{}: {}",
                p.name,
                p.description
            );
        }
    }

    #[test]
    fn desk_keeps_the_phenomenon() {
        for p in presets().iter().filter(|p| p.name.ends_with("-desk")) {
            let Some(full) = preset(p.name.trim_end_matches("-desk")) else {
                continue;
            };
            let (a, b) = (&full.config, &p.config);
            assert_eq!(a.hp.distill, b.hp.distill, "{}", p.name);
            assert_eq!(a.hp.local_epochs, b.hp.local_epochs, "{}", p.name);
            assert_eq!(a.partition.mode, b.partition.mode, "{}", p.name);
            assert_eq!(a.strategy, b.strategy, "{}", p.name);
            assert!(b.hp.rounds < a.hp.rounds, "{}", p.name);
        }
    }

    #[test]
    fn table1_has_every_cell() {
        let n = presets().iter().filter(|p| p.description.starts_with("Table 1")).count();
        assert_eq!(n, 6 * 4 * 3 * 2);
        assert!(preset("mnist-mlp-iid-fedavg-desk").is_some());
        assert!(preset("cifar100-cnn2-noniid3-fml").is_some());
    }
}
