use std::fs;

use fmlsim::config::DEFAULT_OUTPUT;
use fmlsim::{parse_config, parse_config_str, presets, HarnessError};
use fmlsim_core::federation::{Hyperparams, Merge, Strategy};
use fmlsim_core::models::Architecture;

fn err_path(text: &str) -> String {
    match parse_config_str(text) {
        Err(HarnessError::Config { path, .. }) => path,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn minimal_file_resolves_every_default() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("min.json");
    fs::write(
        &path,
        r#"{"dataset": {"name": "cifar10"}, "strategy": "fml", "partition": {"clients": 5}}"#,
    )
    .unwrap();
    let cfg = parse_config(&path).unwrap();
    assert_eq!(cfg.merge, Some(Merge::Uniform));
    let model = cfg.model.as_ref().unwrap();
    assert_eq!((model.arch, model.classes), (Architecture::Cnn1, 10));
    assert_eq!(model.input_shape, vec![3, 32, 32]);
    assert_eq!(cfg.hp, Hyperparams::default());
    assert_eq!(cfg.output.as_deref(), Some(std::path::Path::new(DEFAULT_OUTPUT)));

    let json = cfg.to_json().unwrap();
    for key in ["\"lr\"", "\"momentum\"", "\"weight_decay\"", "\"alpha\"", "\"temperature\"", "\"merge\""] {
        assert!(json.contains(key), "{key} missing from resolved config");
    }
}

#[test]
fn resolved_configs_round_trip() {
    for p in presets() {
        let resolved = p.config.resolve().unwrap();
        let again = parse_config_str(&resolved.to_json().unwrap()).unwrap();
        assert_eq!(again, resolved, "{}", p.name);
    }
}

#[test]
fn mixed_class_counts_need_a_split() {
    let text = r#"{
        "dataset": {"name": "synthetic", "seed": 1, "classes": 10, "sample_shape": [1, 1, 8]},
        "client_datasets": [
            {"name": "synthetic", "seed": 1, "classes": 10, "sample_shape": [1, 1, 8]},
            {"name": "synthetic", "seed": 1, "classes": 4, "sample_shape": [1, 1, 8], "class_offset": 10}
        ],
        "strategy": "fml",
        "partition": {"clients": 2}
    }"#;
    assert_eq!(err_path(text), "model.split");
}

#[test]
fn list_lengths_must_match_clients() {
    let text = r#"{
        "dataset": {"name": "mnist"},
        "strategy": "fml",
        "partition": {"clients": 3},
        "client_models": [{"arch": "mlp", "input_shape": [1, 28, 28], "classes": 10}]
    }"#;
    assert_eq!(err_path(text), "client_models");
}

#[test]
fn constraint_violations_name_their_key() {
    let base = |extra: &str| format!(r#"{{"dataset": {{"name": "mnist"}}, "partition": {{"clients": 5}}, {extra}}}"#);
    assert_eq!(err_path(&base(r#""strategy": "fedavg", "hp": {"local_epochs": 0}"#)), "hp.local_epochs");
    assert_eq!(err_path(&base(r#""strategy": "fml", "merge": "weighted""#)), "merge");
    assert_eq!(err_path(&base(r#""strategy": "fedprox", "hp": {"mu": -1.0}"#)), "hp");
    assert_eq!(
        err_path(&base(
            r#""strategy": "fedavg", "model": {"arch": "cnn2", "input_shape": [1, 28, 28], "classes": 10, "split": 10}"#
        )),
        "model.split"
    );
    assert_eq!(
        err_path(&base(r#""strategy": "fedavg", "model": {"arch": "mlp", "input_shape": [3, 32, 32], "classes": 10}"#)),
        "model.input_shape"
    );
    assert_eq!(
        err_path(&base(
            r#""strategy": "fedavg", "client_models": [{"arch": "mlp", "input_shape": [1, 28, 28], "classes": 10}, {"arch": "mlp", "input_shape": [1, 28, 28], "classes": 10}, {"arch": "mlp", "input_shape": [1, 28, 28], "classes": 10}, {"arch": "mlp", "input_shape": [1, 28, 28], "classes": 10}, {"arch": "mlp", "input_shape": [1, 28, 28], "classes": 10}]"#
        )),
        "client_models"
    );
}

#[test]
fn parse_errors_name_their_key() {
    assert_eq!(
        err_path(r#"{"dataset": {"name": "mnist", "limit": 5}, "strategy": "fml", "partition": {"clients": 5}}"#),
        "dataset"
    );
    assert_eq!(
        err_path(r#"{"dataset": {"name": "svhn"}, "strategy": "fml", "partition": {"clients": 5}}"#),
        "dataset.name"
    );
    assert_eq!(
        err_path(r#"{"dataset": {"name": "mnist"}, "strategy": "fml", "partition": {"clients": 5, "mode": "skewed"}}"#),
        "partition.mode"
    );
    assert_eq!(
        err_path(r#"{"dataset": {"name": "mnist"}, "strategy": "fml", "partition": {"clients": "five"}}"#),
        "partition.clients"
    );
    let missing = parse_config_str(r#"{"dataset": {"name": "mnist"}, "strategy": "fml"}"#).unwrap_err();
    assert!(missing.to_string().contains("partition"), "{missing}");
}

#[test]
fn seed_override_sets_both_streams() {
    let cfg = parse_config_str(r#"{"dataset": {"name": "mnist"}, "strategy": "fedavg", "partition": {"clients": 5}}"#)
        .unwrap()
        .with_seed(9);
    assert_eq!((cfg.hp.seed, cfg.partition.seed), (9, 9));
    assert_eq!(cfg.federation().strategy, Strategy::FedAvg);
}
