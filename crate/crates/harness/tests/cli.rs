use std::path::PathBuf;
use std::process::{Command, Output};

fn fmlsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmlsim"))
        .args(args)
        .env("FMLSIM_DATA_DIR", data_root())
        .output()
        .expect("spawn fmlsim")
}

fn data_root() -> PathBuf {
    std::env::var_os("FMLSIM_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let o = fmlsim(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn presets_list_and_show() {
    let o = fmlsim(&["presets", "list"]);
    assert!(o.status.success());
    let list = String::from_utf8(o.stdout).unwrap();
    assert!(list.lines().any(|l| l.starts_with("mnist-mlp-iid-fedavg-desk\tTable 1")));
    assert!(list.lines().any(|l| l.starts_with("cifar10-mh-fml\tFig. 4")));

    let o = fmlsim(&["presets", "show", "synth-mlp-iid-fedavg-desk"]);
    assert!(o.status.success());
    let cfg: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(cfg["strategy"], "fedavg");

    let o = fmlsim(&["presets", "show", "no-such-preset"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_synthetic_preset_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.csv");
    let o = fmlsim(&[
        "run",
        "synth-mlp-noniid3-fml-desk",
        "--seed",
        "4",
        "--rounds",
        "2",
        "--threads",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("round,entity,model,split,accuracy,loss\n"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("2,global,global,test,")).count(), 1);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["hp"]["seed"], 4);
    assert_eq!(meta["config"]["partition"]["seed"], 4);
}

#[test]
fn run_config_file_and_reject_bad_one() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    let out = dir.path().join("good.csv");
    std::fs::write(
        &good,
        format!(
            r#"{{"dataset": {{"name": "synthetic", "seed": 2, "classes": 3, "sample_shape": [1, 1, 4], "train": 60, "test": 30}},
                "strategy": "fedprox", "partition": {{"clients": 2}}, "hp": {{"rounds": 1, "local_epochs": 1}},
                "output": "{}"}}"#,
            out.display()
        ),
    )
    .unwrap();
    let o = fmlsim(&["run", "--config", good.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"dataset": {"name": "mnist"}, "strategy": "fml", "partition": {"clients": 5}, "hp": {"local_epochs": 0}}"#).unwrap();
    let o = fmlsim(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hp.local_epochs"), "{}", stderr(&o));
}

#[test]
fn mnist_desk_preset_runs() {
    if !data_root().join("mnist/train-images-idx3-ubyte").exists() {
        eprintln!("MNIST not found; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.csv");
    let o = fmlsim(&["run", "mnist-mlp-iid-fedavg-desk", "--rounds", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let row = csv.lines().nth(1).unwrap();
    let acc: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
    assert!(row.starts_with("1,global,global,test,") && acc > 0.8, "{row}");

    let o = fmlsim(&["partition", "inspect", "mnist-mlp-noniid3-fedavg-desk"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let hist = String::from_utf8(o.stdout).unwrap();
    // Two classes per client in train and validate.
    assert_eq!(hist.lines().count(), 1 + 5 * 2 * 2);
}

#[test]
fn gradcheck_subcommand_passes() {
    let o = fmlsim(&["gradcheck", "--seeds", "1", "--params", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let err = stderr(&o);
    for arch in ["mlp", "lenet5", "cnn1", "cnn2"] {
        assert!(err.contains(&format!("{arch}: max relative error")), "{err}");
    }
}
