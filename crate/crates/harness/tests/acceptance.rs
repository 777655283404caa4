//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default, including the MNIST training runs
//! (about an hour on one core). `FMLSIM_ACCEPTANCE_ONLY=2,3,10` selects a
//! subset. Failures are reported but only change the exit code when
//! `FMLSIM_ACCEPTANCE_STRICT=1`.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use fmlsim::report::render_csv;
use fmlsim::runner::{prepare, run, run_solo, Prepared};
use fmlsim::{preset, DatasetConfig, ExperimentConfig};
use fmlsim_core::datasets::{load_cifar100, load_mnist, Dataset, CIFAR100_DIR, MNIST_DIR};
use fmlsim_core::federation::{Entity, EvalSplit, Merge, Role, RoundRecord, RunReport, Simulation, Strategy};
use fmlsim_core::gradcheck::check_architecture;
use fmlsim_core::models::{build_model, split_model, Architecture};
use fmlsim_core::partition::{partition, ClientData, PartitionMode, PartitionSpec};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn data_root() -> PathBuf {
    std::env::var_os("FMLSIM_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn require_mnist() -> Result<PathBuf> {
    let root = data_root();
    ensure!(
        root.join(MNIST_DIR).join("train-images-idx3-ubyte").exists(),
        "MNIST not found under {}",
        root.display()
    );
    Ok(root)
}

fn preset_config(name: &str) -> Result<ExperimentConfig> {
    Ok(preset(name).with_context(|| format!("preset {name}"))?.config.resolve()?)
}

fn final_global(report: &RunReport) -> f64 {
    *report.global_accuracy().last().expect("at least one round")
}

fn std_dev(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Best local-validate accuracy over rounds, per client.
fn best_local(records: &[RoundRecord], clients: usize) -> Vec<f64> {
    (0..clients)
        .map(|k| {
            records
                .iter()
                .filter(|r| r.entity == Entity::Client(k) && r.model == Role::Local && r.split == EvalSplit::Validate)
                .map(|r| r.accuracy)
                .fold(0.0, f64::max)
        })
        .collect()
}

fn pct(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{:.2}", 100.0 * x)).collect::<Vec<_>>().join("/")
}

// 1
fn gradient_oracle() -> Result<Outcome> {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for arch in [Architecture::Mlp, Architecture::LeNet5, Architecture::Cnn1, Architecture::Cnn2] {
        let mut worst = 0.0f64;
        for seed in 0..3 {
            let r = check_architecture(arch, seed, 50)?;
            pass &= r.checked >= 50 && r.max_rel_error < 1e-4;
            worst = worst.max(r.max_rel_error);
        }
        parts.push(format!("{} {worst:.1e}", arch.name()));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(120);
    Ok(Outcome::new(
        pass,
        format!("max rel error {} over 3 seeds, bound 1e-4, {:.0} s of 120", parts.join(", "), elapsed.as_secs_f64()),
    ))
}

fn synthetic_iid(clients: usize, strategy: Strategy) -> ExperimentConfig {
    let ds = DatasetConfig::Synthetic {
        seed: 21,
        classes: 5,
        sample_shape: vec![1, 1, 16],
        spread: 1.0,
        separation: 0.7,
        class_offset: 0,
        latent_dim: None,
        train: 1000,
        test: 250,
    };
    let mut cfg = ExperimentConfig::new(ds, clients, strategy);
    cfg.hp.batch_size = 32;
    cfg
}

// 2
fn degeneration() -> Result<Outcome> {
    let start = Instant::now();
    let mut fml = synthetic_iid(5, Strategy::Fml);
    fml.hp.rounds = 3;
    fml.hp.local_epochs = 2;
    fml.hp.distill.alpha = 1.0;
    fml.hp.distill.beta = 1.0;
    let fml = fml.resolve()?;
    let mut avg = fml.clone();
    avg.strategy = Strategy::FedAvg;
    avg.merge = Some(Merge::Uniform);
    let avg = avg.resolve()?;

    let prepared = prepare(&fml, Path::new("."))?;
    let mut a = Simulation::<f64>::new(fml.federation(), &prepared.pools, prepared.setups.clone())?;
    let mut b = Simulation::<f64>::new(avg.federation(), &prepared.pools, prepared.setups.clone())?;
    let init = a.global().flatten_params();
    a.run_to_end()?;
    b.run_to_end()?;
    let (pa, pb) = (a.global().flatten_params(), b.global().flatten_params());
    ensure!(pa.len() == pb.len(), "parameter counts differ");
    let diff = pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let moved = pa != init;
    let elapsed = start.elapsed();
    Ok(Outcome::new(
        diff <= 1e-6 && moved && elapsed < Duration::from_secs(30),
        format!(
            "max |w_fml - w_fedavg_uniform| = {diff:.2e} over {} params after 3 rounds, bound 1e-6, {:.1} s of 30",
            pa.len(),
            elapsed.as_secs_f64()
        ),
    ))
}

fn check_partition(parts: &[ClientData], train: &Dataset, p: usize, no_overlap: bool) -> Result<()> {
    let mut owner = vec![usize::MAX; train.len()];
    let mut class_sets = Vec::new();
    for part in parts {
        for &i in &part.train {
            ensure!(owner[i] == usize::MAX, "train index {i} assigned twice");
            owner[i] = part.client;
        }
        let classes = part.train_classes(train);
        ensure!(
            classes.len() <= p,
            "client {} holds {} classes, more than p={p}",
            part.client,
            classes.len()
        );
        class_sets.push(classes);
    }
    if no_overlap {
        for (a, ca) in class_sets.iter().enumerate() {
            for cb in &class_sets[a + 1..] {
                ensure!(ca.iter().all(|c| !cb.contains(c)), "class overlap at p={p}");
            }
        }
    }
    Ok(())
}

/// CIFAR-100 binary files with 500 train / 100 test images per class.
fn cifar100_fixture(dir: &Path) -> Result<()> {
    let write = |name: &str, per_class: usize| -> Result<()> {
        let n = per_class * 100;
        let mut bytes = Vec::with_capacity(n * 3074);
        for i in 0..n {
            let fine = ((i * 37) % n) % 100;
            bytes.push((fine / 5) as u8);
            bytes.push(fine as u8);
            bytes.extend((0..3072).map(|j| ((i * 7 + j * 13) % 251) as u8));
        }
        std::fs::write(dir.join(name), bytes)?;
        Ok(())
    };
    write("train.bin", 500)?;
    write("test.bin", 100)
}

// 3
fn partition_invariants() -> Result<Outcome> {
    let root = require_mnist()?;
    let fixture = tempfile::tempdir()?;
    let cifar_dir = fixture.path().join(CIFAR100_DIR);
    std::fs::create_dir_all(&cifar_dir)?;
    cifar100_fixture(&cifar_dir)?;

    let start = Instant::now();
    let (mtrain, mtest) = load_mnist(&root.join(MNIST_DIR))?;
    let (ctrain, ctest) = load_cifar100(&cifar_dir)?;
    ensure!(ctrain.len() == 50_000 && ctest.len() == 10_000, "fixture sizes");
    for (train, test, ps) in [(&mtrain, &mtest, [2, 4, 6]), (&ctrain, &ctest, [20, 40, 60])] {
        for p in ps {
            let spec = PartitionSpec {
                clients: 5,
                mode: PartitionMode::NonIid(p),
                seed: 0,
            };
            let parts = partition(&spec, train, test)?;
            check_partition(&parts, train, p, p == ps[0])?;
        }
    }
    let elapsed = start.elapsed();
    Ok(Outcome::new(
        elapsed < Duration::from_secs(10),
        format!(
            "MNIST p=2/4/6 and CIFAR100-format fixture p=20/40/60: disjoint, <= p classes, no overlap at p=2/20, {:.1} s of 10",
            elapsed.as_secs_f64()
        ),
    ))
}

// 4
fn table1_anchor() -> Result<Outcome> {
    let root = require_mnist()?;
    let start = Instant::now();
    let cfg = preset_config("mnist-mlp-iid-fedavg-desk")?;
    ensure!(
        cfg.hp.rounds == 50 && cfg.hp.local_epochs == 5 && cfg.hp.batch_size == 128 && cfg.hp.lr == 0.01,
        "preset drifted from the desk budget"
    );
    let report = run(&cfg, &root, 1)?;
    let acc = final_global(&report);
    let elapsed = start.elapsed();
    Ok(Outcome::new(
        acc >= 0.97 && elapsed < Duration::from_secs(30 * 60),
        format!(
            "global test accuracy {:.2}% after 50 rounds (reported 98.44, bound 97.00), {:.0} s of 1800",
            100.0 * acc,
            elapsed.as_secs_f64()
        ),
    ))
}

struct DhRun {
    seed: u64,
    fedavg: RunReport,
    fml: RunReport,
}

/// MNIST MLP Non-IID(3) desk runs for FedAvg and FML, seeds 0..3, shared by
/// criteria 5 and 6.
fn dh_runs() -> Result<&'static [DhRun], String> {
    static RUNS: OnceLock<Result<Vec<DhRun>, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (|| -> Result<Vec<DhRun>> {
            let root = require_mnist()?;
            let mut out = Vec::new();
            for seed in 0..3 {
                let fedavg = preset_config("mnist-mlp-noniid3-fedavg-desk")?.with_seed(seed);
                let mut fml = preset_config("mnist-mlp-noniid3-fml-desk")?.with_seed(seed);
                fml.report.global_validate = true;
                out.push(DhRun {
                    seed,
                    fedavg: run(&fedavg, &root, 1)?,
                    fml: run(&fml, &root, 1)?,
                });
            }
            Ok(out)
        })()
        .map_err(|e| format!("{e:#}"))
    })
    .as_deref()
    .map_err(Clone::clone)
}

// 5
fn noniid3_ordering() -> Result<Outcome> {
    let runs = dh_runs().map_err(anyhow::Error::msg)?;
    let mut passed = 0;
    let mut parts = Vec::new();
    for r in runs {
        let (ga, gf) = (r.fedavg.global_accuracy(), r.fml.global_accuracy());
        let (sa, sf) = (std_dev(&ga[ga.len() - 20..]), std_dev(&gf[gf.len() - 20..]));
        let (fa, ff) = (final_global(&r.fedavg), final_global(&r.fml));
        let ok = ff >= fa - 0.005 && sf <= sa;
        passed += ok as usize;
        parts.push(format!(
            "seed {}: fml {:.2} vs fedavg {:.2}, last-20 std {:.2} vs {:.2} {}",
            r.seed,
            100.0 * ff,
            100.0 * fa,
            100.0 * sf,
            100.0 * sa,
            if ok { "ok" } else { "no" }
        ));
    }
    Ok(Outcome::new(
        2 * passed > runs.len(),
        format!("{passed}/{} seeds (majority needed); {}", runs.len(), parts.join("; ")),
    ))
}

// 6
fn dh_personalization() -> Result<Outcome> {
    let runs = dh_runs().map_err(anyhow::Error::msg)?;
    let mut passed = 0;
    let mut parts = Vec::new();
    for r in runs {
        let last = r.fml.final_round();
        let at_last = |role| {
            mean(
                r.fml
                    .select(None, role, EvalSplit::Validate)
                    .filter(|x| x.round == last && x.entity != Entity::Global)
                    .map(|x| x.accuracy),
            )
        };
        let (local, global) = (at_last(Role::Local), at_last(Role::Global));
        passed += (local > global) as usize;
        parts.push(format!("seed {}: personalized {:.2} vs global {:.2}", r.seed, 100.0 * local, 100.0 * global));
    }
    Ok(Outcome::new(
        passed == runs.len(),
        format!("{passed}/{} seeds; {}", runs.len(), parts.join("; ")),
    ))
}

fn fml_vs_solo(cfg: &ExperimentConfig, prepared: &Prepared, fml: &[RoundRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = cfg.clients();
    let solo = run_solo(cfg, prepared, 1)?;
    Ok((best_local(fml, k), best_local(&solo, k)))
}

// 7
fn mh_claim() -> Result<Outcome> {
    let root = require_mnist()?;
    let start = Instant::now();
    let cfg = preset_config("mnist-mh-fml-desk")?;
    let prepared = prepare(&cfg, &root)?;
    let mut sim = Simulation::<f32>::new(cfg.federation(), &prepared.pools, prepared.setups.clone())?;
    let report = sim.run_to_end()?;
    let (fml, solo) = fml_vs_solo(&cfg, &prepared, &report.records)?;
    let wins = fml.iter().zip(&solo).filter(|(f, s)| f >= s).count();
    let elapsed = start.elapsed();
    let archs: Vec<&str> = cfg.client_models.iter().map(|m| m.arch.name()).collect();
    Ok(Outcome::new(
        wins >= 4 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "{wins}/5 clients at or above solo (need 4); best validate accuracy fml {} vs solo {} ({}), {:.0} s of 900",
            pct(&fml),
            pct(&solo),
            archs.join("/"),
            elapsed.as_secs_f64()
        ),
    ))
}

// 8
fn oh_claim() -> Result<Outcome> {
    let cfg = preset_config("synth-oh-fml-desk")?;
    let prepared = prepare(&cfg, Path::new("."))?;
    let spec = cfg.model_spec();
    let split = spec.split.context("trunk preset without split")?;
    let (trunk, _) = split_model(&build_model::<f32>(&spec, 0)?, split)?;
    let features: usize = trunk.output_shape().iter().product();
    let classes: Vec<usize> = cfg.client_datasets.iter().map(DatasetConfig::classes).collect();
    ensure!(classes[0] != classes[1], "clients should differ in class count");

    let mut sim = Simulation::<f32>::new(cfg.federation(), &prepared.pools, prepared.setups.clone())?;
    let mut records = Vec::new();
    for _ in 0..cfg.hp.rounds {
        records.extend(sim.run_round()?);
        let global = sim.global();
        ensure!(global.param_count() == trunk.param_count(), "global grew beyond the trunk");
        ensure!(global.classes().is_none() || global.output_shape() == trunk.output_shape(), "global carries a head");
        for (c, k) in sim.clients().iter().zip(&classes) {
            let adaptor = c.adaptor().context("adaptor not kept on the client")?;
            ensure!(adaptor.len() == (features + 1) * k, "client {} adaptor has {} params", c.id(), adaptor.len());
        }
    }
    let (fml, solo) = fml_vs_solo(&cfg, &prepared, &records)?;
    let ok = fml.iter().zip(&solo).all(|(f, s)| f >= s);
    Ok(Outcome::new(
        ok,
        format!(
            "trunk {} params merged, adaptors {}x{} and {}x{} kept local every round; best validate accuracy fml {} vs solo {} ({}/{} classes)",
            trunk.param_count(),
            features + 1,
            classes[0],
            features + 1,
            classes[1],
            pct(&fml),
            pct(&solo),
            classes[0],
            classes[1]
        ),
    ))
}

// 9
fn determinism() -> Result<Outcome> {
    let mut names = Vec::new();
    for name in ["synth-mlp-noniid3-fml-desk", "synth-mlp-noniid3-fedprox-desk"] {
        let cfg = preset_config(name)?;
        let a = render_csv(&run(&cfg, Path::new("."), 1)?.records);
        let b = render_csv(&run(&cfg, Path::new("."), 3)?.records);
        ensure!(a == b, "{name}: CSV differs between runs");
        names.push(format!("{name} ({} bytes)", a.len()));
    }
    Ok(Outcome::new(true, format!("byte-identical CSV across runs on 1 and 3 threads: {}", names.join(", "))))
}

// 10
fn merge_order() -> Result<Outcome> {
    let orders: [&[usize]; 3] = [&[0, 1, 2, 3, 4], &[4, 3, 2, 1, 0], &[2, 0, 4, 1, 3]];
    let mut checked = Vec::new();
    for strategy in [Strategy::FedAvg, Strategy::FedProx, Strategy::Fml] {
        let mut cfg = synthetic_iid(5, strategy);
        cfg.partition.mode = PartitionMode::NonIid(2);
        cfg.hp.rounds = 2;
        cfg.hp.local_epochs = 1;
        let cfg = cfg.resolve()?;
        let prepared = prepare(&cfg, Path::new("."))?;
        let mut finals = Vec::new();
        for order in orders {
            let mut sim = Simulation::<f32>::new(cfg.federation(), &prepared.pools, prepared.setups.clone())?;
            for _ in 0..cfg.hp.rounds {
                sim.run_round_in_order(order)?;
            }
            finals.push(sim.global().flatten_params().iter().map(|v| v.to_bits()).collect::<Vec<u32>>());
        }
        ensure!(finals.windows(2).all(|w| w[0] == w[1]), "{}: order changed the global", strategy.name());
        checked.push(strategy.name());
    }
    Ok(Outcome::new(
        true,
        format!("global bit-identical under 3 client orders for {}", checked.join(", ")),
    ))
}

type Criterion = (usize, &'static str, fn() -> Result<Outcome>);

const CRITERIA: [Criterion; 10] = [
    (1, "gradient oracle suite", gradient_oracle),
    (2, "beta=1 degeneration", degeneration),
    (3, "partition invariants", partition_invariants),
    (4, "MNIST MLP IID FedAvg desk anchor", table1_anchor),
    (5, "Non-IID(3) FML vs FedAvg ordering", noniid3_ordering),
    (6, "personalized beats global on validate sets", dh_personalization),
    (7, "mixed architectures vs solo", mh_claim),
    (8, "shared trunk across 10-/100-class tasks", oh_claim),
    (9, "determinism", determinism),
    (10, "merge-order invariance", merge_order),
];

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("FMLSIM_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("FMLSIM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => Outcome::new(false, format!("error: {e:#}")),
            Err(_) => Outcome::new(false, "panicked"),
        };
        failed += !outcome.pass as usize;
        println!(
            "{} criterion {id} ({name}): {} [{:.1} s]",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} criteria failed");
    if strict && failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
