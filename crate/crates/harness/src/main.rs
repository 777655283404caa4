use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fmlsim::report::{emit_csv, histogram_csv};
use fmlsim::runner::{prepare, run_solo, run_with_progress};
use fmlsim::{load_experiment, presets, ExperimentConfig};
use fmlsim_core::datasets::data_root;
use fmlsim_core::federation::{Entity, EvalSplit, Role, RunReport};
use fmlsim_core::gradcheck::{check_architecture, check_ops, TOLERANCE};
use fmlsim_core::models::Architecture;

#[derive(Parser)]
#[command(name = "fmlsim", version, about = "Deterministic federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its CSV report.
    Run(RunArgs),
    /// Inspect client partitions.
    Partition {
        #[command(subcommand)]
        command: PartitionCommand,
    },
    /// Finite-difference check of every architecture's gradients.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Parameters sampled per model.
        #[arg(long, default_value_t = 60)]
        params: usize,
    },
    /// Named experiment configs.
    Presets {
        #[command(subcommand)]
        command: PresetCommand,
    },
}

#[derive(Args)]
struct Source {
    /// Config file path or preset name.
    experiment: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Source {
    fn load(&self) -> Result<ExperimentConfig> {
        let arg = match (&self.config, &self.experiment) {
            (Some(path), None) => path.display().to_string(),
            (None, Some(arg)) => arg.clone(),
            (Some(_), Some(_)) => bail!("give either a positional config/preset or --config, not both"),
            (None, None) => bail!("no config given; pass a file, a preset name, or --config"),
        };
        load_experiment(&arg).with_context(|| format!("loading {arg}"))
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    /// Overrides both the training and partition seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Overrides the number of rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Train every personalized model alone instead (fml configs).
    #[arg(long)]
    solo: bool,
}

#[derive(Subcommand)]
enum PartitionCommand {
    /// Per-client class histograms as CSV.
    Inspect {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum PresetCommand {
    List,
    /// Print the resolved config of a preset.
    Show { name: String },
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = args.source.load()?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(rounds) = args.rounds {
        cfg.hp.rounds = rounds;
    }
    if let Some(out) = args.out {
        cfg.output = Some(out);
    }
    let cfg = cfg.resolve()?;
    let out = cfg.output_path();
    let prepared = prepare(&cfg, &data_root()).context("preparing data")?;
    if args.solo {
        let records = run_solo(&cfg, &prepared, args.threads)?;
        let report = RunReport::new(cfg.federation(), records);
        emit_csv(&report, &cfg, &out)?;
        eprintln!("wrote {} solo rows to {}", report.records.len(), out.display());
        return Ok(());
    }
    let total = cfg.hp.rounds;
    let report = run_with_progress(&cfg, &prepared, args.threads, |round, rows| {
        let acc = rows
            .iter()
            .find(|r| r.entity == Entity::Global && r.model == Role::Global && r.split == EvalSplit::Test)
            .map(|r| format!("global test accuracy {:.4}", r.accuracy));
        let local: Vec<f64> = rows
            .iter()
            .filter(|r| r.model == Role::Local && r.split == EvalSplit::Validate)
            .map(|r| r.accuracy)
            .collect();
        let local = (!local.is_empty())
            .then(|| format!("mean local validate accuracy {:.4}", local.iter().sum::<f64>() / local.len() as f64));
        let parts: Vec<String> = acc.into_iter().chain(local).collect();
        eprintln!("round {round}/{total}: {}", parts.join(", "));
    })?;
    emit_csv(&report, &cfg, &out)?;
    eprintln!("wrote {} rows to {}", report.records.len(), out.display());
    Ok(())
}

fn gradcheck(seeds: u64, params: usize) -> Result<bool> {
    let mut ok = true;
    println!("name,seed,checked,skipped,max_rel_error");
    for arch in [Architecture::Mlp, Architecture::LeNet5, Architecture::Cnn1, Architecture::Cnn2] {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let r = check_architecture(arch, seed, params)?;
            println!("{},{},{},{},{:.3e}", r.name, r.seed, r.checked, r.skipped, r.max_rel_error);
            worst = worst.max(r.max_rel_error);
        }
        eprintln!("{}: max relative error {worst:.3e}", arch.name());
        ok &= worst < TOLERANCE;
    }
    for seed in 0..seeds {
        for r in check_ops(seed)? {
            println!("{},{},{},{},{:.3e}", r.name, r.seed, r.checked, r.skipped, r.max_rel_error);
            ok &= r.passed();
        }
    }
    if !ok {
        eprintln!("gradient check failed: error above {TOLERANCE:e}");
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args).map(|_| true),
        Command::Partition {
            command: PartitionCommand::Inspect { source, seed },
        } => (|| {
            let mut cfg = source.load()?;
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            let prepared = prepare(&cfg, &data_root())?;
            print!("{}", histogram_csv(&prepared));
            Ok(true)
        })(),
        Command::Gradcheck { seeds, params } => gradcheck(seeds, params),
        Command::Presets { command: PresetCommand::List } => {
            for p in presets() {
                println!("{}\t{}", p.name, p.description);
            }
            Ok(true)
        }
        Command::Presets {
            command: PresetCommand::Show { name },
        } => load_experiment(&name)
            .and_then(|cfg| cfg.to_json())
            .map(|json| {
                println!("{json}");
                true
            })
            .map_err(Into::into),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
