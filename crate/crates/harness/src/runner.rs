//! Turns an [`ExperimentConfig`] into data pools and client setups and runs it.

use std::path::Path;

use fmlsim_core::federation::{solo_baseline, ClientSetup, DataPool, RoundRecord, RunReport, Simulation};
use fmlsim_core::partition::{partition, ClientData, PartitionSpec};

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::error::Result;

pub struct Prepared {
    pub pools: Vec<DataPool>,
    /// Dataset config of each pool.
    pub pool_datasets: Vec<DatasetConfig>,
    pub setups: Vec<ClientSetup>,
}

/// Loads every distinct dataset once and partitions it among the clients
/// that use it. Client ids are global; within a pool they keep their order.
pub fn prepare(cfg: &ExperimentConfig, root: &Path) -> Result<Prepared> {
    let k = cfg.clients();
    let mut pool_datasets: Vec<DatasetConfig> = Vec::new();
    let mut pool_of = Vec::with_capacity(k);
    for c in 0..k {
        let ds = cfg.client_dataset(c);
        let idx = match pool_datasets.iter().position(|d| d == ds) {
            Some(i) => i,
            None => {
                pool_datasets.push(ds.clone());
                pool_datasets.len() - 1
            }
        };
        pool_of.push(idx);
    }

    let mut pools = Vec::with_capacity(pool_datasets.len());
    let mut data: Vec<Option<ClientData>> = vec![None; k];
    for (p, ds) in pool_datasets.iter().enumerate() {
        let (train, test) = ds.load(root)?;
        let members: Vec<usize> = (0..k).filter(|&c| pool_of[c] == p).collect();
        let spec = PartitionSpec {
            clients: members.len(),
            mode: cfg.partition.mode,
            seed: cfg.partition.seed,
        };
        for (mut part, &client) in partition(&spec, &train, &test)?.into_iter().zip(&members) {
            part.client = client;
            data[client] = Some(part);
        }
        pools.push(DataPool { train, test });
    }

    let setups = data
        .into_iter()
        .enumerate()
        .map(|(c, d)| ClientSetup {
            pool: pool_of[c],
            data: d.expect("every client belongs to a pool"),
            model: cfg.client_models.get(c).cloned(),
        })
        .collect();
    Ok(Prepared {
        pools,
        pool_datasets,
        setups,
    })
}

/// Runs the experiment, calling `progress` after every round.
pub fn run_with_progress(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    threads: usize,
    mut progress: impl FnMut(usize, &[RoundRecord]),
) -> Result<RunReport> {
    let fed = cfg.federation();
    let mut sim = Simulation::<f32>::new(fed.clone(), &prepared.pools, prepared.setups.clone())?.with_threads(threads)?;
    let mut records = Vec::new();
    for round in 1..=fed.hp.rounds {
        let rows = sim.run_round()?;
        progress(round, &rows);
        records.extend(rows);
    }
    Ok(RunReport::new(fed, records))
}

pub fn run(cfg: &ExperimentConfig, root: &Path, threads: usize) -> Result<RunReport> {
    let prepared = prepare(cfg, root)?;
    run_with_progress(cfg, &prepared, threads, |_, _| {})
}

/// Solo training of every personalized model with the experiment's budget.
pub fn run_solo(cfg: &ExperimentConfig, prepared: &Prepared, threads: usize) -> Result<Vec<RoundRecord>> {
    Ok(solo_baseline(
        &cfg.federation(),
        &prepared.pools,
        prepared.setups.clone(),
        threads,
    )?)
}
