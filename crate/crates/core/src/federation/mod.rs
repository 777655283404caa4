//! Server/client state machine for FedAvg, FedProx and federated mutual
//! learning (FML).
//!
//! One FML round forks the global model into every client's meme, runs
//! mutual learning between meme and the client's personalized model, then
//! merges the memes' shared parameters with a uniform mean. Personalized
//! models never leave their client.

mod aggregate;
mod local;
mod messages;
mod optim;

use std::fmt;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate_uniform, aggregate_weighted};
pub use local::{evaluate, local_update_dml, local_update_prox, local_update_sgd, DmlLosses, DmlMode, Evaluation, Shard};
pub use messages::{MemeUpload, WeightedUpload};
pub use optim::Sgd;

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::losses::{schedule_alphabeta, DistillConfig};
use crate::models::{build_model, splice_adaptor, split_model, Model, ModelSpec};
use crate::partition::ClientData;
use crate::rng::{self, tags};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FedAvg,
    FedProx,
    Fml,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::Fml => "fml",
        }
    }

    /// Default merge rule: sample-weighted for the baselines, uniform for FML.
    pub fn default_merge(self) -> Merge {
        match self {
            Strategy::Fml => Merge::Uniform,
            _ => Merge::Weighted,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Merge {
    Weighted,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    /// Proximal coefficient, FedProx only.
    #[serde(default = "defaults::mu")]
    pub mu: f64,
    /// Per-round multiplicative learning-rate decay; 1 keeps it constant.
    #[serde(default = "defaults::lr_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub dml_mode: DmlMode,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn lr() -> f64 {
        0.01
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn weight_decay() -> f64 {
        5e-4
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn local_epochs() -> usize {
        5
    }
    pub fn rounds() -> usize {
        50
    }
    pub fn mu() -> f64 {
        0.01
    }
    pub fn lr_decay() -> f64 {
        1.0
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr: defaults::lr(),
            momentum: defaults::momentum(),
            weight_decay: defaults::weight_decay(),
            batch_size: defaults::batch_size(),
            local_epochs: defaults::local_epochs(),
            rounds: defaults::rounds(),
            mu: defaults::mu(),
            lr_decay: defaults::lr_decay(),
            distill: DistillConfig::default(),
            dml_mode: DmlMode::default(),
            seed: 0,
        }
    }
}

impl Hyperparams {
    /// Checks ranges. `local_epochs == 0` is accepted and makes every round a
    /// no-op.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::param(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a non-negative number, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad(format!("mu must be >= 0, got {}", self.mu));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad(format!("lr_decay must be > 0, got {}", self.lr_decay));
        }
        self.distill.validate()
    }

    /// Learning rate for 1-based round `t`.
    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr * self.lr_decay.powi(round.saturating_sub(1) as i32)
    }

    fn optimizer<T: Element>(&self, round: usize) -> Sgd<T> {
        Sgd::new(self.lr_at(round), self.momentum, self.weight_decay)
    }
}

/// Everything the federation needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub strategy: Strategy,
    pub merge: Merge,
    pub hp: Hyperparams,
    /// Global (and meme) architecture. With `split` set, only the trunk is
    /// global and each client splices its own classifier onto it.
    pub global: ModelSpec,
    /// Emit meme rows on the validate sets (FML).
    pub report_meme: bool,
    /// Emit rows for the global model on each client's validate set.
    pub report_global_validate: bool,
}

impl FederationConfig {
    pub fn new(strategy: Strategy, global: ModelSpec, hp: Hyperparams) -> Self {
        Self {
            strategy,
            merge: strategy.default_merge(),
            hp,
            global,
            report_meme: false,
            report_global_validate: false,
        }
    }

    fn trunk_only(&self) -> bool {
        self.global.split.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        match self.strategy {
            Strategy::Fml if self.merge != Merge::Uniform => Err(Error::Config(
                "fml merges memes uniformly; sample counts are never uploaded".into(),
            )),
            Strategy::FedAvg | Strategy::FedProx if self.trunk_only() => Err(Error::Config(format!(
                "a trunk split requires the fml strategy, not {}",
                self.strategy.name()
            ))),
            _ => Ok(()),
        }
    }
}

/// Train/test pair a client draws its indices from.
#[derive(Clone, Debug)]
pub struct DataPool {
    pub train: Dataset,
    pub test: Dataset,
}

/// Per-client inputs to a simulation.
#[derive(Clone, Debug)]
pub struct ClientSetup {
    /// Index into the simulation's pools.
    pub pool: usize,
    pub data: ClientData,
    /// Personalized architecture (FML). Defaults to the global spec with the
    /// client's class count.
    pub model: Option<ModelSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Entity {
    Global,
    Client(usize),
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entity::Global => f.write_str("global"),
            Entity::Client(k) => write!(f, "client{k}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Global,
    Meme,
    Local,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Global => "global",
            Role::Meme => "meme",
            Role::Local => "local",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Test,
    Validate,
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalSplit::Test => "test",
            EvalSplit::Validate => "validate",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub entity: Entity,
    pub model: Role,
    pub split: EvalSplit,
    pub accuracy: f64,
    pub loss: f64,
}

impl RoundRecord {
    fn new(round: usize, entity: Entity, model: Role, split: EvalSplit, eval: Evaluation) -> Self {
        Self {
            round,
            entity,
            model,
            split,
            accuracy: eval.accuracy,
            loss: eval.loss,
        }
    }

    fn key(&self) -> (usize, Entity, Role, EvalSplit) {
        (self.round, self.entity, self.model, self.split)
    }
}

fn sort_records(records: &mut [RoundRecord]) {
    records.sort_by_key(RoundRecord::key);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: FederationConfig,
    /// Sorted by `(round, entity, model, split)`.
    pub records: Vec<RoundRecord>,
}

impl RunReport {
    /// Wraps records (in any order) into a sorted report.
    pub fn new(config: FederationConfig, mut records: Vec<RoundRecord>) -> Self {
        sort_records(&mut records);
        Self { config, records }
    }

    pub fn select(&self, entity: Option<Entity>, model: Role, split: EvalSplit) -> impl Iterator<Item = &RoundRecord> {
        self.records
            .iter()
            .filter(move |r| r.model == model && r.split == split && entity.is_none_or(|e| r.entity == e))
    }

    /// Global test accuracy per round.
    pub fn global_accuracy(&self) -> Vec<f64> {
        self.select(Some(Entity::Global), Role::Global, EvalSplit::Test)
            .map(|r| r.accuracy)
            .collect()
    }

    pub fn final_round(&self) -> usize {
        self.records.iter().map(|r| r.round).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct ServerState<T> {
    global: Model<T>,
    round: usize,
    strategy: Strategy,
}

impl<T: Element> ServerState<T> {
    pub fn global(&self) -> &Model<T> {
        &self.global
    }

    /// Number of completed rounds.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }
}

#[derive(Clone, Debug)]
pub struct ClientState<T> {
    id: usize,
    pool: usize,
    data: ClientData,
    classes: usize,
    local: Option<Model<T>>,
    local_opt: Sgd<T>,
    /// Classifier parameters spliced onto the global trunk (split mode).
    adaptor: Option<Vec<T>>,
    rng: ChaCha8Rng,
}

impl<T: Element> ClientState<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn data(&self) -> &ClientData {
        &self.data
    }

    /// The personalized model (FML only).
    pub fn local(&self) -> Option<&Model<T>> {
        self.local.as_ref()
    }

    pub fn adaptor(&self) -> Option<&[T]> {
        self.adaptor.as_deref()
    }

    /// Puts back a snapshot without replacing the personalized model object.
    fn restore(&mut self, snap: ClientState<T>) {
        if let (Some(local), Some(saved)) = (self.local.as_mut(), snap.local) {
            for (dst, src) in local.params_mut().iter_mut().zip(saved.params()) {
                dst.data_mut().copy_from_slice(src.data());
            }
        }
        self.local_opt = snap.local_opt;
        self.adaptor = snap.adaptor;
        self.rng = snap.rng;
    }
}

enum Upload<T> {
    Meme(MemeUpload<T>),
    Weighted(WeightedUpload<T>),
}

struct Outcome<T> {
    upload: Upload<T>,
    records: Vec<RoundRecord>,
}

struct RoundCtx<'a, T> {
    cfg: &'a FederationConfig,
    pools: &'a [DataPool],
    global: &'a Model<T>,
    round: usize,
}

fn all_indices(ds: &Dataset) -> Vec<usize> {
    (0..ds.len()).collect()
}

/// Runs `f` on the selected clients, concurrently when a pool is given.
/// Results come back in `order`.
fn for_clients<T, R, F>(clients: &mut [ClientState<T>], order: &[usize], pool: Option<&rayon::ThreadPool>, f: F) -> Vec<R>
where
    T: Element,
    R: Send,
    F: Fn(&mut ClientState<T>) -> R + Sync,
{
    let mut slots: Vec<Option<&mut ClientState<T>>> = clients.iter_mut().map(Some).collect();
    let ordered: Vec<&mut ClientState<T>> = order
        .iter()
        .map(|&k| slots[k].take().expect("order is a permutation"))
        .collect();
    match pool {
        Some(p) => p.install(|| ordered.into_par_iter().map(|c| f(c)).collect()),
        None => ordered.into_iter().map(f).collect(),
    }
}

fn thread_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))
}

/// The personalized model spec of a client given its pool's class count.
fn personal_spec(cfg: &FederationConfig, setup: &ClientSetup, classes: usize) -> ModelSpec {
    setup.model.clone().unwrap_or_else(|| {
        let mut spec = cfg.global.clone();
        spec.split = None;
        spec.classes = classes;
        spec
    })
}

fn check_input(model_input: &[usize], pool: &DataPool, what: &str) -> Result<()> {
    let sample = pool.train.sample_shape();
    if model_input != sample.as_slice() {
        return Err(Error::Config(format!(
            "{what} expects input {model_input:?}, data has {sample:?}"
        )));
    }
    Ok(())
}

pub struct Simulation<'a, T: Element> {
    cfg: FederationConfig,
    pools: &'a [DataPool],
    server: ServerState<T>,
    clients: Vec<ClientState<T>>,
    workers: Option<rayon::ThreadPool>,
}

impl<'a, T: Element> Simulation<'a, T> {
    pub fn new(cfg: FederationConfig, pools: &'a [DataPool], setups: Vec<ClientSetup>) -> Result<Self> {
        cfg.validate()?;
        if setups.is_empty() {
            return Err(Error::Config("need at least one client".into()));
        }
        let seed = cfg.hp.seed;
        let full: Model<T> = build_model(&cfg.global, rng::mix(seed, tags::GLOBAL_INIT))?;
        let global = match cfg.global.split {
            Some(s) => split_model(&full, s)?.0,
            None => full,
        };
        let mut clients = Vec::with_capacity(setups.len());
        for (k, setup) in setups.into_iter().enumerate() {
            let pool = pools.get(setup.pool).ok_or_else(|| {
                Error::Config(format!("client {k} refers to missing data pool {}", setup.pool))
            })?;
            check_input(global.input_shape(), pool, "global model")?;
            let classes = pool.train.classes();
            if setup.data.train.is_empty() {
                return Err(Error::Config(format!("client {k} has no training samples")));
            }
            let head_classes = if cfg.trunk_only() { None } else { global.classes() };
            if let Some(c) = head_classes
                && c < classes
            {
                return Err(Error::Config(format!(
                    "global model emits {c} classes, client {k} has {classes}"
                )));
            }
            let local = if cfg.strategy == Strategy::Fml {
                let spec = personal_spec(&cfg, &setup, classes);
                let model: Model<T> = build_model(&spec, rng::mix(seed, tags::CLIENT_LOCAL_INIT + k as u64))?;
                check_input(model.input_shape(), pool, "personalized model")?;
                let meme_classes = head_classes.unwrap_or(classes);
                if model.classes() != Some(meme_classes) {
                    return Err(Error::Config(format!(
                        "client {k}: personalized model emits {:?} classes but the meme emits {meme_classes}; \
                         mixed class counts need a trunk split",
                        model.classes()
                    )));
                }
                Some(model)
            } else if setup.model.is_some() {
                return Err(Error::Config(format!(
                    "per-client models need the fml strategy, not {}",
                    cfg.strategy.name()
                )));
            } else {
                None
            };
            clients.push(ClientState {
                id: k,
                pool: setup.pool,
                data: setup.data,
                classes,
                local,
                local_opt: cfg.hp.optimizer(1),
                adaptor: None,
                rng: rng::stream(seed, tags::CLIENT_BATCHES + k as u64),
            });
        }
        Ok(Self {
            server: ServerState {
                global,
                round: 0,
                strategy: cfg.strategy,
            },
            cfg,
            pools,
            clients,
            workers: None,
        })
    }

    /// Runs client updates on `threads` workers. Results do not depend on it.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        self.workers = thread_pool(threads)?;
        Ok(self)
    }

    pub fn config(&self) -> &FederationConfig {
        &self.cfg
    }

    pub fn server(&self) -> &ServerState<T> {
        &self.server
    }

    pub fn global(&self) -> &Model<T> {
        &self.server.global
    }

    pub fn clients(&self) -> &[ClientState<T>] {
        &self.clients
    }

    pub fn run_round(&mut self) -> Result<Vec<RoundRecord>> {
        let order: Vec<usize> = (0..self.clients.len()).collect();
        self.run_round_in_order(&order)
    }

    /// One round with clients processed (and merged) in `order`.
    pub fn run_round_in_order(&mut self, order: &[usize]) -> Result<Vec<RoundRecord>> {
        let k = self.clients.len();
        let mut seen = vec![false; k];
        if order.len() != k || order.iter().any(|&i| i >= k || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Usage(format!("{order:?} is not a permutation of 0..{k}")));
        }
        let round = self.server.round + 1;
        if round > self.cfg.hp.rounds {
            return Err(Error::Usage(format!(
                "all {} rounds have already run",
                self.cfg.hp.rounds
            )));
        }
        let backup = self.clients.clone();
        let ctx = RoundCtx {
            cfg: &self.cfg,
            pools: self.pools,
            global: &self.server.global,
            round,
        };
        let outcomes = for_clients(&mut self.clients, order, self.workers.as_ref(), |c| {
            client_round(c, &ctx)
        });
        let mut uploads = Vec::with_capacity(k);
        let mut records = Vec::new();
        let mut failure = None;
        for (&client, outcome) in order.iter().zip(outcomes) {
            match outcome {
                Ok(o) => {
                    uploads.push(o.upload);
                    records.extend(o.records);
                }
                Err(e) if failure.is_none() => failure = Some((client, e)),
                Err(_) => {}
            }
        }
        let merged = match failure {
            Some((client, e)) => Err(Error::Client {
                round,
                client,
                source: Box::new(e),
            }),
            None => self.merge(&uploads),
        };
        let merged = match merged {
            Ok(m) => m,
            Err(e) => {
                for (c, snap) in self.clients.iter_mut().zip(backup) {
                    c.restore(snap);
                }
                return Err(e);
            }
        };
        self.server.global.load_shared_params(&merged)?;
        self.server.round = round;
        records.extend(self.evaluate_global(round)?);
        sort_records(&mut records);
        Ok(records)
    }

    fn merge(&self, uploads: &[Upload<T>]) -> Result<Vec<T>> {
        let expected = self.server.global.shared_param_count();
        let mut vectors: Vec<&[T]> = Vec::with_capacity(uploads.len());
        let mut counts = Vec::with_capacity(uploads.len());
        for u in uploads {
            let (client, v) = match u {
                Upload::Meme(m) => (m.client, &m.shared),
                Upload::Weighted(w) => {
                    counts.push(w.samples);
                    (w.client, &w.params)
                }
            };
            if v.len() != expected {
                return Err(Error::dim(format!(
                    "client {client} uploaded {} values, global shares {expected}",
                    v.len()
                )));
            }
            vectors.push(v);
        }
        match self.cfg.merge {
            Merge::Uniform => aggregate_uniform(&vectors),
            Merge::Weighted if counts.len() == vectors.len() => aggregate_weighted(&vectors, &counts),
            Merge::Weighted => Err(Error::Config("weighted merge needs sample counts".into())),
        }
    }

    fn evaluate_global(&mut self, round: usize) -> Result<Vec<RoundRecord>> {
        let global = &self.server.global;
        if self.cfg.trunk_only() {
            return Ok(Vec::new());
        }
        let test = &self.pools[0].test;
        let eval = evaluate(global, Shard::new(test, &all_indices(test)))?;
        let mut records = vec![RoundRecord::new(round, Entity::Global, Role::Global, EvalSplit::Test, eval)];
        if self.cfg.report_global_validate {
            let order: Vec<usize> = (0..self.clients.len()).collect();
            let pools = self.pools;
            let rows = for_clients(&mut self.clients, &order, self.workers.as_ref(), |c| {
                let shard = Shard::new(&pools[c.pool].test, &c.data.validate);
                evaluate(global, shard)
                    .map(|e| RoundRecord::new(round, Entity::Client(c.id), Role::Global, EvalSplit::Validate, e))
            });
            for r in rows {
                records.push(r?);
            }
        }
        Ok(records)
    }

    /// Runs the remaining rounds.
    pub fn run_to_end(&mut self) -> Result<RunReport> {
        let mut records = Vec::new();
        while self.server.round < self.cfg.hp.rounds {
            records.extend(self.run_round()?);
        }
        Ok(RunReport::new(self.cfg.clone(), records))
    }
}

fn fork<T: Element>(ctx: &RoundCtx<'_, T>, state: &ClientState<T>) -> Result<Model<T>> {
    if !ctx.cfg.trunk_only() {
        return Ok(ctx.global.clone());
    }
    let seed = rng::mix(ctx.cfg.hp.seed, tags::CLIENT_ADAPTOR_INIT + state.id as u64);
    let mut meme = splice_adaptor(ctx.global, state.classes, seed)?;
    if let Some(head) = &state.adaptor {
        meme.load_head_params(head)?;
    }
    Ok(meme)
}

fn client_round<T: Element>(state: &mut ClientState<T>, ctx: &RoundCtx<'_, T>) -> Result<Outcome<T>> {
    let hp = &ctx.cfg.hp;
    let pool = &ctx.pools[state.pool];
    let shard = Shard::new(&pool.train, &state.data.train);
    let mut opt = hp.optimizer(ctx.round);
    match ctx.cfg.strategy {
        Strategy::FedAvg | Strategy::FedProx => {
            let mut model = ctx.global.clone();
            if ctx.cfg.strategy == Strategy::FedProx {
                local_update_prox(&mut model, ctx.global, shard, hp, &mut opt, &mut state.rng)?;
            } else {
                local_update_sgd(&mut model, shard, hp, &mut opt, &mut state.rng)?;
            }
            Ok(Outcome {
                upload: Upload::Weighted(WeightedUpload {
                    client: state.id,
                    params: model.flatten_params(),
                    samples: state.data.train.len(),
                }),
                records: Vec::new(),
            })
        }
        Strategy::Fml => {
            let mut meme = fork(ctx, state)?;
            debug_assert_eq!(meme.shared_fingerprint(), ctx.global.shared_fingerprint());
            let (alpha, beta) = schedule_alphabeta(ctx.round - 1, hp.rounds - 1, &hp.distill);
            state.local_opt.lr = hp.lr_at(ctx.round);
            let local = state.local.as_mut().expect("fml clients own a personalized model");
            local_update_dml(
                &mut meme,
                local,
                shard,
                hp,
                &mut opt,
                &mut state.local_opt,
                alpha,
                beta,
                &mut state.rng,
            )?;
            if !meme.is_fully_shared() {
                state.adaptor = Some(meme.head_params());
            }
            let validate = Shard::new(&pool.test, &state.data.validate);
            let entity = Entity::Client(state.id);
            let mut records = vec![RoundRecord::new(
                ctx.round,
                entity,
                Role::Local,
                EvalSplit::Validate,
                evaluate(local, validate)?,
            )];
            if ctx.cfg.report_meme {
                records.push(RoundRecord::new(
                    ctx.round,
                    entity,
                    Role::Meme,
                    EvalSplit::Validate,
                    evaluate(&meme, validate)?,
                ));
            }
            Ok(Outcome {
                upload: Upload::Meme(MemeUpload {
                    client: state.id,
                    shared: meme.shared_params(),
                }),
                records,
            })
        }
    }
}

/// Runs a full simulation in f32.
pub fn run_simulation(
    cfg: &FederationConfig,
    pools: &[DataPool],
    clients: Vec<ClientSetup>,
    threads: usize,
) -> Result<RunReport> {
    Simulation::<f32>::new(cfg.clone(), pools, clients)?
        .with_threads(threads)?
        .run_to_end()
}

/// Trains each client's personalized model alone with the same epoch budget,
/// initialization and batch stream it would get under FML. Returns one
/// local-validate row per client per round.
pub fn solo_baseline(
    cfg: &FederationConfig,
    pools: &[DataPool],
    clients: Vec<ClientSetup>,
    threads: usize,
) -> Result<Vec<RoundRecord>> {
    let mut fml = cfg.clone();
    fml.strategy = Strategy::Fml;
    fml.merge = Merge::Uniform;
    let mut sim = Simulation::<f32>::new(fml, pools, clients)?;
    let workers = thread_pool(threads)?;
    let order: Vec<usize> = (0..sim.clients.len()).collect();
    let hp = cfg.hp.clone();
    let rows = for_clients(&mut sim.clients, &order, workers.as_ref(), |c| -> Result<Vec<RoundRecord>> {
        let pool = &pools[c.pool];
        let local = c.local.as_mut().expect("built as fml");
        let mut out = Vec::with_capacity(hp.rounds);
        for round in 1..=hp.rounds {
            c.local_opt.lr = hp.lr_at(round);
            local_update_sgd(local, Shard::new(&pool.train, &c.data.train), &hp, &mut c.local_opt, &mut c.rng)
                .map_err(|e| Error::Client {
                    round,
                    client: c.id,
                    source: Box::new(e),
                })?;
            let eval = evaluate(local, Shard::new(&pool.test, &c.data.validate))?;
            out.push(RoundRecord::new(round, Entity::Client(c.id), Role::Local, EvalSplit::Validate, eval));
        }
        Ok(out)
    });
    let mut records = Vec::new();
    for r in rows {
        records.extend(r?);
    }
    sort_records(&mut records);
    Ok(records)
}
