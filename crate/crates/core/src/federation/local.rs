//! Client-side training routines and evaluation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::optim::Sgd;
use super::Hyperparams;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::losses::{fml_local_loss, fml_meme_loss};
use crate::models::Model;
use crate::tensor::{Element, Tape, Tensor};

/// A slice of a dataset owned by one client.
#[derive(Clone, Copy)]
pub struct Shard<'a> {
    pub dataset: &'a Dataset,
    pub indices: &'a [usize],
}

impl<'a> Shard<'a> {
    pub fn new(dataset: &'a Dataset, indices: &'a [usize]) -> Self {
        Self { dataset, indices }
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.indices.is_empty() {
            Err(Error::Config("client shard is empty".into()))
        } else {
            Ok(())
        }
    }

    /// Shuffled mini-batches for one epoch.
    fn epoch_batches(&self, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut order = self.indices.to_vec();
        order.shuffle(rng);
        order.chunks(batch).map(<[usize]>::to_vec).collect()
    }
}

/// How the two models of a mutual-learning pair are stepped per batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DmlMode {
    /// Both losses use the same pre-step logits; both models step once.
    #[default]
    Simultaneous,
    /// The local model steps first; the meme then distills from the updated
    /// local model's logits on the same batch.
    Alternating,
}

fn train_step<T: Element>(
    model: &mut Model<T>,
    opt: &mut Sgd<T>,
    x: &Tensor<T>,
    y: &[usize],
    prox: Option<(f64, &[Tensor<T>])>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.register(&mut tape, true);
    let input = tape.constant(x.clone());
    let logits = model.forward(&mut tape, &params, input)?;
    let loss = tape.cross_entropy(logits, y)?;
    let value = tape.value(loss).item().as_f64();
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor<T>> = params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    opt.step(model.params_mut(), &grads, prox)?;
    Ok(value)
}

/// Plain local SGD for `hp.local_epochs` epochs. Returns the mean training
/// loss of each epoch.
pub fn local_update_sgd<T: Element>(
    model: &mut Model<T>,
    shard: Shard<'_>,
    hp: &Hyperparams,
    opt: &mut Sgd<T>,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    run_epochs(model, shard, hp, opt, rng, None)
}

/// Local SGD on `F_k(w) + mu/2 * ||w - w_global||^2`.
pub fn local_update_prox<T: Element>(
    model: &mut Model<T>,
    global: &Model<T>,
    shard: Shard<'_>,
    hp: &Hyperparams,
    opt: &mut Sgd<T>,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if !(hp.mu >= 0.0) {
        return Err(Error::param(format!("mu must be >= 0, got {}", hp.mu)));
    }
    if global.shared_fingerprint() != model.shared_fingerprint() {
        return Err(Error::dim("proximal anchor has a different architecture"));
    }
    let anchor = global.params().to_vec();
    run_epochs(model, shard, hp, opt, rng, Some((hp.mu, &anchor)))
}

fn run_epochs<T: Element>(
    model: &mut Model<T>,
    shard: Shard<'_>,
    hp: &Hyperparams,
    opt: &mut Sgd<T>,
    rng: &mut impl Rng,
    prox: Option<(f64, &[Tensor<T>])>,
) -> Result<Vec<f64>> {
    shard.ensure_nonempty()?;
    let mut epoch_losses = Vec::with_capacity(hp.local_epochs);
    for _ in 0..hp.local_epochs {
        let mut total = 0.0;
        for batch in shard.epoch_batches(hp.batch_size, rng) {
            let (x, y) = shard.dataset.batch::<T>(&batch);
            total += train_step(model, opt, &x, &y, prox)? * batch.len() as f64;
        }
        epoch_losses.push(total / shard.indices.len() as f64);
    }
    Ok(epoch_losses)
}

/// Per-epoch mean losses of a mutual-learning update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DmlLosses {
    pub meme: Vec<f64>,
    pub local: Vec<f64>,
}

/// Mutual learning between the meme and the personalized model for
/// `hp.local_epochs` epochs. Both models see the same batches.
#[allow(clippy::too_many_arguments)]
pub fn local_update_dml<T: Element>(
    meme: &mut Model<T>,
    local: &mut Model<T>,
    shard: Shard<'_>,
    hp: &Hyperparams,
    meme_opt: &mut Sgd<T>,
    local_opt: &mut Sgd<T>,
    alpha: f64,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<DmlLosses> {
    if meme.classes() != local.classes() || meme.classes().is_none() {
        return Err(Error::Config(format!(
            "meme emits {:?} classes, personalized model {:?}",
            meme.classes(),
            local.classes()
        )));
    }
    shard.ensure_nonempty()?;
    let tau = hp.distill.temperature;
    let mut out = DmlLosses::default();
    for _ in 0..hp.local_epochs {
        let (mut meme_total, mut local_total) = (0.0, 0.0);
        for batch in shard.epoch_batches(hp.batch_size, rng) {
            let (x, y) = shard.dataset.batch::<T>(&batch);
            let (lm, ll) = match hp.dml_mode {
                DmlMode::Simultaneous => dml_step(meme, local, meme_opt, local_opt, &x, &y, alpha, beta, tau)?,
                DmlMode::Alternating => {
                    dml_step_alternating(meme, local, meme_opt, local_opt, &x, &y, alpha, beta, tau)?
                }
            };
            meme_total += lm * batch.len() as f64;
            local_total += ll * batch.len() as f64;
        }
        out.meme.push(meme_total / shard.indices.len() as f64);
        out.local.push(local_total / shard.indices.len() as f64);
    }
    Ok(out)
}

fn collect_grads<T: Element>(
    grads: &mut crate::tensor::Gradients<T>,
    vars: &[crate::tensor::Var],
    model: &Model<T>,
) -> Vec<Tensor<T>> {
    vars.iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn dml_step<T: Element>(
    meme: &mut Model<T>,
    local: &mut Model<T>,
    meme_opt: &mut Sgd<T>,
    local_opt: &mut Sgd<T>,
    x: &Tensor<T>,
    y: &[usize],
    alpha: f64,
    beta: f64,
    tau: f64,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let mp = meme.register(&mut tape, true);
    let lp = local.register(&mut tape, true);
    let input = tape.constant(x.clone());
    let meme_logits = meme.forward(&mut tape, &mp, input)?;
    let local_logits = local.forward(&mut tape, &lp, input)?;
    let l_local = fml_local_loss(&mut tape, local_logits, meme_logits, y, alpha, tau)?;
    let l_meme = fml_meme_loss(&mut tape, meme_logits, local_logits, y, beta, tau)?;
    let values = (tape.value(l_meme).item().as_f64(), tape.value(l_local).item().as_f64());
    // Each teacher is detached, so the gradient of the sum splits exactly
    // into the two objectives.
    let total = tape.add(l_local, l_meme)?;
    let mut grads = tape.backward(total)?;
    let gm = collect_grads(&mut grads, &mp, meme);
    let gl = collect_grads(&mut grads, &lp, local);
    meme_opt.step(meme.params_mut(), &gm, None)?;
    local_opt.step(local.params_mut(), &gl, None)?;
    Ok(values)
}

#[allow(clippy::too_many_arguments)]
fn dml_step_alternating<T: Element>(
    meme: &mut Model<T>,
    local: &mut Model<T>,
    meme_opt: &mut Sgd<T>,
    local_opt: &mut Sgd<T>,
    x: &Tensor<T>,
    y: &[usize],
    alpha: f64,
    beta: f64,
    tau: f64,
) -> Result<(f64, f64)> {
    let local_value = {
        let mut tape = Tape::new();
        let mp = meme.register(&mut tape, false);
        let lp = local.register(&mut tape, true);
        let input = tape.constant(x.clone());
        let meme_logits = meme.forward(&mut tape, &mp, input)?;
        let local_logits = local.forward(&mut tape, &lp, input)?;
        let loss = fml_local_loss(&mut tape, local_logits, meme_logits, y, alpha, tau)?;
        let v = tape.value(loss).item().as_f64();
        let mut grads = tape.backward(loss)?;
        let gl = collect_grads(&mut grads, &lp, local);
        local_opt.step(local.params_mut(), &gl, None)?;
        v
    };
    let mut tape = Tape::new();
    let mp = meme.register(&mut tape, true);
    let lp = local.register(&mut tape, false);
    let input = tape.constant(x.clone());
    let meme_logits = meme.forward(&mut tape, &mp, input)?;
    let local_logits = local.forward(&mut tape, &lp, input)?;
    let loss = fml_meme_loss(&mut tape, meme_logits, local_logits, y, beta, tau)?;
    let meme_value = tape.value(loss).item().as_f64();
    let mut grads = tape.backward(loss)?;
    let gm = collect_grads(&mut grads, &mp, meme);
    meme_opt.step(meme.params_mut(), &gm, None)?;
    Ok((meme_value, local_value))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Top-1 accuracy in `[0, 1]`.
    pub accuracy: f64,
    pub loss: f64,
}

const EVAL_BATCH: usize = 500;

/// Top-1 accuracy (argmax ties go to the lowest class) and mean
/// cross-entropy over the selected samples.
pub fn evaluate<T: Element>(model: &Model<T>, shard: Shard<'_>) -> Result<Evaluation> {
    shard.ensure_nonempty()?;
    let classes = model
        .classes()
        .ok_or_else(|| Error::Usage("cannot evaluate a model without a classifier".into()))?;
    if classes < shard.dataset.classes() {
        return Err(Error::Usage(format!(
            "model has {classes} outputs for a {}-class dataset",
            shard.dataset.classes()
        )));
    }
    let (mut correct, mut loss) = (0usize, 0.0f64);
    for chunk in shard.indices.chunks(EVAL_BATCH) {
        let (x, y) = shard.dataset.batch::<T>(chunk);
        let logits = model.predict(&x)?;
        for (row, &label) in logits.data().chunks(classes).zip(&y) {
            correct += usize::from(argmax(row) == label);
            loss += row_cross_entropy(row, label);
        }
    }
    let n = shard.indices.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    })
}

pub(crate) fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn row_cross_entropy<T: Element>(row: &[T], label: usize) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    lse - row[label].as_f64()
}
