//! Client data partitions.
//!
//! Training indices are split across clients either uniformly at random
//! (IID) or by label shards (Non-IID with `p` shards per client). Each client
//! also receives a private validate set drawn from the test split with the
//! same class profile as its training data.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionMode {
    Iid,
    /// `p` label shards per client.
    #[serde(rename = "noniid")]
    NonIid(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub clients: usize,
    pub mode: PartitionMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientData {
    pub client: usize,
    /// Indices into the training split.
    pub train: Vec<usize>,
    /// Indices into the test split.
    pub validate: Vec<usize>,
}

pub fn partition(spec: &PartitionSpec, train: &Dataset, test: &Dataset) -> Result<Vec<ClientData>> {
    match spec.mode {
        PartitionMode::Iid => partition_iid(train, test, spec.clients, spec.seed),
        PartitionMode::NonIid(p) => partition_noniid(train, test, spec.clients, p, spec.seed),
    }
}

/// Equal shuffled splits of both train and test data; leftovers are dropped.
pub fn partition_iid(train: &Dataset, test: &Dataset, clients: usize, seed: u64) -> Result<Vec<ClientData>> {
    if clients == 0 {
        return Err(Error::param("client count must be positive"));
    }
    if train.len() < clients || test.len() < clients {
        return Err(Error::param(format!(
            "cannot split {} train / {} test samples across {clients} clients",
            train.len(),
            test.len()
        )));
    }
    let mut rng = rng::stream(seed, rng::tags::PARTITION);
    let mut tr: Vec<usize> = (0..train.len()).collect();
    let mut te: Vec<usize> = (0..test.len()).collect();
    tr.shuffle(&mut rng);
    te.shuffle(&mut rng);
    let (ntr, nte) = (train.len() / clients, test.len() / clients);
    Ok((0..clients)
        .map(|k| ClientData {
            client: k,
            train: tr[k * ntr..(k + 1) * ntr].to_vec(),
            validate: te[k * nte..(k + 1) * nte].to_vec(),
        })
        .collect())
}

/// Indices ordered by label, ties by original index.
fn sorted_by_label(ds: &Dataset) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.sort_by_key(|&i| ds.labels()[i]);
    idx
}

/// Cuts `items` into `parts` contiguous pieces of equal size, the last piece
/// absorbing the remainder.
fn cut(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let size = items.len() / parts;
    (0..parts)
        .map(|s| {
            let end = if s + 1 == parts { items.len() } else { (s + 1) * size };
            items[s * size..end].to_vec()
        })
        .collect()
}

/// Label-sharded split into `clients * p` shards, `p` per client.
///
/// When the shard count is a multiple of the class count every class run is
/// cut into the same number of shards, so no shard straddles two classes
/// even when class sizes differ. Otherwise the label-sorted index list is cut
/// into equal contiguous shards.
pub fn partition_noniid(
    train: &Dataset,
    test: &Dataset,
    clients: usize,
    p: usize,
    seed: u64,
) -> Result<Vec<ClientData>> {
    if clients == 0 || p == 0 {
        return Err(Error::param("client count and shards per client must be positive"));
    }
    let shards_total = clients * p;
    if shards_total > train.len() {
        return Err(Error::param(format!(
            "{shards_total} shards requested for {} samples",
            train.len()
        )));
    }
    let sorted = sorted_by_label(train);
    let classes = train.classes();
    let shards: Vec<Vec<usize>> = if shards_total % classes == 0 {
        let per_class = shards_total / classes;
        let mut shards = Vec::with_capacity(shards_total);
        let mut start = 0;
        for c in 0..classes {
            let end = start + sorted[start..].iter().take_while(|&&i| train.labels()[i] == c).count();
            if end - start < per_class {
                return Err(Error::param(format!(
                    "class {c} has {} samples, fewer than {per_class} shards",
                    end - start
                )));
            }
            shards.extend(cut(&sorted[start..end], per_class));
            start = end;
        }
        shards
    } else {
        cut(&sorted, shards_total)
    };

    let mut rng = rng::stream(seed, rng::tags::PARTITION);
    let mut order: Vec<usize> = (0..shards_total).collect();
    order.shuffle(&mut rng);
    let train_sets: Vec<Vec<usize>> = (0..clients)
        .map(|k| {
            order[k * p..(k + 1) * p]
                .iter()
                .flat_map(|&s| shards[s].iter().copied())
                .collect()
        })
        .collect();

    let validate = mirror_on_test(&train_sets, train, test, &mut rng);
    Ok(train_sets
        .into_iter()
        .zip(validate)
        .enumerate()
        .map(|(client, (train, validate))| ClientData {
            client,
            train,
            validate,
        })
        .collect())
}

/// Allocates each test class among clients in proportion to their share of
/// that class in training (largest-remainder rounding, ties to lower client).
fn mirror_on_test(
    train_sets: &[Vec<usize>],
    train: &Dataset,
    test: &Dataset,
    rng: &mut impl rand::Rng,
) -> Vec<Vec<usize>> {
    let classes = train.classes().max(test.classes());
    let counts: Vec<Vec<usize>> = train_sets.iter().map(|s| class_histogram(s, train)).collect();
    let by_class = {
        let mut v = vec![Vec::new(); classes];
        for &i in &sorted_by_label(test) {
            v[test.labels()[i]].push(i);
        }
        v
    };
    let mut out = vec![Vec::new(); train_sets.len()];
    for (c, mut pool) in by_class.into_iter().enumerate() {
        pool.shuffle(rng);
        let owned: usize = counts.iter().map(|h| h.get(c).copied().unwrap_or(0)).sum();
        if owned == 0 || pool.is_empty() {
            continue;
        }
        let mut quotas: Vec<(usize, usize, usize)> = counts
            .iter()
            .enumerate()
            .map(|(k, h)| {
                let share = h.get(c).copied().unwrap_or(0) * pool.len();
                (k, share / owned, share % owned)
            })
            .collect();
        let assigned: usize = quotas.iter().map(|q| q.1).sum();
        let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
        by_remainder.sort_by(|&a, &b| quotas[b].2.cmp(&quotas[a].2).then(a.cmp(&b)));
        for &k in by_remainder.iter().take(pool.len() - assigned) {
            quotas[k].1 += 1;
        }
        let mut offset = 0;
        for (k, quota, _) in quotas {
            out[k].extend_from_slice(&pool[offset..offset + quota]);
            offset += quota;
        }
    }
    out
}

/// Per-class counts of the selected samples.
pub fn class_histogram(indices: &[usize], ds: &Dataset) -> Vec<usize> {
    let mut h = vec![0; ds.classes()];
    for &i in indices {
        h[ds.labels()[i]] += 1;
    }
    h
}

impl ClientData {
    pub fn train_histogram(&self, train: &Dataset) -> Vec<usize> {
        class_histogram(&self.train, train)
    }

    pub fn validate_histogram(&self, test: &Dataset) -> Vec<usize> {
        class_histogram(&self.validate, test)
    }

    pub fn train_classes(&self, train: &Dataset) -> Vec<usize> {
        self.train_histogram(train)
            .iter()
            .enumerate()
            .filter(|&(_, &n)| n > 0)
            .map(|(c, _)| c)
            .collect()
    }
}
