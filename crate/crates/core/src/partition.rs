//! Label-skewed client partitions and per-client train/test splits.
//!
//! Two partitioners are provided: quantity skew (every client holds a fixed
//! number of classes and a fixed number of training samples) and Dirichlet
//! skew (each class is spread over clients with Dirichlet proportions).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{class_histogram, Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng::{rng_for, SimRng};

/// Fraction of each client's allocation held out for its local test set.
pub const TEST_FRACTION: f64 = 0.2;

const DIRICHLET_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Feature vectors without labels, used only by self-supervised training.
    #[serde(default)]
    pub unlabeled: Vec<Vec<f64>>,
    pub class_histogram: Vec<usize>,
    /// Dataset indices of `train` followed by `test`.
    pub origin: Vec<usize>,
}

impl ClientDataset {
    fn from_allocation(
        client_id: usize,
        dataset: &Dataset,
        per_class: &[(Vec<usize>, usize)],
    ) -> Self {
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for (indices, test_count) in per_class {
            test_idx.extend_from_slice(&indices[..*test_count]);
            train_idx.extend_from_slice(&indices[*test_count..]);
        }
        let train: Vec<Sample> = train_idx.iter().map(|i| dataset.samples[*i].clone()).collect();
        let test = test_idx.iter().map(|i| dataset.samples[*i].clone()).collect();
        let class_histogram = class_histogram(&train, dataset.num_classes);
        Self {
            client_id,
            train,
            test,
            unlabeled: Vec::new(),
            class_histogram,
            origin: train_idx.into_iter().chain(test_idx).collect(),
        }
    }

    /// Feature vectors available to self-supervised training.
    pub fn ssl_inputs(&self) -> Vec<&[f64]> {
        self.train
            .iter()
            .map(|s| s.features.as_slice())
            .chain(self.unlabeled.iter().map(|v| v.as_slice()))
            .collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.class_histogram
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0)
            .map(|(k, _)| k)
            .collect()
    }
}

fn stratified_test_count(count: usize) -> usize {
    (count as f64 * TEST_FRACTION).round() as usize
}

/// Quantity-skewed partition: each client receives exactly
/// `classes_per_client` classes and exactly `samples_per_client` training
/// samples, spread evenly over its classes, plus a stratified test set sized
/// at [`TEST_FRACTION`] of the client's total allocation.
///
/// Classes are dealt to clients least-used-first with seeded tie breaking, so
/// demand is balanced across classes. Samples not dealt to any client stay in
/// an implicit remainder pool.
pub fn partition_quantity(
    dataset: &Dataset,
    num_clients: usize,
    classes_per_client: usize,
    samples_per_client: usize,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    let k = dataset.num_classes;
    if classes_per_client == 0 || classes_per_client > k {
        return Err(Error::param(
            "classes_per_client",
            format!("1 ≤ S ≤ {k} (number of classes)"),
        ));
    }
    if num_clients == 0 || samples_per_client < classes_per_client {
        return Err(Error::param(
            "samples_per_client",
            "num_clients ≥ 1 and samples_per_client ≥ classes_per_client",
        ));
    }
    let mut rng = rng_for(seed, &[0x9a4]);

    let mut usage = vec![0usize; k];
    let mut plans: Vec<Vec<(usize, usize)>> = Vec::with_capacity(num_clients);
    for _ in 0..num_clients {
        let mut order: Vec<(usize, u64, usize)> =
            (0..k).map(|c| (usage[c], rng.random::<u64>(), c)).collect();
        order.sort_unstable();
        let base = samples_per_client / classes_per_client;
        let extra = samples_per_client % classes_per_client;
        let plan: Vec<(usize, usize)> = order[..classes_per_client]
            .iter()
            .enumerate()
            .map(|(slot, &(_, _, class))| (class, base + usize::from(slot < extra)))
            .collect();
        for (class, _) in &plan {
            usage[*class] += 1;
        }
        plans.push(plan);
    }

    let mut pools = dataset.indices_by_class();
    let mut demand = vec![0usize; k];
    for plan in &plans {
        for &(class, train) in plan {
            demand[class] += train + test_quota(train);
        }
    }
    for class in 0..k {
        if demand[class] > pools[class].len() {
            return Err(Error::PartitionInfeasible {
                class,
                available: pools[class].len(),
                needed: demand[class],
            });
        }
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }

    let mut cursor = vec![0usize; k];
    Ok(plans
        .iter()
        .enumerate()
        .map(|(client_id, plan)| {
            let per_class: Vec<(Vec<usize>, usize)> = plan
                .iter()
                .map(|&(class, train)| {
                    let test = test_quota(train);
                    let start = cursor[class];
                    cursor[class] += train + test;
                    (pools[class][start..cursor[class]].to_vec(), test)
                })
                .collect();
            ClientDataset::from_allocation(client_id, dataset, &per_class)
        })
        .collect())
}

/// Test samples that make `train` the remaining `1 − TEST_FRACTION` share.
fn test_quota(train: usize) -> usize {
    (train as f64 * TEST_FRACTION / (1.0 - TEST_FRACTION)).round() as usize
}

fn dirichlet_draw(rng: &mut SimRng, gamma: &Gamma<f64>, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|d| d / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    }
}

/// Dirichlet label-skew partition: every labeled sample goes to exactly one
/// client, with each class split by proportions drawn from
/// `Dirichlet(concentration · 1)`. Each client's allocation is split into
/// train/test stratified by label.
///
/// The whole draw is repeated (up to 100 times) until every client has at
/// least `min_train` training samples and at least one test sample.
pub fn partition_dirichlet(
    dataset: &Dataset,
    num_clients: usize,
    concentration: f64,
    min_train: usize,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(Error::param("concentration", "β > 0"));
    }
    if num_clients == 0 {
        return Err(Error::param("num_clients", "num_clients ≥ 1"));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::param("concentration", format!("valid Gamma shape ({e})")))?;
    let mut rng = rng_for(seed, &[0xd12]);
    let by_class = dataset.indices_by_class();

    for _ in 0..DIRICHLET_RETRIES {
        let mut alloc: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); dataset.num_classes]; num_clients];
        for (class, indices) in by_class.iter().enumerate() {
            let mut shuffled = indices.clone();
            shuffled.shuffle(&mut rng);
            let props = dirichlet_draw(&mut rng, &gamma, num_clients);
            let n = shuffled.len();
            let mut acc = 0.0;
            let mut start = 0;
            for (client, p) in props.iter().enumerate() {
                acc += p;
                let end = if client + 1 == num_clients {
                    n
                } else {
                    ((acc * n as f64).round() as usize).clamp(start, n)
                };
                alloc[client][class] = shuffled[start..end].to_vec();
                start = end;
            }
        }
        let feasible = alloc.iter().all(|classes| {
            let test: usize = classes.iter().map(|idx| stratified_test_count(idx.len())).sum();
            let total: usize = classes.iter().map(Vec::len).sum();
            total - test >= min_train.max(1) && test >= 1
        });
        if feasible {
            return Ok(alloc
                .into_iter()
                .enumerate()
                .map(|(client_id, classes)| {
                    let per_class: Vec<(Vec<usize>, usize)> = classes
                        .into_iter()
                        .filter(|idx| !idx.is_empty())
                        .map(|idx| {
                            let t = stratified_test_count(idx.len());
                            (idx, t)
                        })
                        .collect();
                    ClientDataset::from_allocation(client_id, dataset, &per_class)
                })
                .collect());
        }
    }
    Err(Error::Contract(format!(
        "Dirichlet partition could not give each of {num_clients} clients ≥ {min_train} training samples and a test sample in {DIRICHLET_RETRIES} draws"
    )))
}

/// Deals an unlabeled pool round-robin (in seeded random order) onto clients.
pub fn attach_unlabeled(clients: &mut [ClientDataset], pool: &[Vec<f64>], seed: u64) {
    if clients.is_empty() {
        return;
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng_for(seed, &[0x0b1]));
    for (slot, idx) in order.into_iter().enumerate() {
        clients[slot % clients.len()].unlabeled.push(pool[idx].clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_dataset;
    use std::collections::HashSet;

    fn blobs(classes: usize, per_class: usize) -> Dataset {
        make_synthetic_dataset(classes, 4, per_class, 0.02, 9).unwrap()
    }

    #[test]
    fn quantity_exact_classes_and_counts() {
        let ds = blobs(10, 700);
        let clients = partition_quantity(&ds, 100, 2, 50, 1).unwrap();
        for c in &clients {
            assert_eq!(c.classes().len(), 2);
            assert_eq!(c.train.len(), 50);
            assert_eq!(c.class_histogram.iter().sum::<usize>(), 50);
            let test_classes: HashSet<usize> = c.test.iter().map(|s| s.label).collect();
            assert!(test_classes.iter().all(|k| c.class_histogram[*k] > 0));
        }
    }

    #[test]
    fn quantity_iid_degenerate() {
        let ds = blobs(3, 20);
        let clients = partition_quantity(&ds, 1, 3, 30, 4).unwrap();
        assert_eq!(clients[0].classes(), vec![0, 1, 2]);
    }

    #[test]
    fn quantity_is_seed_deterministic() {
        let ds = blobs(4, 30);
        let a = partition_quantity(&ds, 2, 2, 10, 5).unwrap();
        let b = partition_quantity(&ds, 2, 2, 10, 5).unwrap();
        assert_eq!(a, b);
        // Balanced dealing: two clients × two classes cover all four classes once.
        let mut all: Vec<usize> = a.iter().flat_map(|c| c.classes()).collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn quantity_no_duplicates_and_remainder_accounted() {
        let ds = blobs(5, 40);
        let clients = partition_quantity(&ds, 6, 2, 20, 2).unwrap();
        let mut seen = HashSet::new();
        for c in &clients {
            for i in &c.origin {
                assert!(seen.insert(*i), "sample {i} assigned twice");
            }
        }
        assert!(seen.len() <= ds.len());
        assert_eq!(seen.len() + (ds.len() - seen.len()), ds.len());
    }

    #[test]
    fn quantity_infeasible_names_class() {
        let ds = blobs(2, 10);
        let err = partition_quantity(&ds, 4, 2, 10, 1).unwrap_err();
        assert!(matches!(err, Error::PartitionInfeasible { class: 0, .. }), "{err}");
    }

    #[test]
    fn dirichlet_conserves_every_sample() {
        let ds = blobs(6, 50);
        let clients = partition_dirichlet(&ds, 10, 0.3, 1, 3).unwrap();
        let mut totals = vec![0usize; 6];
        let mut seen = HashSet::new();
        for c in &clients {
            for s in c.train.iter().chain(&c.test) {
                totals[s.label] += 1;
            }
            for i in &c.origin {
                assert!(seen.insert(*i));
            }
        }
        assert_eq!(totals, ds.class_counts());
        assert_eq!(seen.len(), ds.len());
    }

    #[test]
    fn dirichlet_large_concentration_is_near_global() {
        let ds = blobs(4, 2500);
        let clients = partition_dirichlet(&ds, 2, 1e6, 1, 8).unwrap();
        for c in &clients {
            let total = (c.train.len() + c.test.len()) as f64;
            let mut counts = vec![0usize; 4];
            for s in c.train.iter().chain(&c.test) {
                counts[s.label] += 1;
            }
            for n in counts {
                assert!((n as f64 / total - 0.25).abs() < 0.02);
            }
        }
    }

    #[test]
    fn dirichlet_rejects_bad_concentration() {
        let ds = blobs(2, 10);
        assert!(matches!(
            partition_dirichlet(&ds, 2, 0.0, 1, 1),
            Err(Error::Parameter { .. })
        ));
    }

    #[test]
    fn dirichlet_gives_up_when_clients_cannot_fill_a_batch() {
        let ds = blobs(2, 10);
        assert!(partition_dirichlet(&ds, 5, 0.3, 50, 1).is_err());
    }

    #[test]
    fn split_preserves_label_distribution() {
        let ds = blobs(5, 200);
        for c in partition_dirichlet(&ds, 8, 0.5, 1, 12).unwrap() {
            let test_hist = class_histogram(&c.test, 5);
            for (train_k, test_k) in c.class_histogram.iter().zip(&test_hist) {
                let expected = (train_k + test_k) as f64 * TEST_FRACTION;
                assert!((*test_k as f64 - expected).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn unlabeled_pool_is_dealt_evenly() {
        let ds = blobs(2, 20);
        let mut clients = partition_quantity(&ds, 3, 1, 5, 1).unwrap();
        let pool: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64; 4]).collect();
        attach_unlabeled(&mut clients, &pool, 2);
        let sizes: Vec<usize> = clients.iter().map(|c| c.unlabeled.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 7);
        assert!(sizes.iter().all(|s| *s == 2 || *s == 3));
        assert_eq!(clients[0].ssl_inputs().len(), 5 + sizes[0]);
    }
}
