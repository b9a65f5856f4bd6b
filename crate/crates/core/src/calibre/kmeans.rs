//! Lloyd's k-means with k-means++ seeding, used to produce prototypes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const MAX_ITERATIONS: usize = 100;

/// Cluster centroids with per-sample assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub counts: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every centroid update, in order.
    pub inertia_history: Vec<f64>,
}

impl PrototypeSet {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus<R: Rng + ?Sized>(points: &Tensor, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut centroids = vec![points.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Per-cluster means of `points` rows under `assignments`.
pub(crate) fn means(points: &Tensor, assignments: &[usize], k: usize) -> Result<Vec<Vec<f64>>> {
    let d = points.cols();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        if a >= k {
            return Err(Error::Contract(format!("assignment {a} out of range for {k} clusters")));
        }
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(&counts)
        .enumerate()
        .map(|(c, (s, n))| {
            if *n == 0 {
                Err(Error::ClusterCoverage { cluster: c })
            } else {
                Ok(s.into_iter().map(|v| v / *n as f64).collect())
            }
        })
        .collect()
}

/// Moves the farthest member of the largest cluster into each empty cluster.
fn repair_empty(points: &Tensor, assignments: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|c| *c == 0) else { return };
        let largest = (0..k).max_by(|a, b| counts[*a].cmp(&counts[*b]).then(b.cmp(a))).expect("k ≥ 1");
        let far = (0..assignments.len())
            .filter(|i| assignments[*i] == largest)
            .max_by(|a, b| {
                let da = sq_dist(points.row(*a), &centroids[largest]);
                let db = sq_dist(points.row(*b), &centroids[largest]);
                da.total_cmp(&db).then(b.cmp(a))
            })
            .expect("largest cluster is non-empty");
        assignments[far] = empty;
    }
}

fn inertia(points: &Tensor, assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, a)| sq_dist(points.row(i), &centroids[*a]))
        .sum()
}

/// Clusters the rows of `points` into `k` groups.
///
/// Iterates until assignments stop changing or [`MAX_ITERATIONS`] centroid
/// updates have run. The result never contains an empty cluster and every
/// centroid is the mean of its members.
pub fn kmeans(points: &Tensor, k: usize, seed: u64) -> Result<PrototypeSet> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::Contract("k-means needs k ≥ 1".into()));
    }
    if n < k {
        return Err(Error::Contract(format!("k-means needs N ≥ K, got N = {n}, K = {k}")));
    }
    let mut rng = rng_for(seed, &[0xc1]);
    let mut centroids = seed_plus_plus(points, k, &mut rng);
    let mut assignments: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centroids).0).collect();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..MAX_ITERATIONS {
        repair_empty(points, &mut assignments, &centroids, k);
        centroids = means(points, &assignments, k)?;
        history.push(inertia(points, &assignments, &centroids));
        let next: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centroids).0).collect();
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
    }
    if !converged {
        // Cap reached right after a reassignment: refresh centroids once more.
        repair_empty(points, &mut assignments, &centroids, k);
        centroids = means(points, &assignments, k)?;
        history.push(inertia(points, &assignments, &centroids));
    }
    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    let inertia = inertia(points, &assignments, &centroids);
    Ok(PrototypeSet {
        centroids,
        assignments,
        counts,
        inertia,
        inertia_history: history,
    })
}
