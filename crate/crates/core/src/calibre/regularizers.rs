//! Prototype quantities and the two prototype regularizers.
//!
//! All cluster structure (assignments, membership counts) enters the tape
//! as constants; gradients flow through the encodings and through the
//! prototypes as means of encodings.

use serde::{Deserialize, Serialize};

use super::kmeans::{self, PrototypeSet};
use crate::error::{Error, Result};
use crate::ssl::ntxent;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Scoring kernel for `L_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LnKernel {
    /// Dot-product InfoNCE; the positive term is included in the denominator.
    #[default]
    DotInfonce,
    /// Dot-product form whose denominator only runs over samples outside the
    /// anchor's cluster.
    DotStrict,
    /// Cross entropy of `softmax(−‖z − v_k‖² / τ)` against the cluster label.
    NegEuclideanSoftmax,
}

/// One cluster label per sample (shared by both of its views).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl ClusterAssignment {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|l| **l >= k) {
            return Err(Error::Contract(format!("cluster label {bad} out of range for {k} clusters")));
        }
        Ok(Self { labels, k })
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn nonempty_counts(&self) -> Result<Vec<usize>> {
        let counts = self.counts();
        match counts.iter().position(|c| *c == 0) {
            Some(cluster) => Err(Error::ClusterCoverage { cluster }),
            None => Ok(counts),
        }
    }

    /// `[k × n]` matrix whose product with `[n × d]` values gives cluster means.
    fn averaging_matrix(&self) -> Result<Tensor> {
        let counts = self.nonempty_counts()?;
        let n = self.labels.len();
        let mut data = vec![0.0; self.k * n];
        for (i, &l) in self.labels.iter().enumerate() {
            data[l * n + i] = 1.0 / counts[l] as f64;
        }
        Tensor::matrix(self.k, n, data)
    }
}

/// Derives per-sample cluster labels from k-means over the interleaved views
/// (`2i` first view, `2i + 1` second view). The two views vote; a split vote
/// goes to the first view. Clusters left without samples are dropped and the
/// remaining labels renumbered in order.
pub fn share_assignments(protos: &PrototypeSet, num_samples: usize) -> Result<ClusterAssignment> {
    if protos.assignments.len() != 2 * num_samples {
        return Err(Error::Contract(format!(
            "expected {} view assignments, got {}",
            2 * num_samples,
            protos.assignments.len()
        )));
    }
    // With two voters, a majority exists only when they agree.
    let raw: Vec<usize> = (0..num_samples).map(|i| protos.assignments[2 * i]).collect();
    let mut present = vec![false; protos.k()];
    for &r in &raw {
        present[r] = true;
    }
    let mut remap = vec![usize::MAX; protos.k()];
    let mut kept = 0;
    for (old, _) in present.iter().enumerate().filter(|(_, p)| **p) {
        remap[old] = kept;
        kept += 1;
    }
    ClusterAssignment::new(raw.into_iter().map(|r| remap[r]).collect(), kept)
}

/// Per-cluster arithmetic means of `values` rows.
pub fn compute_prototypes(values: &Tensor, assignments: &[usize], k: usize) -> Result<Vec<Vec<f64>>> {
    if assignments.len() != values.rows() {
        return Err(Error::Dimension {
            op: "compute_prototypes",
            left: values.shape().to_vec(),
            right: vec![assignments.len()],
        });
    }
    kmeans::means(values, assignments, k)
}

/// Mean Euclidean distance from each row of `z` to its assigned centroid.
pub fn divergence(z: &Tensor, protos: &PrototypeSet) -> f64 {
    let n = protos.assignments.len();
    if n == 0 {
        return 0.0;
    }
    protos
        .assignments
        .iter()
        .enumerate()
        .map(|(i, a)| {
            z.row(i)
                .iter()
                .zip(&protos.centroids[*a])
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n as f64
}

/// Prototype-based meta regularizer.
///
/// Prototypes `v_k` are the cluster means of `z_odd`; the scored samples are
/// the rows of `z_even`. Per-sample terms are averaged within each cluster
/// and summed over clusters.
pub fn loss_ln(
    tape: &mut Tape,
    z_even: Var,
    z_odd: Var,
    clusters: &ClusterAssignment,
    tau: f64,
    kernel: LnKernel,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::param("tau_proto", "τ_proto > 0"));
    }
    let n = clusters.labels.len();
    if tape.value(z_even).rows() != n || tape.value(z_odd).rows() != n {
        return Err(Error::Dimension {
            op: "loss_ln",
            left: tape.value(z_even).shape().to_vec(),
            right: vec![n],
        });
    }
    let counts = clusters.nonempty_counts()?;
    let avg = tape.constant(clusters.averaging_matrix()?)?;
    let protos = tape.matmul(avg, z_odd)?;
    let labels = &clusters.labels;

    let (lse, picked) = match kernel {
        LnKernel::DotInfonce | LnKernel::DotStrict => {
            let pt = tape.transpose(protos)?;
            let dots = tape.matmul(z_even, pt)?;
            let scaled = tape.scale(dots, 1.0 / tau)?;
            // Row k of the transpose holds z_a · v_k / τ for every sample a.
            let by_proto = tape.transpose(scaled)?;
            let mut entries = Vec::with_capacity(n);
            for (j, &k) in labels.iter().enumerate() {
                let mut cols: Vec<usize> = (0..n).filter(|a| labels[*a] != k).collect();
                if kernel == LnKernel::DotInfonce {
                    cols.push(j);
                } else if cols.is_empty() {
                    return Err(Error::Contract(
                        "strict L_n needs samples outside every cluster".into(),
                    ));
                }
                entries.push((k, cols));
            }
            let lse = tape.logsumexp_select(by_proto, entries)?;
            let picked = tape.pick(by_proto, labels.iter().enumerate().map(|(j, k)| (*k, j)).collect())?;
            (lse, picked)
        }
        LnKernel::NegEuclideanSoftmax => {
            let d = tape.pairwise_sq_dist(z_even, protos)?;
            let logits = tape.scale(d, -1.0 / tau)?;
            let all: Vec<usize> = (0..clusters.k).collect();
            let lse = tape.logsumexp_select(logits, (0..n).map(|j| (j, all.clone())).collect())?;
            let picked = tape.pick(logits, labels.iter().enumerate().map(|(j, k)| (j, *k)).collect())?;
            (lse, picked)
        }
    };
    let terms = tape.sub(lse, picked)?;
    let weights = Tensor::vector(labels.iter().map(|k| 1.0 / counts[*k] as f64).collect());
    let weights = tape.constant(weights)?;
    let weighted = tape.mul(terms, weights)?;
    tape.sum(weighted)
}

/// Prototype-oriented contrastive regularizer: NT-Xent over the per-cluster
/// means of both views' projections, paired as (first view, second view).
pub fn loss_lp(
    tape: &mut Tape,
    h_even: Var,
    h_odd: Var,
    clusters: &ClusterAssignment,
    tau: f64,
) -> Result<Var> {
    if clusters.k < 2 {
        return Err(Error::Contract(format!(
            "L_p needs at least two clusters for negatives, got {}",
            clusters.k
        )));
    }
    let counts = clusters.nonempty_counts()?;
    let n = clusters.labels.len();
    let k = clusters.k;
    let mut first = vec![0.0; 2 * k * n];
    let mut second = vec![0.0; 2 * k * n];
    for (i, &c) in clusters.labels.iter().enumerate() {
        let w = 1.0 / counts[c] as f64;
        first[(2 * c) * n + i] = w;
        second[(2 * c + 1) * n + i] = w;
    }
    let first = tape.constant(Tensor::matrix(2 * k, n, first)?)?;
    let second = tape.constant(Tensor::matrix(2 * k, n, second)?)?;
    let a = tape.matmul(first, h_even)?;
    let b = tape.matmul(second, h_odd)?;
    let nu = tape.add(a, b)?;
    ntxent(tape, nu, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssl::ntxent_value;

    fn eval_ln(z_even: &[Vec<f64>], z_odd: &[Vec<f64>], labels: Vec<usize>, k: usize, tau: f64, kernel: LnKernel) -> f64 {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_rows(z_even).unwrap()).unwrap();
        let o = tape.constant(Tensor::from_rows(z_odd).unwrap()).unwrap();
        let c = ClusterAssignment::new(labels, k).unwrap();
        let l = loss_ln(&mut tape, e, o, &c, tau, kernel).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn prototype_means() {
        let v = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0], vec![5.0, 1.0]]).unwrap();
        let p = compute_prototypes(&v, &[0, 0, 1], 2).unwrap();
        assert_eq!(p, vec![vec![1.0, 1.0], vec![5.0, 1.0]]);
        assert!(matches!(compute_prototypes(&v, &[0, 0, 0], 2), Err(Error::ClusterCoverage { cluster: 1 })));
    }

    #[test]
    fn ln_orthogonal_two_point_closed_form() {
        // z_j = v_k, v_0 = [2, 0], v_1 = [0, 2], τ = 1.
        let z = vec![vec![2.0, 0.0], vec![0.0, 2.0]];
        let v = eval_ln(&z, &z, vec![0, 1], 2, 1.0, LnKernel::DotInfonce);
        // Each term: −log(e^4 / (e^4 + e^0)).
        let term = -(4f64.exp() / (4f64.exp() + 1.0)).ln();
        assert!((v - 2.0 * term).abs() < 1e-12);
        let strict = eval_ln(&z, &z, vec![0, 1], 2, 1.0, LnKernel::DotStrict);
        assert!((strict - 2.0 * -4.0).abs() < 1e-12);
    }

    #[test]
    fn ln_euclidean_far_clusters_is_near_zero() {
        let z = vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]];
        let v = eval_ln(&z, &z, vec![0, 1, 2], 3, 1.0, LnKernel::NegEuclideanSoftmax);
        assert!(v < 1e-3);
    }

    #[test]
    fn ln_falls_when_member_moves_toward_its_prototype() {
        let z_odd = vec![vec![1.0, 0.0], vec![1.0, 0.2], vec![0.0, 1.0], vec![0.2, 1.0]];
        let mut z_even = z_odd.clone();
        z_even[0] = vec![0.5, 0.5];
        for kernel in [LnKernel::DotInfonce, LnKernel::NegEuclideanSoftmax] {
            let before = eval_ln(&z_even, &z_odd, vec![0, 0, 1, 1], 2, 0.5, kernel);
            let mut moved = z_even.clone();
            moved[0] = vec![0.9, 0.1];
            let after = eval_ln(&moved, &z_odd, vec![0, 0, 1, 1], 2, 0.5, kernel);
            assert!(after < before, "{kernel:?}: {after} ≥ {before}");
        }
    }

    #[test]
    fn ln_is_label_permutation_invariant() {
        let z: Vec<Vec<f64>> = (0..6).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos(), 0.3]).collect();
        let a = eval_ln(&z, &z, vec![0, 1, 2, 0, 1, 2], 3, 0.5, LnKernel::DotInfonce);
        let b = eval_ln(&z, &z, vec![2, 0, 1, 2, 0, 1], 3, 0.5, LnKernel::DotInfonce);
        assert!((a - b).abs() < 1e-12);
    }

    fn eval_lp(h_even: &[Vec<f64>], h_odd: &[Vec<f64>], labels: Vec<usize>, k: usize) -> f64 {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_rows(h_even).unwrap()).unwrap();
        let o = tape.constant(Tensor::from_rows(h_odd).unwrap()).unwrap();
        let c = ClusterAssignment::new(labels, k).unwrap();
        let l = loss_lp(&mut tape, e, o, &c, 0.5).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn lp_identical_views_reduce_to_duplicated_prototypes() {
        let h = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let v = eval_lp(&h, &h, vec![0, 0, 1, 1], 2);
        let dup = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        assert!((v - ntxent_value(&dup, 0.5).unwrap()).abs() < 1e-12);
        let e2 = 2f64.exp();
        let expected = -(e2 / (e2 + 2.0)).ln();
        assert!((v - expected).abs() < 1e-10);
    }

    #[test]
    fn lp_symmetries() {
        let he: Vec<Vec<f64>> = (0..6).map(|i| vec![(i as f64).sin(), 1.0, (i as f64).cos()]).collect();
        let ho: Vec<Vec<f64>> = (0..6).map(|i| vec![(i as f64 * 1.3).cos(), 0.5, 0.2]).collect();
        let base = eval_lp(&he, &ho, vec![0, 1, 2, 0, 1, 2], 3);
        let relabeled = eval_lp(&he, &ho, vec![1, 2, 0, 1, 2, 0], 3);
        assert!((base - relabeled).abs() < 1e-12);
        let scale = |v: &[Vec<f64>]| v.iter().map(|r| r.iter().map(|x| 2.0 * x).collect()).collect::<Vec<Vec<f64>>>();
        let scaled = eval_lp(&scale(&he), &scale(&ho), vec![0, 1, 2, 0, 1, 2], 3);
        assert!((base - scaled).abs() < 1e-10);
    }

    #[test]
    fn lp_needs_two_clusters() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap()).unwrap();
        let c = ClusterAssignment::new(vec![0, 0], 1).unwrap();
        assert!(matches!(loss_lp(&mut tape, h, h, &c, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn divergence_cases() {
        let z = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -3.0]]).unwrap();
        let p = PrototypeSet {
            centroids: vec![vec![0.0, 0.0]],
            assignments: vec![0, 0],
            counts: vec![2],
            inertia: 0.0,
            inertia_history: vec![],
        };
        assert!((divergence(&z, &p) - 2.0).abs() < 1e-12);
        let at = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let p0 = PrototypeSet { assignments: vec![0], counts: vec![1], ..p };
        assert_eq!(divergence(&at, &p0), 0.0);
    }

    #[test]
    fn split_votes_follow_first_view_and_compact() {
        let p = PrototypeSet {
            centroids: vec![vec![0.0]; 3],
            assignments: vec![2, 0, 2, 2, 0, 0],
            counts: vec![3, 0, 3],
            inertia: 0.0,
            inertia_history: vec![],
        };
        let c = share_assignments(&p, 3).unwrap();
        assert_eq!(c.k, 2);
        assert_eq!(c.labels, vec![1, 1, 0]);
    }
}
