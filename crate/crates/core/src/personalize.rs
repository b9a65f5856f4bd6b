//! Personalization stage: each client freezes the shared encoder, trains a
//! linear head on its own labeled features and reports test accuracy.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{Linear, Mlp};
use crate::partition::ClientDataset;
use crate::rng::{rng_for, STREAM_HEAD};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonalizationConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Write `embeddings_{client}.csv` for every client.
    pub export_embeddings: bool,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.05,
            batch_size: 32,
            export_embeddings: true,
        }
    }
}

impl PersonalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::param("personalization.batch_size", "batch_size ≥ 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("personalization.learning_rate", "learning_rate ≥ 0"));
        }
        Ok(())
    }
}

/// Linear classifier over encoder features. Its output covers every class of
/// the dataset, whether or not the client holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalHead {
    pub client_id: usize,
    /// `[K × d_z]`.
    pub weight: Tensor,
    /// `[K]`.
    pub bias: Tensor,
}

impl PersonalHead {
    pub fn zeros(client_id: usize, num_classes: usize, dim: usize) -> Self {
        Self {
            client_id,
            weight: Tensor::zeros(&[num_classes, dim]),
            bias: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        (0..self.num_classes())
            .map(|k| {
                self.weight.row(k).iter().zip(feature).map(|(w, x)| w * x).sum::<f64>()
                    + self.bias.data()[k]
            })
            .collect()
    }

    /// Argmax of the logits; ties go to the lowest class index.
    pub fn predict(&self, feature: &[f64]) -> usize {
        let logits = self.logits(feature);
        let mut best = 0;
        for (k, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = k;
            }
        }
        best
    }
}

/// Encoder features of `inputs`, one row each, without augmentation.
pub fn extract_features<R: AsRef<[f64]>>(encoder: &Mlp, inputs: &[R]) -> Result<Tensor> {
    if inputs.is_empty() {
        return Ok(Tensor::zeros(&[0, encoder.output_dim()]));
    }
    for x in inputs {
        if x.as_ref().len() != encoder.input_dim() {
            return Err(Error::Dimension {
                op: "extract_features",
                left: vec![encoder.input_dim()],
                right: vec![x.as_ref().len()],
            });
        }
    }
    encoder.forward_values(&Tensor::from_rows(inputs)?)
}

/// Encoder that passes inputs through unchanged.
pub fn identity_encoder(dim: usize) -> Result<Mlp> {
    let mut weight = Tensor::zeros(&[dim, dim]);
    for i in 0..dim {
        weight.data_mut()[i * dim + i] = 1.0;
    }
    Mlp::new(vec![Linear::new(weight, Tensor::zeros(&[dim]))?])
}

/// Mean softmax cross-entropy of the linear head `x · wᵀ + b` against
/// `labels`. `w` is `[K × d]`, `b` is `[K]`, `x` is `[B × d]`.
pub fn head_cross_entropy(tape: &mut Tape, w: Var, b: Var, x: Var, labels: &[usize]) -> Result<Var> {
    let k = tape.value(w).rows();
    let rows = tape.value(x).rows();
    if labels.len() != rows {
        return Err(Error::Dimension {
            op: "head_cross_entropy",
            left: vec![rows],
            right: vec![labels.len()],
        });
    }
    let wt = tape.transpose(w)?;
    let xw = tape.matmul(x, wt)?;
    let logits = tape.add_bias(xw, b)?;
    let lse = tape.logsumexp_select(logits, (0..rows).map(|i| (i, (0..k).collect())).collect())?;
    let picked = tape.pick(logits, labels.iter().copied().enumerate().collect())?;
    let nll = tape.sub(lse, picked)?;
    tape.mean(nll)
}

fn head_step(head: &PersonalHead, features: &Tensor, labels: &[usize], rows: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let w = tape.param(head.weight.clone())?;
    let b = tape.param(head.bias.clone())?;
    let x = tape.constant(Tensor::from_rows(&rows.iter().map(|r| features.row(*r)).collect::<Vec<_>>())?)?;
    let batch_labels: Vec<usize> = rows.iter().map(|r| labels[*r]).collect();
    let loss = head_cross_entropy(&mut tape, w, b, x, &batch_labels)?;
    let grads = tape.backward(loss)?;
    let gw = grads.wrt(w).ok_or_else(|| Error::Contract("head weight gradient missing".into()))?;
    let gb = grads.wrt(b).ok_or_else(|| Error::Contract("head bias gradient missing".into()))?;
    Ok((gw.to_vec(), gb.to_vec()))
}

/// Mini-batch SGD on softmax cross-entropy from a zero-initialized head.
/// Batches are reshuffled every epoch from `seed`; the last batch of an
/// epoch may be short.
pub fn train_head(
    client_id: usize,
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    config: &PersonalizationConfig,
    seed: u64,
) -> Result<PersonalHead> {
    config.validate()?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::Contract(format!("client {client_id} has no labeled training samples")));
    }
    if features.rows() != n {
        return Err(Error::Dimension {
            op: "train_head",
            left: vec![features.rows()],
            right: vec![n],
        });
    }
    if let Some(bad) = labels.iter().find(|l| **l >= num_classes) {
        return Err(Error::Domain {
            op: "train_head",
            detail: format!("label {bad} outside {num_classes} classes"),
        });
    }
    let mut head = PersonalHead::zeros(client_id, num_classes, features.cols());
    let mut rng = rng_for(seed, &[STREAM_HEAD]);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(config.batch_size) {
            let (gw, gb) = head_step(&head, features, labels, rows)?;
            for (p, g) in head.weight.data_mut().iter_mut().zip(&gw) {
                *p -= config.learning_rate * g;
            }
            for (p, g) in head.bias.data_mut().iter_mut().zip(&gb) {
                *p -= config.learning_rate * g;
            }
        }
    }
    Ok(head)
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(head: &PersonalHead, features: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Contract(format!("client {} has an empty test set", head.client_id)));
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(i, l)| head.predict(features.row(*i)) == **l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn evaluate(head: &PersonalHead, encoder: &Mlp, test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Contract(format!("client {} has an empty test set", head.client_id)));
    }
    let inputs: Vec<&[f64]> = test.iter().map(|s| s.features.as_slice()).collect();
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    accuracy(head, &extract_features(encoder, &inputs)?, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessStats {
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub std: f64,
}

/// Mean, population variance and standard deviation (Welford's update).
pub fn fairness_stats(accuracies: &[f64]) -> Option<FairnessStats> {
    if accuracies.is_empty() {
        return None;
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, a) in accuracies.iter().enumerate() {
        let delta = a - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (a - mean);
    }
    let variance = (m2 / accuracies.len() as f64).max(0.0);
    Some(FairnessStats {
        mean,
        variance,
        std: variance.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Participant,
    Novel,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Participant => "participant",
            Split::Novel => "novel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientAccuracy {
    pub client_id: usize,
    pub split: Split,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationReport {
    pub clients: Vec<ClientAccuracy>,
    pub participants: Option<FairnessStats>,
    pub novel: Option<FairnessStats>,
    pub combined: Option<FairnessStats>,
}

impl PersonalizationReport {
    pub fn from_accuracies(clients: Vec<ClientAccuracy>) -> Self {
        let of = |split: Option<Split>| {
            let accs: Vec<f64> = clients
                .iter()
                .filter(|c| split.is_none_or(|s| c.split == s))
                .map(|c| c.accuracy)
                .collect();
            fairness_stats(&accs)
        };
        Self {
            participants: of(Some(Split::Participant)),
            novel: of(Some(Split::Novel)),
            combined: of(None),
            clients,
        }
    }
}

/// Test-set encodings of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientEmbeddings {
    pub client_id: usize,
    pub labels: Vec<usize>,
    pub features: Tensor,
}

impl ClientEmbeddings {
    /// `client_id,label,z_1,…,z_d` per row, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (i, label) in self.labels.iter().enumerate() {
            write!(out, "{},{}", self.client_id, label).expect("write to String");
            for v in self.features.row(i) {
                write!(out, ",{v}").expect("write to String");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::write(dir.as_ref().join(format!("embeddings_{}.csv", self.client_id)), self.to_csv())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PersonalizationOutcome {
    pub report: PersonalizationReport,
    pub embeddings: Vec<ClientEmbeddings>,
}

fn personalize_client(
    encoder: &Mlp,
    client: &ClientDataset,
    split: Split,
    config: &PersonalizationConfig,
    seed: u64,
) -> Result<(ClientAccuracy, ClientEmbeddings)> {
    let num_classes = client.class_histogram.len();
    let train_x: Vec<&[f64]> = client.train.iter().map(|s| s.features.as_slice()).collect();
    let train_y: Vec<usize> = client.train.iter().map(|s| s.label).collect();
    let head = train_head(
        client.client_id,
        &extract_features(encoder, &train_x)?,
        &train_y,
        num_classes,
        config,
        seed,
    )?;
    let test_x: Vec<&[f64]> = client.test.iter().map(|s| s.features.as_slice()).collect();
    let test_y: Vec<usize> = client.test.iter().map(|s| s.label).collect();
    let features = extract_features(encoder, &test_x)?;
    let acc = accuracy(&head, &features, &test_y)?;
    Ok((
        ClientAccuracy {
            client_id: client.client_id,
            split,
            accuracy: acc,
        },
        ClientEmbeddings {
            client_id: client.client_id,
            labels: test_y,
            features,
        },
    ))
}

/// Trains and evaluates a head for every participant and novel client on the
/// frozen `encoder`. Results are ordered participants first, then novel
/// clients, each in the given order.
pub fn run_personalization_stage(
    encoder: &Mlp,
    participants: &[ClientDataset],
    novel: &[ClientDataset],
    config: &PersonalizationConfig,
    seed: u64,
) -> Result<PersonalizationOutcome> {
    let jobs: Vec<(&ClientDataset, Split)> = participants
        .iter()
        .map(|c| (c, Split::Participant))
        .chain(novel.iter().map(|c| (c, Split::Novel)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|(client, split)| personalize_client(encoder, client, *split, config, seed))
        .collect::<Result<Vec<_>>>()?;
    let (accs, embeddings): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(PersonalizationOutcome {
        report: PersonalizationReport::from_accuracies(accs),
        embeddings,
    })
}

/// Head trained on raw inputs (identity encoder) with the same recipe.
pub fn local_only_baseline(client: &ClientDataset, config: &PersonalizationConfig, seed: u64) -> Result<f64> {
    let dim = client
        .train
        .first()
        .or(client.test.first())
        .map(|s| s.features.len())
        .ok_or_else(|| Error::Contract(format!("client {} holds no samples", client.client_id)))?;
    let encoder = identity_encoder(dim)?;
    Ok(personalize_client(&encoder, client, Split::Participant, config, seed)?.0.accuracy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_dataset;
    use crate::model::{GlobalModel, ModelConfig};
    use crate::partition::partition_quantity;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_blobs() -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let center = if c == 0 { [-1.0, -1.0] } else { [1.0, 1.0] };
            rows.push(vec![center[0] + rng.random_range(-0.3..0.3), center[1] + rng.random_range(-0.3..0.3)]);
            labels.push(c);
        }
        (Tensor::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn identity_encoder_passes_inputs() {
        let enc = identity_encoder(3).unwrap();
        let x = vec![vec![0.1, -2.0, 5.0], vec![0.1, -2.0, 5.0]];
        let f = extract_features(&enc, &x).unwrap();
        assert_eq!(f.row(0), &[0.1, -2.0, 5.0]);
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn features_match_single_row_encoding() {
        let model = GlobalModel::init(4, &ModelConfig { hidden: vec![7], embedding_dim: 5 }, 1).unwrap();
        let x: Vec<Vec<f64>> = (0..6).map(|i| (0..4).map(|j| (i * 4 + j) as f64 * 0.1).collect()).collect();
        let f = extract_features(&model.encoder, &x).unwrap();
        for (i, row) in x.iter().enumerate() {
            assert_eq!(f.row(i), model.encode(row).unwrap().as_slice());
        }
        assert!(extract_features(&model.encoder, &[vec![1.0]]).is_err());
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (f, y) = two_blobs();
        let head = train_head(0, &f, &y, 2, &PersonalizationConfig::default(), 1).unwrap();
        assert_eq!(accuracy(&head, &f, &y).unwrap(), 1.0);
    }

    #[test]
    fn zero_lr_keeps_zero_head() {
        let (f, y) = two_blobs();
        let cfg = PersonalizationConfig { learning_rate: 0.0, ..Default::default() };
        let head = train_head(0, &f, &y, 2, &cfg, 1).unwrap();
        assert_eq!(head, PersonalHead::zeros(0, 2, 2));
    }

    #[test]
    fn full_batch_is_order_and_duplication_invariant() {
        let (f, y) = two_blobs();
        let cfg = PersonalizationConfig { batch_size: 1000, ..Default::default() };
        let base = train_head(0, &f, &y, 2, &cfg, 1).unwrap();

        let rows: Vec<Vec<f64>> = (0..y.len()).map(|i| f.row(i).to_vec()).collect();
        let doubled_rows: Vec<Vec<f64>> = rows.iter().chain(&rows).cloned().collect();
        let doubled_y: Vec<usize> = y.iter().chain(&y).copied().collect();
        let doubled = train_head(0, &Tensor::from_rows(&doubled_rows).unwrap(), &doubled_y, 2, &cfg, 1).unwrap();

        let rev_rows: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let rev_y: Vec<usize> = y.iter().rev().copied().collect();
        let reversed = train_head(0, &Tensor::from_rows(&rev_rows).unwrap(), &rev_y, 2, &cfg, 9).unwrap();

        for other in [&doubled, &reversed] {
            for (a, b) in base.weight.data().iter().zip(other.weight.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in base.bias.data().iter().zip(other.bias.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_sets_are_rejected() {
        let f = Tensor::zeros(&[0, 2]);
        assert!(train_head(0, &f, &[], 2, &PersonalizationConfig::default(), 0).is_err());
        assert!(accuracy(&PersonalHead::zeros(0, 2, 2), &f, &[]).is_err());
    }

    #[test]
    fn constant_majority_and_manual_fixture() {
        // Zero head predicts class 0 everywhere.
        let head = PersonalHead::zeros(0, 3, 1);
        let f = Tensor::from_rows(&vec![vec![1.0]; 10]).unwrap();
        let y = [0, 0, 0, 0, 0, 0, 0, 1, 2, 1];
        assert!((accuracy(&head, &f, &y).unwrap() - 0.7).abs() < 1e-15);

        // Head: class = sign of the feature (class 1 if positive, else 0).
        let head = PersonalHead {
            client_id: 0,
            weight: Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap(),
            bias: Tensor::vector(vec![0.0, 0.0]),
        };
        let xs = [-2.0, -1.0, 0.0, 0.5, 1.0, 3.0, -0.5, 2.0, -3.0, 0.1];
        let y = [0, 0, 1, 1, 1, 0, 0, 1, 1, 1];
        // Predictions: 0 0 0 1 1 1 0 1 0 1 → 7 matches; 0.0 ties to class 0.
        let f = Tensor::from_rows(&xs.iter().map(|x| vec![*x]).collect::<Vec<_>>()).unwrap();
        assert!((accuracy(&head, &f, &y).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn fairness_cases() {
        let s = fairness_stats(&[0.42; 7]).unwrap();
        assert_eq!(s.variance, 0.0);
        let s = fairness_stats(&[0.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.variance, s.std), (0.5, 0.25, 0.5));
        assert!(fairness_stats(&[]).is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let mean = a.iter().sum::<f64>() / 20.0;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 20.0;
        let s = fairness_stats(&a).unwrap();
        assert!((s.variance - var).abs() < 1e-12);
        assert!((s.mean - mean).abs() < 1e-12);
    }

    fn clients() -> Vec<ClientDataset> {
        let ds = make_synthetic_dataset(4, 5, 60, 0.05, 2).unwrap();
        partition_quantity(&ds, 4, 2, 30, 3).unwrap()
    }

    #[test]
    fn stage_reports_both_splits_and_keeps_encoder() {
        let model = GlobalModel::init(5, &ModelConfig { hidden: vec![8], embedding_dim: 6 }, 2).unwrap();
        let before = model.flatten();
        let cs = clients();
        let out = run_personalization_stage(&model.encoder, &cs[..3], &cs[3..], &PersonalizationConfig::default(), 4).unwrap();
        assert_eq!(model.flatten(), before);
        assert_eq!(out.report.clients.len(), 4);
        assert_eq!(out.report.clients[3].split, Split::Novel);
        assert!(out.report.novel.is_some());
        assert_eq!(out.embeddings[0].features.cols(), 6);

        let none = run_personalization_stage(&model.encoder, &cs, &[], &PersonalizationConfig::default(), 4).unwrap();
        assert!(none.report.novel.is_none());
        assert_eq!(none.report.combined, none.report.participants);
    }

    #[test]
    fn identical_clients_are_perfectly_fair() {
        let model = GlobalModel::init(5, &ModelConfig::default(), 2).unwrap();
        let base = clients().remove(0);
        let same: Vec<ClientDataset> = (0..4).map(|id| ClientDataset { client_id: id, ..base.clone() }).collect();
        let out = run_personalization_stage(&model.encoder, &same, &[], &PersonalizationConfig::default(), 4).unwrap();
        assert_eq!(out.report.combined.unwrap().variance, 0.0);
    }

    #[test]
    fn local_baseline_on_raw_blobs() {
        // Blobs at 2·e_k, far apart relative to the unit-scale recipe.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let samples = (0..4)
            .flat_map(|k| (0..100).map(move |_| k))
            .map(|k| Sample {
                features: (0..5).map(|j| if j == k { 2.0 } else { 0.0 } + rng.random_range(-0.2..0.2)).collect(),
                label: k,
            })
            .collect();
        let ds = crate::data::Dataset::new(5, 4, samples).unwrap();
        let cs = partition_quantity(&ds, 4, 2, 60, 3).unwrap();
        let cfg = PersonalizationConfig::default();
        let frozen = PersonalizationConfig { learning_rate: 0.0, ..cfg.clone() };
        for c in &cs {
            let acc = local_only_baseline(c, &cfg, 1).unwrap();
            assert!(acc >= 0.95, "client {} accuracy {acc}", c.client_id);
            assert_eq!(acc, local_only_baseline(c, &cfg, 1).unwrap());
            // A frozen zero head always answers class 0, so it scores the
            // share of class-0 test samples: no better than guessing.
            let chance = local_only_baseline(c, &frozen, 1).unwrap();
            let share = c.test.iter().filter(|s| s.label == 0).count() as f64 / c.test.len() as f64;
            assert_eq!(chance, share);
            assert!(chance <= 0.5 + 0.2, "client {} chance {chance}", c.client_id);
        }
    }

    #[test]
    fn embeddings_csv_layout() {
        let e = ClientEmbeddings {
            client_id: 3,
            labels: vec![1, 0],
            features: Tensor::matrix(2, 2, vec![0.5, -1.0, 0.1, 2.0]).unwrap(),
        };
        assert_eq!(e.to_csv(), "3,1,0.5,-1\n3,0,0.1,2\n");
    }
}
