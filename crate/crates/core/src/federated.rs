//! Training-stage protocol: client sampling, local SGD on the calibrated
//! loss, and server aggregation of client deltas.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::calibre::{calibre_batch_loss, CalibreConfig, LossParts};
use crate::error::{Error, Result};
use crate::model::GlobalModel;
use crate::partition::ClientDataset;
use crate::rng::{rng_for, STREAM_CLIENT, STREAM_SAMPLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    Fedavg,
    #[default]
    DivergenceWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub aggregation: Aggregation,
    /// Temperature of divergence weighting; `None` uses the round's mean divergence.
    pub divergence_temperature: Option<f64>,
    /// Write a checkpoint every this many rounds (0 disables).
    pub checkpoint_every: usize,
    /// Filled from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            num_clients: 100,
            rounds: 200,
            clients_per_round: 10,
            local_epochs: 3,
            batch_size: 256,
            learning_rate: 0.05,
            aggregation: Aggregation::DivergenceWeighted,
            divergence_temperature: None,
            checkpoint_every: 50,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("training.num_clients", self.num_clients),
            ("training.clients_per_round", self.clients_per_round),
            ("training.local_epochs", self.local_epochs),
            ("training.batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(name, format!("{} ≥ 1", name.trim_start_matches("training."))));
            }
        }
        if self.clients_per_round > self.num_clients {
            return Err(Error::param(
                "training.clients_per_round",
                "clients_per_round ≤ num_clients",
            ));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("training.learning_rate", "learning_rate ≥ 0"));
        }
        if let Some(t) = self.divergence_temperature {
            if !(t > 0.0) {
                return Err(Error::param("training.divergence_temperature", "T > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    pub client_id: usize,
    pub num_samples: usize,
    pub divergence: f64,
    /// Mean loss terms over all local batches.
    pub loss: LossParts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub selected_clients: Vec<usize>,
    pub per_client: Vec<ClientRoundStats>,
    pub aggregation_weights: Vec<f64>,
}

impl RoundReport {
    pub fn mean_l_s(&self) -> f64 {
        self.per_client.iter().map(|c| c.loss.l_s).sum::<f64>() / self.per_client.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub delta: Vec<f64>,
    pub stats: ClientRoundStats,
}

/// Uniform sample of `clients_per_round` distinct ids, ascending. Depends
/// only on `(seed, round)`.
pub fn sample_clients(round: usize, config: &TrainingConfig) -> Vec<usize> {
    let mut rng = rng_for(config.seed, &[STREAM_SAMPLE, round as u64]);
    let mut ids: Vec<usize> = (0..config.num_clients).collect();
    let (chosen, _) = ids.partial_shuffle(&mut rng, config.clients_per_round);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    chosen
}

fn mean_parts(parts: &[LossParts]) -> LossParts {
    let n = parts.len() as f64;
    let mean_opt = |f: fn(&LossParts) -> Option<f64>| {
        parts.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
    };
    LossParts {
        total: parts.iter().map(|p| p.total).sum::<f64>() / n,
        l_s: parts.iter().map(|p| p.l_s).sum::<f64>() / n,
        l_n: mean_opt(|p| p.l_n),
        l_p: mean_opt(|p| p.l_p),
    }
}

/// Runs `local_epochs` of SGD on a private copy of `global` and returns the
/// parameter delta with the client's statistics. The divergence is the mean
/// over the final epoch's batches.
pub fn local_update(
    global: &GlobalModel,
    client: &ClientDataset,
    round: usize,
    config: &TrainingConfig,
    calibre: &CalibreConfig,
    policy: &AugmentationPolicy,
) -> Result<LocalUpdate> {
    let inputs = client.ssl_inputs();
    let mut rng = rng_for(config.seed, &[STREAM_CLIENT, round as u64, client.client_id as u64]);
    let mut model = global.clone();
    let mut all_parts = Vec::new();
    let mut final_divergences = Vec::new();
    let mut batch_counter = 0;

    for epoch in 0..config.local_epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng);
        let last_epoch = epoch + 1 == config.local_epochs;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < calibre.clusters_for(chunk.len()).max(2) {
                continue;
            }
            let batch: Vec<&[f64]> = chunk.iter().map(|i| inputs[*i]).collect();
            let failure = Error::DivergenceFailure {
                round,
                client: client.client_id,
                batch: batch_counter,
            };
            let loss = match calibre_batch_loss(&model, &batch, policy, calibre, &mut rng) {
                Err(Error::NonFinite { .. }) => return Err(failure),
                other => other?,
            };
            if !loss.value().is_finite() {
                return Err(failure);
            }
            all_parts.push(loss.parts);
            if last_epoch {
                final_divergences.push(loss.divergence);
            }
            let grad = match loss.gradient() {
                Err(Error::NonFinite { .. }) => return Err(failure),
                other => other?,
            };
            model.add_scaled(&grad, -config.learning_rate)?;
            batch_counter += 1;
        }
    }
    if all_parts.is_empty() {
        return Err(Error::Contract(format!(
            "client {} has {} training inputs, fewer than one batch",
            client.client_id,
            inputs.len()
        )));
    }
    let delta = model
        .flatten()
        .iter()
        .zip(global.flatten())
        .map(|(local, g)| local - g)
        .collect();
    Ok(LocalUpdate {
        delta,
        stats: ClientRoundStats {
            client_id: client.client_id,
            num_samples: inputs.len(),
            divergence: final_divergences.iter().sum::<f64>() / final_divergences.len() as f64,
            loss: mean_parts(&all_parts),
        },
    })
}

pub fn fedavg_weights(num_samples: &[usize]) -> Vec<f64> {
    let total: f64 = num_samples.iter().map(|n| *n as f64).sum();
    num_samples.iter().map(|n| *n as f64 / total).collect()
}

/// Sample-count weights scaled by `exp(−δ_c / T)` and renormalized.
///
/// `T` defaults to the mean divergence. The exponent is shifted by the
/// smallest divergence, which leaves the normalized weights unchanged and
/// makes uniform divergences reproduce [`fedavg_weights`] bit for bit.
pub fn divergence_weights(
    num_samples: &[usize],
    divergences: &[f64],
    temperature: Option<f64>,
) -> Result<Vec<f64>> {
    if num_samples.len() != divergences.len() {
        return Err(Error::Dimension {
            op: "divergence_weights",
            left: vec![num_samples.len()],
            right: vec![divergences.len()],
        });
    }
    if divergences.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
        return Err(Error::param("divergence", "δ_c ≥ 0"));
    }
    if divergences.is_empty() {
        return Ok(Vec::new());
    }
    let t = temperature.unwrap_or_else(|| divergences.iter().sum::<f64>() / divergences.len() as f64);
    let min = divergences.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = num_samples
        .iter()
        .zip(divergences)
        .map(|(n, d)| {
            let factor = if t > 0.0 { (-(d - min) / t).exp() } else { 1.0 };
            *n as f64 * factor
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|w| w / total).collect())
}

fn apply_weighted(global: &GlobalModel, deltas: &[Vec<f64>], weights: &[f64]) -> Result<GlobalModel> {
    if deltas.len() != weights.len() {
        return Err(Error::Dimension {
            op: "aggregate",
            left: vec![deltas.len()],
            right: vec![weights.len()],
        });
    }
    let p = global.param_count();
    let mut combined = vec![0.0; p];
    for (delta, w) in deltas.iter().zip(weights) {
        if delta.len() != p {
            return Err(Error::Dimension {
                op: "aggregate",
                left: vec![p],
                right: vec![delta.len()],
            });
        }
        for (c, d) in combined.iter_mut().zip(delta) {
            *c += w * d;
        }
    }
    let mut out = global.clone();
    out.add_scaled(&combined, 1.0)?;
    Ok(out)
}

/// `global + Σ_c (n_c / Σn) · delta_c`.
pub fn aggregate_fedavg(global: &GlobalModel, deltas: &[Vec<f64>], num_samples: &[usize]) -> Result<GlobalModel> {
    apply_weighted(global, deltas, &fedavg_weights(num_samples))
}

pub fn aggregate_divergence_weighted(
    global: &GlobalModel,
    deltas: &[Vec<f64>],
    num_samples: &[usize],
    divergences: &[f64],
    temperature: Option<f64>,
) -> Result<(GlobalModel, Vec<f64>)> {
    let weights = divergence_weights(num_samples, divergences, temperature)?;
    Ok((apply_weighted(global, deltas, &weights)?, weights))
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: GlobalModel,
    pub reports: Vec<RoundReport>,
}

/// Runs `config.rounds` rounds starting from `initial`. Rounds are numbered
/// from 1; the model's `version` is the number of completed rounds.
pub fn run_training_stage(
    initial: GlobalModel,
    partitions: &[ClientDataset],
    config: &TrainingConfig,
    calibre: &CalibreConfig,
    policy: &AugmentationPolicy,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainingOutcome> {
    config.validate()?;
    calibre.validate()?;
    policy.validate()?;
    if partitions.is_empty() {
        return Err(Error::Contract("training needs at least one client".into()));
    }
    if partitions.len() != config.num_clients {
        return Err(Error::param(
            "training.num_clients",
            format!("num_clients = number of participating partitions ({})", partitions.len()),
        ));
    }
    let mut model = initial;
    let mut reports = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let selected = sample_clients(round, config);
        let updates = selected
            .par_iter()
            .map(|id| local_update(&model, &partitions[*id], round, config, calibre, policy))
            .collect::<Result<Vec<_>>>()?;
        let deltas: Vec<Vec<f64>> = updates.iter().map(|u| u.delta.clone()).collect();
        let counts: Vec<usize> = updates.iter().map(|u| u.stats.num_samples).collect();
        let (next, weights) = match config.aggregation {
            Aggregation::Fedavg => (aggregate_fedavg(&model, &deltas, &counts)?, fedavg_weights(&counts)),
            Aggregation::DivergenceWeighted => {
                let divs: Vec<f64> = updates.iter().map(|u| u.stats.divergence).collect();
                aggregate_divergence_weighted(&model, &deltas, &counts, &divs, config.divergence_temperature)?
            }
        };
        model = next;
        model.version = round as u64;
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && round % config.checkpoint_every == 0 {
                model.write_checkpoint(dir.join(format!("round_{round}.model")))?;
            }
        }
        reports.push(RoundReport {
            round,
            selected_clients: selected,
            per_client: updates.into_iter().map(|u| u.stats).collect(),
            aggregation_weights: weights,
        });
    }
    Ok(TrainingOutcome { model, reports })
}
