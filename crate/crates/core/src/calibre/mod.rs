//! Prototype-calibrated self-supervised loss.
//!
//! One batch of `N` samples yields `2N` augmented views. The encoder maps them
//! to `z`, the projector to `h`. The composite loss is
//!
//! ```text
//! L = l_s + α · (l_p·[use_lp] + l_n·[use_ln])
//! ```
//!
//! where `l_s` is the base SSL loss, `l_p` contrasts per-cluster projection
//! means across the two views and `l_n` pulls each encoding toward its
//! cluster prototype. Clusters come from k-means over all `2N` encodings and
//! are treated as constants in the backward pass.

pub mod kmeans;
pub mod regularizers;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, PrototypeSet};
pub use regularizers::{
    compute_prototypes, divergence, loss_ln, loss_lp, share_assignments, ClusterAssignment, LnKernel,
};

use crate::augment::{augment_pair, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::model::{GlobalModel, Mlp, ModelVars};
use crate::ssl::{cosine_pair_loss, ntxent, Backbone};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibreConfig {
    /// Regularizer weight α.
    pub alpha: f64,
    /// Cluster count `K_r`; `None` uses `min(10, N / 4)` (at least 2).
    pub num_clusters: Option<usize>,
    /// Temperature of the base NT-Xent loss.
    pub tau: f64,
    /// Temperature shared by `L_n` and the prototype NT-Xent.
    pub tau_proto: f64,
    pub ln_kernel: LnKernel,
    pub use_ln: bool,
    pub use_lp: bool,
    pub backbone: Backbone,
}

impl Default for CalibreConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            num_clusters: None,
            tau: 0.5,
            tau_proto: 0.5,
            ln_kernel: LnKernel::DotInfonce,
            use_ln: true,
            use_lp: true,
            backbone: Backbone::Simclr,
        }
    }
}

impl CalibreConfig {
    /// Plain SSL: same pipeline with both regularizers off.
    pub fn baseline() -> Self {
        Self {
            use_ln: false,
            use_lp: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::param("calibre.alpha", "α ≥ 0"));
        }
        if let Some(k) = self.num_clusters {
            if k < 2 {
                return Err(Error::param("calibre.num_clusters", "K_r ≥ 2"));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::param("calibre.tau", "τ > 0"));
        }
        if !(self.tau_proto > 0.0) {
            return Err(Error::param("calibre.tau_proto", "τ_proto > 0"));
        }
        Ok(())
    }

    pub fn clusters_for(&self, batch: usize) -> usize {
        self.num_clusters.unwrap_or_else(|| (batch / 4).clamp(2, 10))
    }

    /// Whether the regularizers contribute to the optimized loss.
    pub fn regularized(&self) -> bool {
        self.alpha != 0.0 && (self.use_ln || self.use_lp)
    }

    /// Smallest batch the loss accepts.
    pub fn min_batch(&self, batch: usize) -> usize {
        self.clusters_for(batch).max(2)
    }
}

/// Scalar values of the loss terms. Regularizers that are switched off are
/// still evaluated for telemetry when possible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub l_s: f64,
    pub l_n: Option<f64>,
    pub l_p: Option<f64>,
}

/// Loss of one batch, still attached to its tape.
pub struct BatchLoss {
    tape: Tape,
    vars: ModelVars,
    loss: Var,
    pub parts: LossParts,
    pub divergence: f64,
    pub clusters: ClusterAssignment,
    /// Interleaved views, `[2N × d]`.
    pub views: Tensor,
}

impl BatchLoss {
    pub fn value(&self) -> f64 {
        self.parts.total
    }

    /// Gradient of the loss over the flattened model parameters.
    pub fn gradient(self) -> Result<Vec<f64>> {
        let grads = self.tape.backward(self.loss)?;
        self.vars.flat_grad(&grads)
    }
}

/// Where cluster labels come from.
#[derive(Debug, Clone, Copy)]
pub enum ClusterSource<'a> {
    KMeans { seed: u64 },
    Fixed(&'a ClusterAssignment),
}

/// Augments a batch into interleaved view pairs.
pub fn make_views<R: Rng + ?Sized>(
    batch: &[&[f64]],
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(2 * batch.len());
    for x in batch {
        let (a, b) = augment_pair(x, policy, rng);
        rows.push(a);
        rows.push(b);
    }
    Tensor::from_rows(&rows)
}

/// Full per-batch loss: augment, encode, project, base loss, clustering,
/// prototype regularizers and divergence.
pub fn calibre_batch_loss<R: RngCore + ?Sized>(
    model: &GlobalModel,
    batch: &[&[f64]],
    policy: &AugmentationPolicy,
    config: &CalibreConfig,
    rng: &mut R,
) -> Result<BatchLoss> {
    let views = make_views(batch, policy, rng)?;
    let seed = rng.next_u64();
    calibre_loss_on_views(model, views, config, ClusterSource::KMeans { seed })
}

/// The composite loss for precomputed views.
pub fn calibre_loss_on_views(
    model: &GlobalModel,
    views: Tensor,
    config: &CalibreConfig,
    source: ClusterSource<'_>,
) -> Result<BatchLoss> {
    config.validate()?;
    let n = views.rows() / 2;
    if !views.rows().is_multiple_of(2) {
        return Err(Error::Contract("views must come in pairs".into()));
    }
    let k_r = config.clusters_for(n);
    if n < k_r.max(2) {
        return Err(Error::Contract(format!(
            "batch of {n} samples is smaller than max(2, K_r = {k_r})"
        )));
    }

    let mut tape = Tape::new();
    let vars = model.register(&mut tape)?;
    let x = tape.constant(views.clone())?;
    let z = Mlp::forward(&mut tape, &vars.encoder, x)?;
    let h = Mlp::forward(&mut tape, &vars.projector, z)?;

    let even: Vec<usize> = (0..n).map(|i| 2 * i).collect();
    let odd: Vec<usize> = (0..n).map(|i| 2 * i + 1).collect();
    let h_even = tape.select_rows(h, &even)?;
    let h_odd = tape.select_rows(h, &odd)?;

    let l_s = match config.backbone {
        Backbone::Simclr => ntxent(&mut tape, h, config.tau)?,
        Backbone::CosinePair => cosine_pair_loss(&mut tape, h_even, h_odd)?,
    };

    let (clusters, divergence) = match source {
        ClusterSource::KMeans { seed } => {
            let protos = kmeans(tape.value(z), k_r, seed)?;
            let div = divergence(tape.value(z), &protos);
            (share_assignments(&protos, n)?, div)
        }
        ClusterSource::Fixed(c) => {
            if c.labels.len() != n {
                return Err(Error::Contract("fixed clusters do not match the batch".into()));
            }
            let per_view: Vec<usize> = c.labels.iter().flat_map(|l| [*l, *l]).collect();
            let centroids = compute_prototypes(tape.value(z), &per_view, c.k)?;
            let protos = PrototypeSet {
                counts: per_view.iter().fold(vec![0; c.k], |mut acc, l| {
                    acc[*l] += 1;
                    acc
                }),
                assignments: per_view,
                centroids,
                inertia: 0.0,
                inertia_history: Vec::new(),
            };
            (c.clone(), divergence(tape.value(z), &protos))
        }
    };

    let z_even = tape.select_rows(z, &even)?;
    let z_odd = tape.select_rows(z, &odd)?;
    let l_n = loss_ln(&mut tape, z_even, z_odd, &clusters, config.tau_proto, config.ln_kernel);
    // With a single occupied cluster there are no prototype negatives and
    // L_p is left out of this batch's loss.
    let lp_defined = clusters.k >= 2;
    let l_p = loss_lp(&mut tape, h_even, h_odd, &clusters, config.tau_proto);

    // Inactive terms are kept for telemetry only and never reach the loss.
    let (l_n, l_p) = if config.regularized() {
        (
            if config.use_ln { Some(l_n?) } else { l_n.ok() },
            if config.use_lp && lp_defined { Some(l_p?) } else { l_p.ok() },
        )
    } else {
        (l_n.ok(), l_p.ok())
    };

    let active: Vec<Var> = [(config.use_lp, l_p), (config.use_ln, l_n)]
        .into_iter()
        .filter_map(|(on, v)| if on { v } else { None })
        .collect();
    let loss = if config.regularized() && !active.is_empty() {
        let mut reg = active[0];
        for v in &active[1..] {
            reg = tape.add(reg, *v)?;
        }
        let weighted = tape.scale(reg, config.alpha)?;
        tape.add(l_s, weighted)?
    } else {
        l_s
    };

    let scalar = |v: Option<Var>| v.and_then(|v| tape.value(v).item().ok());
    let parts = LossParts {
        total: tape.value(loss).item()?,
        l_s: tape.value(l_s).item()?,
        l_n: scalar(l_n),
        l_p: scalar(l_p),
    };
    Ok(BatchLoss {
        tape,
        vars,
        loss,
        parts,
        divergence,
        clusters,
        views,
    })
}
