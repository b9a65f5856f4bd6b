//! Base self-supervised objectives: NT-Xent over paired views and the
//! cosine-pair loss used for the BYOL-style ablation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which base objective supplies `l_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    #[default]
    Simclr,
    CosinePair,
}

/// Normalized-temperature cross entropy.
///
/// `h` is `[2N × d]` with rows `2i` and `2i + 1` the two views of sample `i`.
/// Each row is an anchor; its softmax runs over every other row, so the
/// positive is part of the denominator. The result is the mean over all 2N
/// anchors.
pub fn ntxent(tape: &mut Tape, h: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::param("tau", "τ > 0"));
    }
    let (rows, _) = tape.value(h).dims2();
    if rows % 2 != 0 {
        return Err(Error::Contract(format!("NT-Xent needs paired views, got {rows} rows")));
    }
    if rows < 4 {
        return Err(Error::Contract(
            "NT-Xent needs at least two samples so that negatives exist".into(),
        ));
    }
    let unit = tape.l2_normalize(h)?;
    let unit_t = tape.transpose(unit)?;
    let sim = tape.matmul(unit, unit_t)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let denominators = (0..rows)
        .map(|i| (i, (0..rows).filter(|a| *a != i).collect()))
        .collect();
    let lse = tape.logsumexp_select(logits, denominators)?;
    let positives = tape.pick(logits, (0..rows).map(|i| (i, i ^ 1)).collect())?;
    let terms = tape.sub(lse, positives)?;
    tape.mean(terms)
}

/// `mean(2 − 2·cos(h1_i, h2_i))` over the rows of two equally shaped batches.
pub fn cosine_pair_loss(tape: &mut Tape, h1: Var, h2: Var) -> Result<Var> {
    if tape.value(h1).shape() != tape.value(h2).shape() {
        return Err(Error::Dimension {
            op: "cosine_pair_loss",
            left: tape.value(h1).shape().to_vec(),
            right: tape.value(h2).shape().to_vec(),
        });
    }
    let u1 = tape.l2_normalize(h1)?;
    let u2 = tape.l2_normalize(h2)?;
    let prod = tape.mul(u1, u2)?;
    let cos = tape.sum_rows(prod)?;
    let mean_cos = tape.mean(cos)?;
    let scaled = tape.scale(mean_cos, -2.0)?;
    let two = tape.constant(Tensor::scalar(2.0))?;
    tape.add(scaled, two)
}

/// NT-Xent of plain vectors, evaluated on a scratch tape.
pub fn ntxent_value<R: AsRef<[f64]>>(h: &[R], tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let hv = tape.constant(Tensor::from_rows(h)?)?;
    let loss = ntxent(&mut tape, hv, tau)?;
    tape.value(loss).item()
}

pub fn cosine_pair_value<R: AsRef<[f64]>>(h1: &[R], h2: &[R]) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(h1)?)?;
    let b = tape.constant(Tensor::from_rows(h2)?)?;
    let loss = cosine_pair_loss(&mut tape, a, b)?;
    tape.value(loss).item()
}
