//! Stochastic views of feature vectors for contrastive training.
//!
//! Vector-domain counterparts of the usual image augmentations: a random
//! contiguous window resized back to full length (crop), random coordinate
//! zeroing (erasing) and additive Gaussian noise (color jitter). They are
//! applied in that order.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub jitter_std: f64,
    pub mask_prob: f64,
    pub crop_fraction: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            jitter_std: 0.05,
            mask_prob: 0.1,
            crop_fraction: 1.0,
        }
    }
}

impl AugmentationPolicy {
    /// The identity policy.
    pub fn none() -> Self {
        Self {
            jitter_std: 0.0,
            mask_prob: 0.0,
            crop_fraction: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_std >= 0.0) || !self.jitter_std.is_finite() {
            return Err(Error::param("augmentation.jitter_std", "jitter_std ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::param("augmentation.mask_prob", "mask_prob ∈ [0, 1]"));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::param("augmentation.crop_fraction", "crop_fraction ∈ (0, 1]"));
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out = if self.crop_fraction < 1.0 && x.len() > 1 {
            crop_resize(x, self.crop_fraction, rng)
        } else {
            x.to_vec()
        };
        if self.mask_prob > 0.0 {
            for v in out.iter_mut() {
                if rng.random::<f64>() < self.mask_prob {
                    *v = 0.0;
                }
            }
        }
        if self.jitter_std > 0.0 {
            let noise = Normal::new(0.0, self.jitter_std).expect("validated jitter_std");
            for v in out.iter_mut() {
                *v += noise.sample(rng);
            }
        }
        out
    }
}

fn crop_resize<R: Rng + ?Sized>(x: &[f64], fraction: f64, rng: &mut R) -> Vec<f64> {
    let d = x.len();
    let width = ((fraction * d as f64).ceil() as usize).clamp(1, d);
    let start = rng.random_range(0..=d - width);
    let window = &x[start..start + width];
    if width == 1 {
        return vec![window[0]; d];
    }
    (0..d)
        .map(|i| {
            let pos = i as f64 * (width - 1) as f64 / (d - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(width - 1);
            let t = pos - lo as f64;
            window[lo] * (1.0 - t) + window[hi] * t
        })
        .collect()
}

/// Two independent views of one sample.
pub fn augment_pair<R: Rng + ?Sized>(
    x: &[f64],
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let first = policy.apply(x, rng);
    let second = policy.apply(x, rng);
    (first, second)
}
