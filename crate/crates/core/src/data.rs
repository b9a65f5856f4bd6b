//! Labeled vector datasets: synthetic Gaussian blobs and the on-disk
//! `meta.json` / `features.bin` / `labels.bin` directory format.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Label value reserved for samples without a class (unlabeled pools).
pub const UNLABELED: usize = u16::MAX as usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dim: usize,
    pub num_classes: usize,
    pub count: usize,
}

impl Dataset {
    pub fn new(dim: usize, num_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::Dimension {
                    op: "dataset",
                    left: vec![dim],
                    right: vec![s.features.len()],
                });
            }
            if s.label >= num_classes && s.label != UNLABELED {
                return Err(Error::Format(format!(
                    "sample {i} has label {} but the dataset has {num_classes} classes",
                    s.label
                )));
            }
        }
        Ok(Self {
            dim,
            num_classes,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_histogram(&self.samples, self.num_classes)
    }

    /// Indices of the labeled samples of each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            if s.label < self.num_classes {
                by_class[s.label].push(i);
            }
        }
        by_class
    }
}

pub fn class_histogram(samples: &[Sample], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for s in samples {
        if s.label < num_classes {
            counts[s.label] += 1;
        }
    }
    counts
}

/// Gaussian blobs, one mean per class, drawn in the unit cube with pairwise
/// separation of at least `6 · cluster_spread`. Features are clamped to `[0, 1]`.
pub fn make_synthetic_dataset(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(cluster_spread > 0.0) {
        return Err(Error::param("cluster_spread", "cluster_spread > 0"));
    }
    if num_classes == 0 || dim == 0 {
        return Err(Error::param("num_classes/dim", "num_classes ≥ 1 and dim ≥ 1"));
    }
    let mut rng = rng_for(seed, &[0x5e7]);
    let min_sep = 6.0 * cluster_spread;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    while means.len() < num_classes {
        let mut placed = false;
        for _ in 0..10_000 {
            let cand: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            let ok = means.iter().all(|m| {
                m.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= min_sep
            });
            if ok {
                means.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::param(
                "cluster_spread",
                format!("{num_classes} means separated by 6·spread to fit in a {dim}-dimensional unit cube"),
            ));
        }
    }
    let noise = Normal::new(0.0, cluster_spread).expect("spread checked positive");
    let mut samples = Vec::with_capacity(num_classes * samples_per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            let features = mean
                .iter()
                .map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            samples.push(Sample { features, label });
        }
    }
    Dataset::new(dim, num_classes, samples)
}

/// Reads a dataset directory: `meta.json`, `features.bin` (little-endian
/// `f32`, row-major), `labels.bin` (little-endian `u16`).
pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let features = fs::read(dir.join("features.bin"))?;
    let labels = fs::read(dir.join("labels.bin"))?;
    if features.len() != meta.count * meta.dim * 4 {
        return Err(Error::Format(format!(
            "features.bin holds {} bytes, expected {}",
            features.len(),
            meta.count * meta.dim * 4
        )));
    }
    if labels.len() != meta.count * 2 {
        return Err(Error::Format(format!(
            "labels.bin holds {} bytes, expected {}",
            labels.len(),
            meta.count * 2
        )));
    }
    let samples = features
        .chunks_exact(meta.dim * 4)
        .zip(labels.chunks_exact(2))
        .map(|(row, lab)| Sample {
            features: row
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect(),
            label: u16::from_le_bytes([lab[0], lab[1]]) as usize,
        })
        .collect();
    Dataset::new(meta.dim, meta.num_classes, samples)
}

/// Writes the directory format read by [`load_dataset_dir`]. Features are
/// narrowed to `f32`.
pub fn save_dataset_dir(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        dim: dataset.dim,
        num_classes: dataset.num_classes,
        count: dataset.len(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec(&meta)?)?;
    let mut features = Vec::with_capacity(dataset.len() * dataset.dim * 4);
    let mut labels = Vec::with_capacity(dataset.len() * 2);
    for s in &dataset.samples {
        for v in &s.features {
            features.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let label = u16::try_from(s.label)
            .map_err(|_| Error::Format(format!("label {} does not fit in u16", s.label)))?;
        labels.extend_from_slice(&label.to_le_bytes());
    }
    fs::write(dir.join("features.bin"), features)?;
    fs::write(dir.join("labels.bin"), labels)?;
    Ok(())
}
