//! Experiment configuration: a TOML document with one section per stage.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/blobs"
//!
//! [dataset]
//! kind = "synthetic"
//! num_classes = 16
//! dim = 8
//!
//! [partition]
//! kind = "quantity"
//! classes_per_client = 4
//! samples_per_client = 120
//! ```
//!
//! Every other key has a default. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::calibre::CalibreConfig;
use crate::error::{Error, Result};
use crate::federated::TrainingConfig;
use crate::model::ModelConfig;
use crate::personalize::PersonalizationConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 32,
            samples_per_class: 600,
            cluster_spread: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    /// Dataset directory; relative paths resolve against the config file.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Files(FileSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirichletSpec {
    pub concentration: f64,
    /// Minimum training samples per client.
    pub min_train: usize,
}

impl Default for DirichletSpec {
    fn default() -> Self {
        Self {
            concentration: 0.3,
            min_train: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantitySpec {
    pub classes_per_client: usize,
    pub samples_per_client: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PartitionSpec {
    Quantity(QuantitySpec),
    Dirichlet(DirichletSpec),
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::Dirichlet(DirichletSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Clients held out of training that only personalize the final model.
    #[serde(default)]
    pub novel_clients: usize,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub calibre: CalibreConfig,
    #[serde(default)]
    pub augmentation: AugmentationPolicy,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub personalization: PersonalizationConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("calibre-out")
}

impl ExperimentConfig {
    /// Defaults everywhere except the dataset.
    pub fn with_dataset(dataset: DatasetSource) -> Self {
        let mut cfg = Self {
            dataset,
            seed: 0,
            output_dir: default_output_dir(),
            novel_clients: 0,
            partition: PartitionSpec::default(),
            training: TrainingConfig::default(),
            calibre: CalibreConfig::default(),
            augmentation: AugmentationPolicy::default(),
            model: ModelConfig::default(),
            personalization: PersonalizationConfig::default(),
        };
        cfg.training.seed = cfg.seed;
        cfg
    }

    /// Parses and validates TOML text. Relative paths are resolved against
    /// `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            apply_override(&mut doc, key, value)?;
        }
        let mut cfg: ExperimentConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.training.seed = cfg.seed;
        if let DatasetSource::Files(f) = &mut cfg.dataset {
            if f.path.is_relative() {
                f.path = base_dir.join(&f.path);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base_dir.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Total clients the partitioner creates: participants plus novel ones.
    pub fn total_clients(&self) -> usize {
        self.training.num_clients + self.novel_clients
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                if s.num_classes < 2 {
                    return Err(Error::param("dataset.num_classes", "num_classes ≥ 2"));
                }
                if s.dim == 0 {
                    return Err(Error::param("dataset.dim", "dim ≥ 1"));
                }
                if !(s.cluster_spread > 0.0) {
                    return Err(Error::param("dataset.cluster_spread", "cluster_spread > 0"));
                }
            }
            DatasetSource::Files(f) => {
                if !f.path.join("meta.json").is_file() {
                    return Err(Error::param(
                        "dataset.path",
                        format!("an existing dataset directory ({} has no meta.json)", f.path.display()),
                    ));
                }
            }
        }
        match &self.partition {
            PartitionSpec::Quantity(q) => {
                if q.classes_per_client == 0 {
                    return Err(Error::param("partition.classes_per_client", "S ≥ 1"));
                }
                if q.samples_per_client < q.classes_per_client {
                    return Err(Error::param(
                        "partition.samples_per_client",
                        "samples_per_client ≥ classes_per_client",
                    ));
                }
            }
            PartitionSpec::Dirichlet(d) => {
                if !(d.concentration > 0.0) || !d.concentration.is_finite() {
                    return Err(Error::param("partition.concentration", "β > 0"));
                }
            }
        }
        self.training.validate()?;
        self.calibre.validate()?;
        self.augmentation.validate()?;
        self.model.validate()?;
        self.personalization.validate()?;
        Ok(())
    }
}

/// Reads, overrides and validates a config file.
pub fn parse_config(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    ExperimentConfig::from_toml_str(&text, base, overrides)
}

/// Splits `key=value`.
pub fn parse_override(raw: &str) -> Result<(String, String)> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{raw}` is not of the form key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("override `{raw}` has an empty key")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// Sets a dot-path key. The value is read as a TOML literal when possible
/// (`0.5`, `true`, `[64, 32]`) and as a bare string otherwise.
fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for part in parents {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federated::Aggregation;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_str(text, Path::new("/tmp"), &[])
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse("seed = 3\n[dataset]\nkind = \"synthetic\"\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.training.seed, 3);
        assert_eq!(cfg.calibre.alpha, 0.3);
        assert_eq!(cfg.calibre.tau, 0.5);
        assert_eq!(cfg.training.learning_rate, 0.05);
        assert_eq!(cfg.training.num_clients, 100);
        assert_eq!(cfg.training.rounds, 200);
        assert_eq!(cfg.training.clients_per_round, 10);
        assert_eq!(cfg.training.local_epochs, 3);
        assert_eq!(cfg.training.aggregation, Aggregation::DivergenceWeighted);
        assert_eq!(cfg.personalization, PersonalizationConfig::default());
        assert_eq!(cfg.partition, PartitionSpec::Dirichlet(DirichletSpec { concentration: 0.3, min_train: 8 }));
        assert_eq!(cfg.novel_clients, 0);
    }

    #[test]
    fn negative_alpha_cites_constraint() {
        let err = parse("[dataset]\nkind = \"synthetic\"\n[calibre]\nalpha = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("α ≥ 0"), "{err}");
        assert!(err.to_string().contains("calibre.alpha"), "{err}");
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse("[dataset]\nkind = \"synthetic\"\n[training]\nroundz = 3\n").unwrap_err();
        assert!(err.to_string().contains("roundz"), "{err}");
        let err = parse("bogus = 1\n[dataset]\nkind = \"synthetic\"\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = parse("[dataset]\nkind = \"synthetic\"\nwidth = 3\n").unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn round_trip() {
        let cfg = parse(
            "seed = 9\nnovel_clients = 2\n[dataset]\nkind = \"synthetic\"\ndim = 8\n\
             [partition]\nkind = \"quantity\"\nclasses_per_client = 2\nsamples_per_client = 40\n\
             [training]\nnum_clients = 6\nclients_per_round = 3\ndivergence_temperature = 0.4\n\
             [calibre]\nnum_clusters = 4\nln_kernel = \"neg-euclidean-softmax\"\n",
        )
        .unwrap();
        let text = cfg.to_toml_string().unwrap();
        let again = ExperimentConfig::from_toml_str(&text, Path::new("/elsewhere"), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn overrides_follow_dot_paths() {
        let overrides = vec![
            parse_override("training.rounds=4").unwrap(),
            parse_override("calibre.use_ln = false").unwrap(),
            parse_override("model.hidden=[16, 8]").unwrap(),
            parse_override("partition.kind=quantity").unwrap(),
            parse_override("partition.classes_per_client=2").unwrap(),
            parse_override("partition.samples_per_client=50").unwrap(),
        ];
        let cfg = ExperimentConfig::from_toml_str("[dataset]\nkind = \"synthetic\"\n", Path::new("."), &overrides).unwrap();
        assert_eq!(cfg.training.rounds, 4);
        assert!(!cfg.calibre.use_ln);
        assert_eq!(cfg.model.hidden, vec![16, 8]);
        assert!(matches!(cfg.partition, PartitionSpec::Quantity(_)));
        assert!(parse_override("novalue").is_err());
        let bad = vec![parse_override("training.nope=1").unwrap()];
        let err = ExperimentConfig::from_toml_str("[dataset]\nkind = \"synthetic\"\n", Path::new("."), &bad).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn missing_dataset_directory_is_rejected() {
        let err = parse("[dataset]\nkind = \"files\"\npath = \"does/not/exist\"\n").unwrap_err();
        assert!(err.to_string().contains("dataset.path"), "{err}");
    }

    #[test]
    fn participants_cannot_exceed_selection() {
        let err = parse("[dataset]\nkind = \"synthetic\"\n[training]\nnum_clients = 3\nclients_per_round = 5\n").unwrap_err();
        assert!(err.to_string().contains("clients_per_round"));
    }
}
