//! End-to-end pipeline: data → partitions → federated training →
//! personalization → report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, ExperimentConfig, PartitionSpec};
use crate::data::{load_dataset_dir, make_synthetic_dataset, Dataset, UNLABELED};
use crate::error::Result;
use crate::federated::{run_training_stage, RoundReport};
use crate::model::GlobalModel;
use crate::partition::{attach_unlabeled, partition_dirichlet, partition_quantity, ClientDataset};
use crate::personalize::{run_personalization_stage, ClientEmbeddings, PersonalizationReport};

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rounds: Vec<RoundReport>,
    pub personalization: PersonalizationReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub metrics: Metrics,
    pub model: GlobalModel,
    pub embeddings: Vec<ClientEmbeddings>,
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.dataset {
        DatasetSource::Synthetic(s) => {
            make_synthetic_dataset(s.num_classes, s.dim, s.samples_per_class, s.cluster_spread, config.seed)
        }
        DatasetSource::Files(f) => load_dataset_dir(&f.path),
    }
}

/// Partitions into participants (ids `0..num_clients`) and novel clients
/// (the ids after them). Unlabeled samples are dealt to participants only.
pub fn build_clients(config: &ExperimentConfig, dataset: &Dataset) -> Result<(Vec<ClientDataset>, Vec<ClientDataset>)> {
    let total = config.total_clients();
    let mut clients = match &config.partition {
        PartitionSpec::Quantity(q) => {
            partition_quantity(dataset, total, q.classes_per_client, q.samples_per_client, config.seed)?
        }
        PartitionSpec::Dirichlet(d) => partition_dirichlet(dataset, total, d.concentration, d.min_train, config.seed)?,
    };
    let novel = clients.split_off(config.training.num_clients);
    let pool: Vec<Vec<f64>> = dataset
        .samples
        .iter()
        .filter(|s| s.label == UNLABELED)
        .map(|s| s.features.clone())
        .collect();
    attach_unlabeled(&mut clients, &pool, config.seed);
    Ok((clients, novel))
}

/// Runs both stages in memory. Checkpoints go to `checkpoint_dir` if given.
pub fn run_experiment(config: &ExperimentConfig, checkpoint_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    let (participants, novel) = build_clients(config, &dataset)?;
    let initial = GlobalModel::init(dataset.dim, &config.model, config.seed)?;
    let trained = run_training_stage(
        initial,
        &participants,
        &config.training,
        &config.calibre,
        &config.augmentation,
        checkpoint_dir,
    )?;
    let personal = run_personalization_stage(
        &trained.model.encoder,
        &participants,
        &novel,
        &config.personalization,
        config.seed,
    )?;
    Ok(ExperimentOutcome {
        metrics: Metrics {
            rounds: trained.reports,
            personalization: personal.report,
        },
        model: trained.model,
        embeddings: personal.embeddings,
    })
}

pub fn accuracies_csv(report: &PersonalizationReport) -> String {
    let mut out = String::from("client_id,split,accuracy\n");
    for c in &report.clients {
        writeln!(out, "{},{},{}", c.client_id, c.split.as_str(), c.accuracy).expect("write to String");
    }
    out
}

/// Writes `metrics.json`, `accuracies.csv` and the embedding CSVs; returns
/// the file names written.
pub fn emit_reports(metrics: &Metrics, embeddings: &[ClientEmbeddings], outdir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(outdir)?;
    let mut written = Vec::new();
    let mut json = serde_json::to_string_pretty(metrics)?;
    json.push('\n');
    fs::write(outdir.join("metrics.json"), json)?;
    written.push("metrics.json".to_string());
    fs::write(outdir.join("accuracies.csv"), accuracies_csv(&metrics.personalization))?;
    written.push("accuracies.csv".to_string());
    for e in embeddings {
        e.write_csv(outdir)?;
        written.push(format!("embeddings_{}.csv", e.client_id));
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Running,
    Completed,
    Failed,
}

/// Contents of `status.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub state: RunState,
    pub error: Option<String>,
    /// Report files written; checkpoints are listed by the directory itself.
    pub artifacts: Vec<String>,
    /// True when the run stopped early and any files present are incomplete.
    pub partial: bool,
}

fn write_status(outdir: &Path, status: &RunStatus) -> Result<()> {
    let mut json = serde_json::to_string_pretty(status)?;
    json.push('\n');
    fs::write(outdir.join("status.json"), json)?;
    Ok(())
}

/// Runs the experiment and writes every artifact to `config.output_dir`.
/// `status.json` is written first as `running` and rewritten at the end; a
/// failed run leaves `failed` with the error message.
pub fn execute(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let outdir: PathBuf = config.output_dir.clone();
    fs::create_dir_all(&outdir)?;
    let mut status = RunStatus {
        state: RunState::Running,
        error: None,
        artifacts: Vec::new(),
        partial: true,
    };
    write_status(&outdir, &status)?;
    let result = run_experiment(config, Some(&outdir))
        .and_then(|outcome| emit_reports(&outcome.metrics, export(config, &outcome), &outdir).map(|w| (outcome, w)));
    match result {
        Ok((outcome, written)) => {
            status.state = RunState::Completed;
            status.artifacts = written;
            status.partial = false;
            write_status(&outdir, &status)?;
            Ok(outcome)
        }
        Err(e) => {
            status.state = RunState::Failed;
            status.error = Some(e.to_string());
            write_status(&outdir, &status)?;
            Err(e)
        }
    }
}

fn export<'a>(config: &ExperimentConfig, outcome: &'a ExperimentOutcome) -> &'a [ClientEmbeddings] {
    if config.personalization.export_embeddings {
        &outcome.embeddings
    } else {
        &[]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::personalize::{ClientAccuracy, Split};

    #[test]
    fn single_client_row() {
        let report = PersonalizationReport::from_accuracies(vec![ClientAccuracy {
            client_id: 0,
            split: Split::Participant,
            accuracy: 1.0,
        }]);
        assert_eq!(accuracies_csv(&report), "client_id,split,accuracy\n0,participant,1\n");
    }
}
