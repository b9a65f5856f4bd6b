use std::fs;
use std::path::Path;
use std::process::Command;

use calibre_core::config::{parse_config, DatasetSource, ExperimentConfig, PartitionSpec, QuantitySpec, SyntheticSpec};
use calibre_core::data::{load_dataset_dir, make_synthetic_dataset, save_dataset_dir, Dataset, Sample, UNLABELED};
use calibre_core::experiment::{build_clients, execute, run_experiment, Metrics, RunStatus, RunState};
use calibre_core::model::GlobalModel;

fn small_config(outdir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::with_dataset(DatasetSource::Synthetic(SyntheticSpec {
        num_classes: 4,
        dim: 5,
        samples_per_class: 40,
        cluster_spread: 0.05,
    }));
    cfg.partition = PartitionSpec::Quantity(QuantitySpec { classes_per_client: 2, samples_per_client: 16 });
    cfg.training.num_clients = 2;
    cfg.training.clients_per_round = 2;
    cfg.training.rounds = 0;
    cfg.training.batch_size = 8;
    cfg.model.hidden = vec![16];
    cfg.model.embedding_dim = 8;
    cfg.output_dir = outdir.to_path_buf();
    cfg
}

#[test]
fn zero_rounds_personalizes_initial_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = execute(&cfg).unwrap();
    assert!(out.metrics.rounds.is_empty());
    assert_eq!(out.model.flatten(), GlobalModel::init(5, &cfg.model, cfg.seed).unwrap().flatten());
    let csv = fs::read_to_string(dir.path().join("accuracies.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(!csv.contains("novel"));
    let status: RunStatus = serde_json::from_slice(&fs::read(dir.path().join("status.json")).unwrap()).unwrap();
    assert_eq!(status.state, RunState::Completed);
    assert!(!status.partial);
}

#[test]
fn reports_round_trip_and_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.training.rounds = 2;
    cfg.training.checkpoint_every = 1;
    cfg.novel_clients = 2;
    let out = execute(&cfg).unwrap();

    let parsed: Metrics = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(parsed, out.metrics);

    let csv = fs::read_to_string(dir.path().join("accuracies.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("client_id,split,accuracy"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.contains(",novel,")).count(), 2);

    for round in 1..=2 {
        let model = GlobalModel::read_checkpoint(dir.path().join(format!("round_{round}.model"))).unwrap();
        assert_eq!(model.version, round);
    }
    let final_ckpt = GlobalModel::read_checkpoint(dir.path().join("round_2.model")).unwrap();
    assert_eq!(final_ckpt, out.model);

    // One embedding row per test sample: id, label, then d_z values.
    let emb = fs::read_to_string(dir.path().join("embeddings_3.csv")).unwrap();
    let first: Vec<&str> = emb.lines().next().unwrap().split(',').collect();
    assert_eq!(first[0], "3");
    assert_eq!(first.len(), 2 + 8);
    assert_eq!(emb.lines().count(), out.embeddings[3].labels.len());
}

#[test]
fn failed_run_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    // Quantity partition demands more samples of a class than exist.
    cfg.partition = PartitionSpec::Quantity(QuantitySpec { classes_per_client: 1, samples_per_client: 500 });
    assert!(execute(&cfg).is_err());
    let status: RunStatus = serde_json::from_slice(&fs::read(dir.path().join("status.json")).unwrap()).unwrap();
    assert_eq!(status.state, RunState::Failed);
    assert!(status.partial);
    assert!(status.error.unwrap().contains("class"));
}

#[test]
fn dataset_directory_round_trip_with_unlabeled_pool() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = make_synthetic_dataset(3, 4, 20, 0.05, 2).unwrap();
    for i in 0..10 {
        ds.samples.push(Sample { features: vec![0.25 * (i % 4) as f64; 4], label: UNLABELED });
    }
    let data_dir = dir.path().join("data");
    save_dataset_dir(&ds, &data_dir).unwrap();
    let back = load_dataset_dir(&data_dir).unwrap();
    assert_eq!(back.len(), 70);
    assert_eq!(back.samples[65].label, UNLABELED);
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        for (x, y) in a.features.iter().zip(&b.features) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
    assert_eq!(fs::read(data_dir.join("labels.bin")).unwrap().len(), 140);
    assert_eq!(fs::read(data_dir.join("features.bin")).unwrap().len(), 70 * 4 * 4);

    let text = "seed = 4\n[dataset]\nkind = \"files\"\npath = \"data\"\n\
                [partition]\nkind = \"quantity\"\nclasses_per_client = 1\nsamples_per_client = 8\n\
                [training]\nnum_clients = 3\nclients_per_round = 3\nrounds = 1\nbatch_size = 8\n";
    let cfg_path = dir.path().join("run.toml");
    fs::write(&cfg_path, text).unwrap();
    let cfg = parse_config(&cfg_path, &[]).unwrap();
    let dataset: Dataset = load_dataset_dir(&data_dir).unwrap();
    let (participants, novel) = build_clients(&cfg, &dataset).unwrap();
    assert!(novel.is_empty());
    assert_eq!(participants.iter().map(|c| c.unlabeled.len()).sum::<usize>(), 10);
    assert!(participants.iter().all(|c| c.train.iter().all(|s| s.label != UNLABELED)));
    run_experiment(&cfg, None).unwrap();
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_calibre"))
}

#[test]
fn cli_runs_with_overrides_and_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    let text = "seed = 1\noutput_dir = \"out\"\n[dataset]\nkind = \"synthetic\"\nnum_classes = 4\ndim = 5\nsamples_per_class = 40\n\
                [partition]\nkind = \"quantity\"\nclasses_per_client = 2\nsamples_per_client = 16\n\
                [training]\nnum_clients = 3\nclients_per_round = 2\nrounds = 1\nbatch_size = 8\n\
                [model]\nhidden = [16]\nembedding_dim = 8\n";
    fs::write(&cfg_path, text).unwrap();
    let status = cli()
        .args(["run", cfg_path.to_str().unwrap(), "--seed", "9", "--override", "training.rounds=2", "--ablation", "ln"])
        .status()
        .unwrap();
    assert!(status.success());
    let metrics: Metrics = serde_json::from_slice(&fs::read(dir.path().join("out/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.rounds.len(), 2);
    // L_p is off, so its value is telemetry only: the loss is l_s + α·l_n.
    for c in &metrics.rounds[0].per_client {
        let p = c.loss;
        assert!((p.total - (p.l_s + 0.3 * p.l_n.unwrap())).abs() < 1e-9);
    }

    let bad = cli().args(["run", cfg_path.to_str().unwrap(), "--override", "calibre.alpha=-1"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("α ≥ 0"));

    let unknown = cli().args(["run", cfg_path.to_str().unwrap(), "--ablation", "lc"]).output().unwrap();
    assert!(!unknown.status.success());
}

#[test]
fn cli_reports_stage_failure_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    let text = "output_dir = \"out\"\n[dataset]\nkind = \"synthetic\"\nnum_classes = 4\ndim = 5\nsamples_per_class = 10\n\
                [partition]\nkind = \"quantity\"\nclasses_per_client = 1\nsamples_per_client = 100\n\
                [training]\nnum_clients = 3\nclients_per_round = 2\nrounds = 1\n";
    fs::write(&cfg_path, text).unwrap();
    let out = cli().args(["run", cfg_path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let status: RunStatus = serde_json::from_slice(&fs::read(dir.path().join("out/status.json")).unwrap()).unwrap();
    assert_eq!(status.state, RunState::Failed);
}
