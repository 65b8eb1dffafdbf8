use std::fs;
use std::path::{Path, PathBuf};

use cirlab_core::adapters::load_checkpoint;
use cirlab_core::config::ExperimentConfig;
use cirlab_core::eval::evaluate;
use cirlab_core::merge::lrdm_merge;
use cirlab_core::pipeline::{expected_artifacts, report, Pipeline, Stage};
use cirlab_core::synth::{import_tuples, RetrievalBenchmark, World, WorldConfig};
use cirlab_core::rng::Rng;
use cirlab_core::trainer::TrainMode;
use cirlab_core::Error;

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.world = WorldConfig {
        categories: 4,
        colors: 4,
        max_count: 3,
        materials: 3,
        settings: 3,
        train_tuples: 80,
        val_queries: 12,
        test_queries: 16,
        gallery_size: 120,
        ..WorldConfig::default()
    };
    c.encoder.d_model = 12;
    c.encoder.n_blocks = 1;
    c.encoder.rank = 3;
    c.encoder.lora_alpha = 6.0;
    c.pretrain.steps = 10;
    c.pretrain.batch_size = 8;
    c.pretrain.warmup_steps = 2;
    c.pretrain.heldout_items = 20;
    c.train.steps = 8;
    c.train.batch_size = 8;
    c.train.warmup_steps = 2;
    c.probe.batches = 2;
    c.probe.seeds = 2;
    c.probe.batch_size = 8;
    c.merge.alpha_grid = vec![0.0, 0.5, 1.0];
    c.sweep.lambda_grid = vec![1.0];
    c.sweep.omega_grid = vec![0.25];
    c.ablate.seeds = 2;
    c
}

fn run_all(cfg: &ExperimentConfig, dir: &Path) -> Pipeline {
    let p = Pipeline::new(cfg.clone(), dir.to_path_buf()).unwrap();
    p.run_all().unwrap();
    p
}

#[test]
fn full_run_reports_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    run_all(&cfg, dir.path());
    let summary = report(dir.path()).unwrap();
    assert_eq!(summary["config_hash"], cfg.hash());
    let artifacts = summary["artifacts"].as_object().unwrap();
    for rel in expected_artifacts(&cfg) {
        let h = artifacts[&rel].as_str().unwrap();
        assert_eq!(h.len(), 64, "{rel}");
    }
    for model in ["pretrained", "transition_only", "endpoint_only", "joint_shared", "joint_pcgrad", "decoupled_lrdm", "ties"] {
        assert!(summary["headline"][model]["r_at_1"].is_number(), "{model}");
    }
    let first = fs::read(dir.path().join("summary.json")).unwrap();
    assert_eq!(report(dir.path()).unwrap(), summary);
    assert_eq!(fs::read(dir.path().join("summary.json")).unwrap(), first);
}

#[test]
fn artifacts_carry_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let p = Pipeline::new(cfg.clone(), dir.path().to_path_buf()).unwrap();
    p.run(Stage::Gen).unwrap();
    let test = RetrievalBenchmark::load(&dir.path().join("world/test.json")).unwrap();
    assert_eq!(test.config_hash.as_deref(), Some(cfg.hash().as_str()));
    let imported = import_tuples(&dir.path().join("world/train_tuples.jsonl")).unwrap();
    assert_eq!(imported.tuples.len(), cfg.world.train_tuples);
    assert_eq!(imported.skipped, 0);
    let world = World::generate(&cfg.world, &Rng::new(cfg.seed).fork("world")).unwrap();
    assert_eq!(imported.tuples, world.train_tuples);
    let text = fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert_eq!(ExperimentConfig::parse(&text, &[]).unwrap().hash(), cfg.hash());
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        Pipeline::new(tiny(), d.path().to_path_buf()).unwrap().run(Stage::Gen).unwrap();
    }
    for rel in ["world/train_tuples.jsonl", "world/val.json", "world/test.json", "config.toml"] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn missing_probe_csv_is_named() {
    let dir = tempfile::tempdir().unwrap();
    run_all(&tiny(), dir.path());
    fs::remove_file(dir.path().join("probe/gi.csv")).unwrap();
    match report(dir.path()) {
        Err(Error::MissingArtifact(p)) => assert_eq!(p, PathBuf::from("probe/gi.csv")),
        other => panic!("expected MissingArtifact, got {other:?}"),
    }
}

#[test]
fn report_rejects_mixed_config_directories() {
    let dir = tempfile::tempdir().unwrap();
    run_all(&tiny(), dir.path());
    let rel = "logs/train_endpoint_only.csv";
    let text = fs::read_to_string(dir.path().join(rel)).unwrap();
    let (_, rest) = text.split_once('\n').unwrap();
    fs::write(dir.path().join(rel), format!("# config_hash=0000\n{rest}")).unwrap();
    match report(dir.path()) {
        Err(Error::MixedConfig { path, found, .. }) => {
            assert_eq!(path, PathBuf::from(rel));
            assert_eq!(found, "0000");
        }
        other => panic!("expected MixedConfig, got {other:?}"),
    }
}

#[test]
fn stages_refuse_checkpoints_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path().to_path_buf()).unwrap();
    p.run(Stage::Pretrain).unwrap();
    let other = ExperimentConfig { seed: 1, ..tiny() };
    let q = Pipeline::new(other, dir.path().to_path_buf()).unwrap();
    assert!(matches!(q.run(Stage::Train), Err(Error::MixedConfig { .. })));
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path().to_path_buf()).unwrap();
    match p.run(Stage::Train) {
        Err(Error::MissingArtifact(path)) => assert_eq!(path, PathBuf::from("checkpoints/pretrained.ckpt")),
        other => panic!("expected MissingArtifact, got {other:?}"),
    }
    assert!(matches!(report(dir.path()), Err(Error::MissingArtifact(_))));
}

#[test]
fn alpha_zero_merge_evaluates_like_the_endpoint_branch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.merge.alpha_grid = vec![0.0];
    cfg.sweep.lambda_grid.clear();
    cfg.sweep.omega_grid.clear();
    run_all(&cfg, dir.path());
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("eval/metrics.json")).unwrap()).unwrap();
    let lrdm = metrics["models"].as_array().unwrap().iter().find(|m| m["model"] == "decoupled_lrdm").unwrap();
    assert_eq!(lrdm["alpha"], 0.0);

    let (stack, _) = load_checkpoint(&dir.path().join("checkpoints/decoupled.ckpt")).unwrap();
    let world = World::generate(&cfg.world, &Rng::new(cfg.seed).fork("world")).unwrap();
    let (direct, _) = evaluate(&stack, &world.test, &world.vocab).unwrap();
    let (merged, _) = evaluate(&lrdm_merge(&stack, 0.0), &world.test, &world.vocab).unwrap();
    assert_eq!(direct, merged);
    assert_eq!(serde_json::to_value(&direct).unwrap(), lrdm["metrics"]);
}

#[test]
fn ablation_table_has_one_row_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path().to_path_buf()).unwrap();
    p.run(Stage::Ablate).unwrap();
    let table = fs::read_to_string(dir.path().join("ablate/table.csv")).unwrap();
    let labels: Vec<&str> = table.lines().skip(2).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(labels, ["Transition only", "Endpoint only", "Joint", "Joint+PCGrad", "Decoupled+LRDM"]);
    let per_seed = fs::read_to_string(dir.path().join("ablate/per_seed.csv")).unwrap();
    assert_eq!(per_seed.lines().count(), 2 + 2 * 5);
}

#[test]
fn unused_stages_are_skipped_and_not_required() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.modes = vec![TrainMode::EndpointOnly];
    cfg.sweep.lambda_grid.clear();
    cfg.sweep.omega_grid.clear();
    run_all(&cfg, dir.path());
    assert!(!dir.path().join("probe/gi.csv").exists());
    assert!(!dir.path().join("merged").exists());
    let summary = report(dir.path()).unwrap();
    assert!(summary["alpha_star"].is_null());
    assert_eq!(summary["artifacts"].as_object().unwrap().len(), expected_artifacts(&cfg).len());
}
