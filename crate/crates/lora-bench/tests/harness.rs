use std::process::Command;

use lora_bench::config::{ExperimentConfig, ExperimentKind, Method, ModelKind, Task, Variant};
use lora_bench::emit::{rows_from_csv, CSV_HEADER};
use lora_bench::experiments::{replay_cell, run_sweep};
use lora_bench::models::{generate_models, ModelSpec};
use lora_construct::matrix::{gaussian_in_ball, seeded_rng};
use lora_construct::tfn::HeadType;
use lora_construct::train::{evaluate_loss, head_outputs, Model, PretrainConfig, Targets, TrainConfig};

fn small_train() -> TrainConfig {
    TrainConfig {
        learning_rates: vec![1e-2],
        weight_decays: vec![0.0],
        iterations: 50,
        batch: 64,
        validation_size: 64,
        ..TrainConfig::default()
    }
}

fn spec(kind: ModelKind) -> ModelSpec {
    ModelSpec {
        kind,
        dim: 16,
        depth: 2,
        target_depth: 1,
        heads: 2,
        head_type: HeadType::Multi,
    }
}

#[test]
fn model_generation_is_deterministic() {
    for kind in [ModelKind::Linear, ModelKind::Fnn, ModelKind::Tfn] {
        let a = generate_models(&spec(kind), Variant::Random, 7, &PretrainConfig::default()).unwrap();
        let b = generate_models(&spec(kind), Variant::Random, 7, &PretrainConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn fnn_weights_within_xavier_bounds() {
    let (f, t) = generate_models(&spec(ModelKind::Fnn), Variant::Random, 3, &PretrainConfig::default()).unwrap();
    // Xavier uniform on a square D×D layer: |w| <= sqrt(6 / 2D).
    let bound = (6.0f64 / 32.0).sqrt();
    for m in [f, t] {
        for w in m.weights() {
            assert!(w.amax() <= bound);
        }
    }
}

#[test]
fn pretrained_frozen_is_closer_to_target() {
    for kind in [ModelKind::Linear, ModelKind::Fnn] {
        let (rf, rt) = generate_models(&spec(kind), Variant::Random, 4, &PretrainConfig::default()).unwrap();
        let (pf, pt) = generate_models(&spec(kind), Variant::Pretrained, 4, &PretrainConfig::default()).unwrap();
        assert_eq!(rt, pt);
        let xs = vec![gaussian_in_ball(16, 2048, 8.0, &mut seeded_rng(99))];
        let refs = Targets::Outputs(head_outputs(&rt, &xs, None));
        let before = evaluate_loss(&rf, &xs, &refs, None);
        let after = evaluate_loss(&pf, &xs, &refs, None);
        // Pretraining stops on its own held-out set; allow sampling noise on this one.
        assert!(after <= 0.7 * before, "{kind:?}: {after} vs {before}");
    }
}

#[test]
fn empty_rank_list_gives_empty_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::SweepLinear,
        ranks: vec![],
        out_dir: Some(dir.path().to_path_buf()),
        ..ExperimentConfig::default()
    };
    let out = run_sweep(&cfg).unwrap();
    assert!(out.rows.is_empty());
    assert!(!out.manifest.has_failures());
    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(text.trim_end(), CSV_HEADER);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"].as_array().unwrap().len(), 5);
}

#[test]
fn sweep_resumes_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::SweepFnn,
        depth: 2,
        ranks: vec![2, 8],
        seeds: 2,
        methods: vec![Method::Construction, Method::Gradient],
        train: small_train(),
        out_dir: Some(dir.path().to_path_buf()),
        ..ExperimentConfig::default()
    };
    let first = run_sweep(&cfg).unwrap();
    assert_eq!(first.rows.len(), 8);
    let on_disk = rows_from_csv(&std::fs::read_to_string(dir.path().join("results.csv")).unwrap()).unwrap();
    assert_eq!(on_disk, first.rows);

    // A rerun finds every cell done and leaves the rows as they were.
    let second = run_sweep(&cfg).unwrap();
    assert_eq!(second.rows, first.rows);

    for (rec, row) in first.manifest.cells.iter().zip(&first.rows) {
        let again = replay_cell(&first.manifest, &rec.id).unwrap();
        assert!(again.same_result(row), "{}", rec.id);
    }

    let changed = ExperimentConfig { seeds: 3, ..cfg };
    assert!(run_sweep(&changed).is_err());
}

#[test]
fn ablation_pairs_share_batches() {
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::AblateBias,
        depth: 2,
        ranks: vec![1],
        seeds: 1,
        train: small_train(),
        ..ExperimentConfig::default()
    };
    let out = run_sweep(&cfg).unwrap();
    assert_eq!(out.curves.len(), 2);
    // Both adapters start from the frozen model, so the first batch loss matches.
    assert_eq!(out.curves[0].1.losses[0], out.curves[1].1.losses[0]);
    assert_eq!(out.rows[1].params_tunable - out.rows[0].params_tunable, 16 * 2);
}

#[test]
fn zero_delta_keeps_frozen_accuracy() {
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::Classify,
        model: ModelKind::Fnn,
        ranks: vec![0],
        seeds: 1,
        methods: vec![Method::Construction],
        ..ExperimentConfig::default()
    };
    let out = run_sweep(&cfg).unwrap();
    let (f, t) = generate_models(&spec(ModelKind::Fnn), Variant::Random, 0, &PretrainConfig::default()).unwrap();
    let xs = lora_bench::experiments::test_inputs(&cfg, &f, 0);
    let want = lora_construct::train::predict_labels(&t, &xs, None);
    let got = lora_construct::train::predict_labels(&f, &xs, None);
    let frozen_acc = want[0].iter().zip(&got[0]).filter(|(a, b)| a == b).count() as f64 / 1024.0;
    // Rank zero still rewrites biases for the linearized blocks, so compare
    // against a rank-zero gradient run, which leaves the model untouched.
    let g = run_sweep(&ExperimentConfig {
        methods: vec![Method::Gradient],
        train: TrainConfig { iterations: 3, ..small_train() },
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(g.rows[0].accuracy, Some(frozen_acc));
    assert!(out.rows[0].accuracy.is_some());
}

#[test]
fn binary_task_and_generalization_rows() {
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::Classify,
        task: Task::Binary,
        ranks: vec![1],
        seeds: 1,
        methods: vec![Method::Construction, Method::Gradient],
        train: small_train(),
        ..ExperimentConfig::default()
    };
    let out = run_sweep(&cfg).unwrap();
    assert!(out.rows.iter().all(|r| r.accuracy.is_some()));
    let g = run_sweep(&ExperimentConfig {
        experiment: ExperimentKind::Generalization,
        methods: vec![Method::Gradient],
        task: Task::MultiClass,
        ..cfg
    })
    .unwrap();
    assert!(g.rows[0].train_mse.is_some());
    assert!(g.rows[0].accuracy.is_none());
}

#[test]
fn curves_are_written_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::Curves,
        model: ModelKind::Linear,
        ranks: vec![1],
        seeds: 1,
        train: small_train(),
        out_dir: Some(dir.path().to_path_buf()),
        ..ExperimentConfig::default()
    };
    let out = run_sweep(&cfg).unwrap();
    let id = &out.manifest.cells[0].id;
    let text = std::fs::read_to_string(dir.path().join("curves").join(format!("{id}.csv"))).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iteration,loss"));
    assert_eq!(lines.count(), 50);
}

#[test]
fn final_layers_baseline_at_zero_matches_frozen() {
    let cfg = ExperimentConfig {
        experiment: ExperimentKind::CompareFinalLayers,
        depth: 3,
        ranks: vec![],
        final_layers: vec![0],
        seeds: 1,
        ..ExperimentConfig::default()
    };
    let out = run_sweep(&cfg).unwrap();
    let (f, t) = generate_models(&ModelSpec { depth: 3, ..spec(ModelKind::Fnn) }, Variant::Random, 0, &PretrainConfig::default()).unwrap();
    let xs = lora_bench::experiments::test_inputs(&cfg, &f, 0);
    let refs = Targets::Outputs(head_outputs(&t, &xs, None));
    assert_eq!(out.rows[0].test_mse, evaluate_loss(&f, &xs, &refs, None));
    assert_eq!(out.rows[0].params_tunable, 0);
    let _: &Model = &f;
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lora-bench"))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = bin()
        .args(["--out-dir", dir.path().to_str().unwrap(), "--seed-base", "3", "--seeds", "1", "--ranks", "[0,8]"])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let rows = rows_from_csv(&std::fs::read_to_string(dir.path().join("results.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].seed, 3);

    let bad = bin().args(["--ranks", "[99]"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let unknown = bin().args(["--no-such-key", "1"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));

    // Pretraining that cannot reach its goal fails every cell.
    let capped = bin()
        .args(["--variant", "pretrained", "--pretrain.max_iterations", "10", "--seeds", "1", "--ranks", "[1]"])
        .output()
        .unwrap();
    assert_eq!(capped.status.code(), Some(4), "{}", String::from_utf8_lossy(&capped.stderr));

    // A singular target makes the adapted product singular at full rank.
    let (frozen, target) = generate_models(&ModelSpec { dim: 3, ..spec(ModelKind::Linear) }, Variant::Random, 0, &PretrainConfig::default()).unwrap();
    let Model::Linear(t) = target else { unreachable!() };
    let zero = Model::Linear(lora_construct::linear::LinearChain::new(vec![t.product() * 0.0]).unwrap());
    let (fp, tp) = (dir.path().join("frozen.json"), dir.path().join("target.json"));
    lora_bench::model_file::save(&frozen, &fp).unwrap();
    lora_bench::model_file::save(&zero, &tp).unwrap();
    let singular = bin()
        .args(["--dim", "3", "--seeds", "1", "--ranks", "[3]", "--frozen_model", fp.to_str().unwrap(), "--target_model", tp.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(singular.status.code(), Some(3), "{}", String::from_utf8_lossy(&singular.stderr));
}
