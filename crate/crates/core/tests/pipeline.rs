use tracecast::config::load_config;
use tracecast::detector::detect;
use tracecast::harness::{
    cell_dir, prepare_dataset, run_sweep, train_model, Architecture, DatasetSpec, ExperimentPlan, ModelKind,
    TrainedModel,
};
use tracecast::synth::AnomalyKind;
use tracecast::{AnomalySpec, DetectionConfig, RecipeSpec, ResultTable, TrainingConfig};

fn tiny_architecture() -> Architecture {
    Architecture {
        num_stacks: 2,
        blocks_per_stack: 1,
        basis_dim: 4,
        hidden_width: 8,
        emb: 8,
        input_bias: true,
    }
}

fn quick_training() -> TrainingConfig {
    TrainingConfig {
        epochs: 4,
        ..TrainingConfig::default()
    }
}

fn small_dataset(name: &str) -> DatasetSpec {
    let recipe = RecipeSpec::mixed(6, 120, 3);
    let target = recipe.variable_names()[0].clone();
    DatasetSpec {
        name: name.into(),
        recipe,
        anomalies: vec![AnomalySpec {
            target,
            kind: AnomalyKind::AmplitudeShift { delta: 0.5 },
            start: 40,
            end: 70,
            label_tolerance: 1e-6,
        }],
    }
}

#[test]
fn trained_models_survive_a_checkpoint_round_trip() {
    let data = prepare_dataset(&small_dataset("round-trip")).unwrap();
    let names = data.train.variable_names().to_vec();
    let dir = tempfile::tempdir().unwrap();
    for (model, top_k) in [(ModelKind::Nbeats, None), (ModelKind::Gnn, Some(2))] {
        let trained = train_model(&data, model, (8, 2), top_k, &quick_training(), &tiny_architecture(), 1).unwrap();
        let cell = cell_dir(dir.path(), &data.name, model, (8, 2), top_k);
        std::fs::create_dir_all(&cell).unwrap();
        trained.save(&cell, &names, 1).unwrap();
        let loaded = TrainedModel::load(&cell, model, &names).unwrap();
        assert_eq!(loaded.parameter_count(), trained.parameter_count());

        let before = detect(trained.predictor(), &data.train, &data.test, &data.test_labels, DetectionConfig::default()).unwrap();
        let after = detect(loaded.predictor(), &data.train, &data.test, &data.test_labels, DetectionConfig::default()).unwrap();
        assert_eq!(before.rows, after.rows);
        assert_eq!(before.summary.covered_points, data.test.rows() - 8);
        assert!(before.labels.iter().any(|&l| l));
        let m = before.summary.metrics;
        assert!((0.0..=1.0).contains(&m.f1));
        assert_eq!(m.tp + m.fp + m.fn_ + m.tn, before.summary.covered_points);
    }
}

#[test]
fn predictions_have_the_declared_shape() {
    let data = prepare_dataset(&small_dataset("shape")).unwrap();
    let trained = train_model(&data, ModelKind::Gnn, (5, 3), Some(1), &quick_training(), &tiny_architecture(), 2).unwrap();
    let p = trained.predictor();
    assert_eq!((p.width(), p.lookback(), p.horizon()), (6, 5, 3));
    let x = tracecast::Tensor::zeros(&[7, 6, 5]);
    assert_eq!(p.predict(&x).unwrap().shape(), &[7, 6, 3]);
}

#[test]
fn sweep_persists_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let plan = ExperimentPlan {
        datasets: vec![small_dataset("a"), small_dataset("b")],
        models: vec![ModelKind::Nbeats, ModelKind::Gnn],
        windows: vec![(6, 2)],
        top_k: vec![1, 2],
        seed: 4,
        detection: DetectionConfig::default(),
        training: quick_training(),
        out_dir: Some(dir.path().to_path_buf()),
        workers: 1,
        architecture: tiny_architecture(),
    };
    let first = run_sweep(&plan).unwrap();
    assert_eq!(first.rows.len(), 2 * 3);
    assert!(first.rows.iter().all(|r| r.error.is_none()));
    // Both datasets share a recipe, so they share trained models.
    let a = first.find("a", ModelKind::Gnn, (6, 2), Some(2)).unwrap();
    let b = first.find("b", ModelKind::Gnn, (6, 2), Some(2)).unwrap();
    assert_eq!(a.test_mse, b.test_mse);

    let stored = ResultTable::load(dir.path()).unwrap().unwrap();
    assert_eq!(stored, first);
    assert!(dir.path().join("results.csv").is_file());
    let cell = cell_dir(dir.path(), "a", ModelKind::Gnn, (6, 2), Some(1));
    assert!(cell.join("model.gnn").is_file());
    assert!(cell.join("detection").join("summary.json").is_file());

    let second = run_sweep(&plan).unwrap();
    assert_eq!(second, first);
}

#[test]
fn config_file_drives_a_plan() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    let doc = serde_json::json!({
        "dataset": {
            "name": "cfg",
            "recipe": { "seed": 2, "variables": { "step_like": 3, "smooth_noisy": 2, "idle": 1 }, "run_length": 80 },
            "anomalies": [{ "target": "step_000", "category": "time_shift", "lag": 4, "start": 20, "end": 50 }]
        },
        "model": { "kind": "gnn", "top_k": 2 },
        "windows": [[5, 2], [10, 3]],
        "seed": 9
    });
    std::fs::write(&path, doc.to_string()).unwrap();
    let config = load_config(&path).unwrap();
    let plan = config.plan();
    assert_eq!(plan.windows, vec![(5, 2), (10, 3)]);
    assert_eq!(plan.models, vec![ModelKind::Gnn]);
    assert_eq!(plan.top_k, vec![2]);
    assert_eq!(plan.seed, 9);
    assert!(plan.validate().is_ok());
}
