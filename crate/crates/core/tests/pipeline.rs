mod common;

use common::{ar1, dataset, delayed_pair};
use dema_core::model::{load_checkpoint, Model, Task};
use dema_core::pipeline::{
    detect, evaluate, prepare_split, train, train_model, write_metrics, RunConfig, Split,
};
use dema_core::tensor::Tape;
use dema_core::{DemaError, SeriesWindow};

fn small(task: Task) -> RunConfig {
    let mut cfg = RunConfig::parse_str(
        "seq_len = 32\nhorizon = 8\nd_model = 8\nn_blocks = 1\nd_state = 4\nbatch_size = 8\nepochs = 2\nmax_train_windows = 16\nmax_eval_windows = 8\nseed = 5",
    )
    .unwrap();
    cfg.task = task;
    cfg
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let data = dataset(ar1(2, 120, 0.8, 1), None);
    let mut cfg = small(Task::Forecast);
    cfg.lr = 0.0;
    cfg.epochs = 1;
    let init = Model::new(cfg.model_config(2).unwrap(), cfg.seed).unwrap();
    let report = train(&cfg, &data, None).unwrap();
    for id in init.store().ids() {
        assert_eq!(
            init.store().get(id),
            report.model.store().get(id),
            "{}",
            init.store().name(id)
        );
    }
}

#[test]
fn fixed_seed_gives_identical_runs() {
    let data = dataset(ar1(2, 120, 0.8, 2), None);
    let cfg = small(Task::Forecast);
    let a = train(&cfg, &data, None).unwrap();
    let b = train(&cfg, &data, None).unwrap();
    assert_eq!(a.log, b.log);
    let mut other = cfg.clone();
    other.seed = 6;
    assert_ne!(train(&other, &data, None).unwrap().log, a.log);
}

#[test]
fn training_reduces_loss_on_ar1() {
    let mut data = dataset(ar1(2, 200, 0.9, 3), None);
    data.standardize();
    let mut cfg = small(Task::Forecast);
    cfg.epochs = 50;
    cfg.lr = 1e-3;
    cfg.max_train_windows = 32;
    let report = train(&cfg, &data, None).unwrap();
    let first = report.log.first().unwrap().train_loss;
    let last = report.log.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn divergence_aborts_with_last_good_checkpoint() {
    let data = dataset(ar1(2, 120, 0.5, 4), None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let cfg = small(Task::Forecast);
    let mut model = Model::new(cfg.model_config(2).unwrap(), cfg.seed).unwrap();
    let bias = model.head().layers[0].bias.unwrap();
    model.store_mut().get_mut(bias).data_mut().fill(1e200);
    match train_model(&cfg, &data, model.clone(), Some(&path)) {
        Err(DemaError::Diverged { epoch, .. }) => assert_eq!(epoch, 1),
        other => panic!("{other:?}"),
    }
    let saved = load_checkpoint(&path).unwrap();
    for id in model.store().ids() {
        assert_eq!(saved.store().get(id), model.store().get(id));
    }
}

#[test]
fn best_validation_checkpoint_is_saved() {
    let data = dataset(delayed_pair(200, 4, 5), None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let cfg = small(Task::Forecast);
    let report = train(&cfg, &data, Some(&path)).unwrap();
    let best = report
        .log
        .iter()
        .map(|e| e.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(report.log[report.best_epoch - 1].val_loss, best);
    let saved = load_checkpoint(&path).unwrap();
    let id = saved.store().ids().last().unwrap();
    assert_eq!(saved.store().get(id), report.model.store().get(id));
    let metrics = evaluate(&saved, &cfg, &data).unwrap();
    assert!(metrics["mse"].is_finite() && metrics["mae"] > 0.0);
    let out = dir.path().join("metrics.json");
    write_metrics(&metrics, &out).unwrap();
    let back: std::collections::BTreeMap<String, f64> =
        serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(back, metrics);
}

#[test]
fn evaluation_rejects_task_mismatch() {
    let data = dataset(ar1(2, 120, 0.5, 6), None);
    let cfg = small(Task::Forecast);
    let model = Model::new(cfg.model_config(2).unwrap(), 1).unwrap();
    let other = small(Task::Impute);
    assert!(matches!(
        evaluate(&model, &other, &data),
        Err(DemaError::Contract(_))
    ));
    let wide = dataset(ar1(3, 120, 0.5, 6), None);
    assert!(matches!(
        evaluate(&model, &cfg, &wide),
        Err(DemaError::Contract(_))
    ));
}

#[test]
fn imputation_loss_reads_only_hidden_points() {
    let data = dataset(ar1(2, 120, 0.7, 7), None);
    let mut cfg = small(Task::Impute);
    cfg.mask_ratio = 0.25;
    let model = Model::new(cfg.model_config(2).unwrap(), 1).unwrap();
    let samples = prepare_split(&cfg, &model, &data, Split::Train, None, 4).unwrap();
    for s in &samples {
        let mask = s.loss_mask.as_ref().unwrap();
        assert_eq!(mask.data(), s.missing.as_ref().unwrap().data());
        assert_eq!(mask.data().iter().filter(|&&m| m != 0.0).count(), 16);
        let tape = Tape::new();
        let y = tape.leaf(
            model
                .predict(&s.input, s.missing.as_ref(), &s.priors)
                .unwrap(),
        );
        let loss = y.mse(&s.target, Some(mask)).unwrap();
        let g = tape.backward(loss).unwrap();
        let gy = g.wrt(y).unwrap();
        for (k, &m) in mask.data().iter().enumerate() {
            if m == 0.0 {
                assert_eq!(gy.data()[k], 0.0);
            } else {
                assert_ne!(gy.data()[k], 0.0);
            }
        }
    }
    let report = train(&cfg, &data, None).unwrap();
    let metrics = evaluate(&report.model, &cfg, &data).unwrap();
    assert!(metrics["mse"].is_finite());
    assert_eq!(metrics["points"], metrics["windows"] * 16.0);
}

#[test]
fn detector_finds_spikes() {
    let len = 640;
    let mut series = SeriesWindow::from_fn(2, len, |i, s| 0.1 * (s as f64 * 0.3 + i as f64).sin());
    let mut labels = vec![0.0; len];
    for &s in &[520, 550, 580, 620] {
        series.set(0, s, 25.0);
        labels[s] = 1.0;
    }
    let data = dataset(series, Some(labels));
    let mut cfg = small(Task::Anomaly);
    // 4 spikes among 4 * 32 + 14 * 32 scored points
    cfg.anomaly_ratio = 4.0 / 576.0;
    // a zero head reconstructs each window by its mean
    let mut model = Model::new(cfg.model_config(2).unwrap(), 2).unwrap();
    let w = model.head().layers[0].weight;
    model.store_mut().get_mut(w).data_mut().fill(0.0);
    let det = detect(&model, &cfg, &data).unwrap();
    assert_eq!(det.scores.len(), 4 * 32);
    assert_eq!(det.start, 512);
    assert_eq!(det.metrics["f1"], 1.0, "{:?}", det.metrics);
    let unlabeled = dataset(ar1(2, 640, 0.5, 1), None);
    let blind = detect(&model, &cfg, &unlabeled).unwrap();
    assert_eq!(
        blind.metrics.keys().collect::<Vec<_>>(),
        ["points", "threshold"]
    );
    assert!(matches!(
        evaluate(&model, &cfg, &unlabeled),
        Err(DemaError::Contract(_))
    ));
}

#[test]
fn classification_accuracy_is_reported() {
    let len = 300;
    let series = SeriesWindow::from_fn(1, len, |_, s| if (s / 40) % 2 == 0 { 1.0 } else { -1.0 });
    let labels = (0..len).map(|s| ((s / 40) % 2) as f64).collect();
    let data = dataset(series, Some(labels));
    let mut cfg = small(Task::Classify);
    cfg.epochs = 1;
    let report = train_model(
        &cfg,
        &data,
        Model::new(cfg.model_config(1).unwrap(), 3).unwrap(),
        None,
    )
    .unwrap();
    let m = evaluate(&report.model, &cfg, &data).unwrap();
    assert!((0.0..=1.0).contains(&m["accuracy"]));
}
