use std::path::Path;

use epcr::augment::{AugmentConfig, Image};
use epcr::data::{
    generate_synthetic, split, ManifestRecord, Protocol, SplitResult, SplitSpec, SynthConfig,
};
use epcr::diffcore::{Graph, Tensor};
use epcr::losses::overall_loss;
use epcr::model::{build_model, Mode, ModelConfig};
use epcr::trainer::{
    encode_checkpoint, evaluate, fit, fit_samples, load_checkpoint, load_into, save_checkpoint,
    train_step, Batch, FitOptions, Sample, Sgd, ThresholdSource, TrainConfig, FINAL_CHECKPOINT,
    LOG_FILE, LOG_HEADER, RUN_CONFIG_FILE,
};
use epcr::Error;
use rand::Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_size: 24,
        in_channels: 3,
        backbone_channels: vec![4, 8, 8],
        feature_side: 3,
        embed_dim: 8,
        ..ModelConfig::default()
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 2,
        steps_per_epoch: Some(2),
        model: tiny_model(),
        ..TrainConfig::default()
    }
}

fn random_batch(n: usize, labels: Vec<Option<u8>>, key: u64) -> Batch<f64> {
    let mut rng = epcr::rng::stream(3, &[key]);
    let mut x = || Tensor::from_fn([n, 3, 24, 24], |_| rng.gen_range(0.0..1.0));
    Batch {
        x1: x(),
        x2: x(),
        labels,
    }
}

fn synthetic(dir: &Path) -> Vec<ManifestRecord> {
    generate_synthetic(&SynthConfig::default(), dir).unwrap()
}

fn p1(records: &[ManifestRecord], pct: u32) -> SplitResult {
    split(
        records,
        &SplitSpec {
            protocol: Protocol::P1 { labeled_pct: pct },
            seed: 0,
        },
    )
    .unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
    let cfg = tiny_config();
    let mut model = build_model::<f64>(&cfg.model, 0).unwrap();
    let before: Vec<Vec<u64>> = model
        .params()
        .iter()
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let mut opt = Sgd::new(&model, &cfg);
    let batch = random_batch(3, vec![Some(0), Some(1), None], 1);
    train_step(&mut model, &mut opt, &batch, 0.1, 0.0, 0).unwrap();
    let after: Vec<Vec<u64>> = model
        .params()
        .iter()
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn unlabeled_batch_has_zero_supervised_loss_and_still_updates() {
    let cfg = tiny_config();
    let mut model = build_model::<f64>(&cfg.model, 0).unwrap();
    let before = model.clone();
    let mut opt = Sgd::new(&model, &cfg);
    let batch = random_batch(3, vec![None; 3], 2);
    let losses = train_step(&mut model, &mut opt, &batch, 0.1, 0.01, 0).unwrap();
    assert_eq!(losses.l_supervised, 0.0);
    let changed = model
        .params()
        .iter()
        .zip(before.params())
        .filter(|(a, b)| a.value != b.value)
        .count();
    assert!(changed > 0);
    // The classifier receives gradient only through the prediction term.
    let classifier = model
        .params()
        .iter()
        .position(|p| p.name.starts_with("classifier"))
        .unwrap();
    assert_ne!(
        model.params()[classifier].value,
        before.params()[classifier].value
    );
}

#[test]
fn swapping_views_leaves_objective_unchanged() {
    let cfg = tiny_config();
    let batch = random_batch(4, vec![Some(1), None, Some(0), None], 3);
    let losses = |x1: &Tensor<f64>, x2: &Tensor<f64>| {
        let mut model = build_model::<f64>(&cfg.model, 5).unwrap();
        let mut g = Graph::new();
        let b = model.bind(&mut g, true);
        let a = g.constant(x1.clone());
        let c = g.constant(x2.clone());
        let out = model.forward_views(&mut g, &b, a, c, Mode::Train).unwrap();
        overall_loss(&mut g, &out, &batch.labels, 0.1).unwrap().1
    };
    let a = losses(&batch.x1, &batch.x2);
    let b = losses(&batch.x2, &batch.x1);
    for (x, y) in [
        (a.l_embedd, b.l_embedd),
        (a.l_pred, b.l_pred),
        (a.l_supervised, b.l_supervised),
        (a.l_overall, b.l_overall),
    ] {
        assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
    }
}

#[test]
fn non_finite_input_aborts_with_step() {
    let cfg = tiny_config();
    let mut model = build_model::<f64>(&cfg.model, 0).unwrap();
    let mut opt = Sgd::new(&model, &cfg);
    let mut batch = random_batch(2, vec![Some(1), None], 4);
    batch.x1.data_mut()[0] = f64::NAN;
    let err = train_step(&mut model, &mut opt, &batch, 0.1, 0.01, 17).unwrap_err();
    match err {
        Error::NonFinite(msg) => assert!(msg.contains("step 17"), "{msg}"),
        other => panic!("unexpected {other}"),
    }
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn identical_runs_write_identical_artifacts() {
    let data = tempfile::tempdir().unwrap();
    let records = synthetic(data.path());
    let s = p1(&records, 20);
    let cfg = tiny_config();
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let out = tempfile::tempdir().unwrap();
            let opts = FitOptions {
                out_dir: Some(out.path().to_path_buf()),
                dump_views: false,
            };
            fit::<f32>(&s, data.path(), &cfg, &opts).unwrap();
            out
        })
        .collect();
    let (a, b) = (files_in(runs[0].path()), files_in(runs[1].path()));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "epoch-001.ckpt",
            "epoch-002.ckpt",
            FINAL_CHECKPOINT,
            RUN_CONFIG_FILE,
            LOG_FILE
        ]
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect::<Vec<_>>()
    );
    assert_eq!(a, b);
    let log = std::fs::read_to_string(runs[0].path().join(LOG_FILE)).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    assert!(log.contains("labeled_fraction_per_batch=0.5"));
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 4);
    let echoed = TrainConfig::load(&runs[0].path().join(RUN_CONFIG_FILE)).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn different_seeds_diverge() {
    let data = tempfile::tempdir().unwrap();
    let s = p1(&synthetic(data.path()), 20);
    let a = fit::<f32>(&s, data.path(), &tiny_config(), &FitOptions::default()).unwrap();
    let cfg = TrainConfig {
        seed: 1,
        ..tiny_config()
    };
    let b = fit::<f32>(&s, data.path(), &cfg, &FitOptions::default()).unwrap();
    assert_ne!(encode_checkpoint(&a.model), encode_checkpoint(&b.model));
}

#[test]
fn empty_labeled_set_is_rejected() {
    let err = fit_samples::<f32>(&[], &[], &tiny_config(), &FitOptions::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let mut model = build_model::<f32>(&cfg.model, 3).unwrap();
    let mut opt = Sgd::new(&model, &cfg);
    let batch = random_batch(2, vec![Some(1), Some(0)], 5);
    let batch = Batch {
        x1: batch.x1.cast(),
        x2: batch.x2.cast(),
        labels: batch.labels,
    };
    train_step(&mut model, &mut opt, &batch, 0.1, 0.01, 0).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&model, &a).unwrap();
    let loaded = load_checkpoint::<f32>(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded.bn_states(), model.bn_states());

    let mut other = build_model::<f32>(&cfg.model, 9).unwrap();
    load_into(&mut other, &a).unwrap();
    assert_eq!(encode_checkpoint(&other), std::fs::read(&a).unwrap());
}

#[test]
fn truncated_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_model::<f32>(&tiny_model(), 0).unwrap();
    let path = dir.path().join("m.ckpt");
    let bytes = encode_checkpoint(&model);
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    let err = load_checkpoint::<f32>(&path).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
}

#[test]
fn mismatched_model_names_first_bad_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&build_model::<f32>(&tiny_model(), 0).unwrap(), &path).unwrap();
    let wider = ModelConfig {
        backbone_channels: vec![5, 8, 8],
        ..tiny_model()
    };
    let mut other = build_model::<f32>(&wider, 0).unwrap();
    let err = load_into(&mut other, &path).unwrap_err().to_string();
    assert!(err.contains("first mismatch"), "{err}");
    assert!(err.contains("backbone.0.0"), "{err}");
}

#[test]
fn dump_views_writes_both_views_of_first_batch() {
    let out = tempfile::tempdir().unwrap();
    let mut rng = epcr::rng::stream(1, &[1]);
    let labeled: Vec<Sample> = (0..4)
        .map(|i| Sample {
            image: Image::new(
                24,
                24,
                (0..3 * 24 * 24).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap(),
            label: Some((i % 2) as u8),
            id: i,
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 1,
        steps_per_epoch: Some(1),
        ..tiny_config()
    };
    let opts = FitOptions {
        out_dir: Some(out.path().to_path_buf()),
        dump_views: true,
    };
    fit_samples::<f32>(&labeled, &[], &cfg, &opts).unwrap();
    let views = out.path().join("views");
    for i in 0..4 {
        for v in 1..=2 {
            let bytes = std::fs::read(views.join(format!("sample{i:03}_view{v}.ppm"))).unwrap();
            assert!(bytes.starts_with(b"P6\n24 24\n255\n"));
        }
    }
}

fn trained_on_synthetic(data: &Path) -> (SplitResult, epcr::trainer::FitReport<f32>) {
    let records = synthetic(data);
    let s = p1(&records, 100);
    let cfg = TrainConfig {
        batch_size: 32,
        epochs: 10,
        steps_per_epoch: Some(20),
        base_lr_start: 0.15,
        base_lr_end: 0.05,
        ..TrainConfig::default()
    };
    let report = fit::<f32>(&s, data, &cfg, &FitOptions::default()).unwrap();
    (s, report)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn supervised_loss_trends_down_and_training_set_is_separated() {
    let data = tempfile::tempdir().unwrap();
    let (s, report) = trained_on_synthetic(data.path());
    let sup: Vec<f64> = report.log.iter().map(|l| l.losses.l_supervised).collect();
    let k = sup.len() / 10;
    let (first, last) = (
        median(sup[..k].to_vec()),
        median(sup[sup.len() - k..].to_vec()),
    );
    assert!(last < first, "first {first} last {last}");

    let train = evaluate(
        &report.model,
        data.path(),
        &s.labeled_train,
        Some(&s.labeled_train),
        None,
    )
    .unwrap();
    assert_eq!(train.threshold_source, ThresholdSource::DevEer);
    assert!(train.summary.acer <= 0.05, "{:?}", train.summary);

    let again = evaluate(
        &report.model,
        data.path(),
        &s.labeled_train,
        Some(&s.labeled_train),
        None,
    )
    .unwrap();
    assert_eq!(train.scores_text(), again.scores_text());

    let all_live = evaluate(
        &report.model,
        data.path(),
        &s.test,
        None,
        Some(f64::INFINITY),
    )
    .unwrap();
    assert_eq!(all_live.threshold_source, ThresholdSource::Fixed);
    let m = all_live.summary;
    assert_eq!((m.apcer, m.bpcer, m.acer), (1.0, 0.0, 0.5));
}

#[test]
fn evaluation_needs_dev_or_threshold() {
    let data = tempfile::tempdir().unwrap();
    let records = synthetic(data.path());
    let mut model = build_model::<f32>(&tiny_model(), 0).unwrap();
    model.initialize_running_stats();
    let err = evaluate(&model, data.path(), &records, None, None).unwrap_err();
    assert!(err.to_string().contains("dev"), "{err}");
}

#[test]
fn evaluation_writes_scores_and_metrics() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let s = p1(&synthetic(data.path()), 100);
    let mut model = build_model::<f32>(&tiny_model(), 0).unwrap();
    model.initialize_running_stats();
    let report = evaluate(&model, data.path(), &s.test, Some(&s.dev), None).unwrap();
    report.write(out.path()).unwrap();
    let scores = std::fs::read_to_string(out.path().join("scores.tsv")).unwrap();
    assert_eq!(scores.lines().count(), s.test.len() + 1);
    let metrics: toml::Table = std::fs::read_to_string(out.path().join("metrics.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(metrics["threshold_source"].as_str(), Some("dev-eer"));
    for key in ["apcer", "bpcer", "acer", "hter", "auc", "threshold"] {
        assert!(metrics[key].as_float().is_some(), "{key}");
    }
}

#[test]
fn unaugmented_identical_views_give_matching_branches() {
    let cfg = TrainConfig {
        augment: AugmentConfig::disabled(),
        ..tiny_config()
    };
    let mut model = build_model::<f64>(&cfg.model, 0).unwrap();
    let mut opt = Sgd::new(&model, &cfg);
    let b = random_batch(3, vec![Some(0), Some(1), Some(1)], 6);
    let batch = Batch {
        x1: b.x1.clone(),
        x2: b.x1,
        labels: b.labels,
    };
    let losses = train_step(&mut model, &mut opt, &batch, 0.1, 0.0, 0).unwrap();
    assert!(losses.l_embedd >= -1.0 - 1e-12 && losses.l_embedd <= 1.0);
    assert!(losses.l_pred >= 0.0);
}
