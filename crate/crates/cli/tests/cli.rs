use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn epcr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epcr"))
        .args(args)
        .output()
        .expect("run epcr")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = epcr(args);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn records(manifest: &Path) -> usize {
    read(manifest)
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .count()
}

/// 10 subjects × 3 sessions × (live, print, replay), split under protocol 1
/// at 50%: subjects 1–4 labeled, subject 5 dev.
fn dataset(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let splits = root.join("split");
    ok(&["synth", "--out", s(&data), "--subjects", "10"]);
    ok(&[
        "split",
        "--manifest",
        s(&data.join("manifest.txt")),
        "--out",
        s(&splits),
        "--protocol",
        "1",
        "--labeled-pct",
        "50",
    ]);
    (data, splits)
}

fn train(data: &Path, splits: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--split-dir",
        s(splits),
        "--data-root",
        s(data),
        "--out",
        s(out),
        "--epochs",
        "2",
        "--steps-per-epoch",
        "2",
        "--batch-size",
        "8",
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn no_arguments_prints_usage() {
    let o = epcr(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_flags_and_verbs_are_usage_errors() {
    assert_eq!(epcr(&["lemmacheck", "--bogus"]).status.code(), Some(2));
    assert_eq!(epcr(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        epcr(&["split", "--out", "x", "--protocol", "6"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn lemmacheck_passes() {
    let out = ok(&["lemmacheck", "--trials", "200"]);
    assert!(out.contains("trials=200"), "{out}");
    assert!(out.trim_end().ends_with("PASS"), "{out}");
}

#[test]
fn gradcheck_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--out", s(dir.path())]);
    assert!(out.trim_end().ends_with("PASS"), "{out}");
    assert!(read(&dir.path().join("gradcheck.txt")).contains("PASS"));
    assert!(read(&dir.path().join("gradcheck.toml")).contains("seed = 1"));
}

#[test]
fn failing_gradcheck_exits_1() {
    let o = epcr(&["gradcheck", "--tol", "0", "--max-coords", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn synth_split_train_eval() {
    let root = tempfile::tempdir().unwrap();
    let (data, splits) = dataset(root.path());
    assert_eq!(records(&data.join("manifest.txt")), 90);
    assert!(data.join("synth.toml").is_file());

    for (part, n) in [
        ("labeled.train", 24),
        ("unlabeled.train", 30),
        ("dev", 6),
        ("test", 30),
    ] {
        let path = splits.join(format!("{part}.manifest"));
        assert_eq!(records(&path), n, "{part}");
        let text = read(&path);
        assert!(text.starts_with("# epcr-manifest v1"), "{part}");
        assert!(text.contains("protocol=1 labeled_pct=50"), "{part}");
    }
    let split_cfg: toml::Table = read(&splits.join("split.toml")).parse().unwrap();
    assert_eq!(split_cfg["protocol"]["labeled_pct"].as_integer(), Some(50));

    let run = root.path().join("run");
    train(&data, &splits, &run, &["--dump-views"]);
    for f in [
        "model.ckpt",
        "epoch-001.ckpt",
        "epoch-002.ckpt",
        "train.log",
        "run_config.toml",
        "train.toml",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(run.join("views").read_dir().unwrap().count() > 0);
    let log = read(&run.join("train.log"));
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 4);

    let eval = root.path().join("eval");
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("model.ckpt")),
        "--data-root",
        s(&data),
        "--test",
        s(&splits.join("test.manifest")),
        "--dev",
        s(&splits.join("dev.manifest")),
        "--out",
        s(&eval),
    ]);
    assert!(out.contains("acer="), "{out}");
    let scores = read(&eval.join("scores.tsv"));
    assert_eq!(scores.lines().count(), 31);
    assert!(scores.starts_with("# path\tscore\tlabel\tattack_type"));
    let metrics: toml::Table = read(&eval.join("metrics.toml")).parse().unwrap();
    assert_eq!(metrics["threshold_source"].as_str(), Some("dev-eer"));
    let (apcer, bpcer, acer) = (
        metrics["apcer"].as_float().unwrap(),
        metrics["bpcer"].as_float().unwrap(),
        metrics["acer"].as_float().unwrap(),
    );
    assert_eq!(acer, (apcer + bpcer) / 2.0);

    let o = epcr(&[
        "eval",
        "--checkpoint",
        s(&run.join("model.ckpt")),
        "--data-root",
        s(&data),
        "--test",
        s(&splits.join("test.manifest")),
        "--out",
        s(&root.path().join("eval2")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("threshold"), "{}", stderr(&o));
}

#[test]
fn repeated_training_is_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let (data, splits) = dataset(root.path());
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    train(&data, &splits, &a, &[]);
    train(&data, &splits, &b, &[]);
    for f in [
        "model.ckpt",
        "epoch-001.ckpt",
        "epoch-002.ckpt",
        "train.log",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flags_override_the_config_file() {
    let root = tempfile::tempdir().unwrap();
    let (data, splits) = dataset(root.path());
    let cfg = root.path().join("train.toml");
    std::fs::write(
        &cfg,
        format!(
            "epochs = 3\nsteps_per_epoch = 1\nbatch_size = 8\nseed = 5\n\n[inputs]\nsplit_dir = {:?}\ndata_root = {:?}\n",
            s(&splits),
            s(&data)
        ),
    )
    .unwrap();
    let run = root.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--epochs",
        "1",
        "--out",
        s(&run),
    ]);
    let echo: toml::Table = read(&run.join("train.toml")).parse().unwrap();
    assert_eq!(echo["epochs"].as_integer(), Some(1));
    assert_eq!(echo["seed"].as_integer(), Some(5));
    assert_eq!(echo["inputs"]["split_dir"].as_str(), Some(s(&splits)));
    assert!(run.join("epoch-001.ckpt").is_file());
    assert!(!run.join("epoch-002.ckpt").exists());
}

#[test]
fn split_reports_missing_dimensions() {
    let root = tempfile::tempdir().unwrap();
    let (data, _) = dataset(root.path());
    let o = epcr(&[
        "split",
        "--manifest",
        s(&data.join("manifest.txt")),
        "--out",
        s(&root.path().join("p3")),
        "--protocol",
        "3",
        "--unlabeled-dataset",
        "a",
        "--test-dataset",
        "b",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dataset"), "{}", stderr(&o));
}

#[test]
fn missing_input_is_named() {
    let root = tempfile::tempdir().unwrap();
    let o = epcr(&["train", "--out", s(root.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--split-dir"), "{}", stderr(&o));
}
