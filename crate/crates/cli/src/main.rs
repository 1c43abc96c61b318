//! `epcr`: synthetic data, protocol splits, training, evaluation and the
//! numerical self-checks, one verb per invocation.
//!
//! Every verb that takes `--config` reads a TOML file first; flags given on
//! the command line override the file. The effective configuration is
//! written back into the output directory as `<verb>.toml`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use epcr::data::{
    generate_synthetic, read_manifest, split, write_manifest, AttackType, ExtraMode, Protocol,
    SplitResult, SplitSpec, SynthConfig,
};
use epcr::diffcore::{DType, Element, GradCheckOptions};
use epcr::losses::lemma_sweep;
use epcr::trainer::{
    check_objective_gradients, evaluate, fit, gradcheck_model, load_checkpoint, EvalReport,
    FitOptions, TrainConfig, FINAL_CHECKPOINT, LOG_FILE,
};
use epcr::{Error, Result};

const LEMMA_TOL: f64 = 1e-6;
/// Default check point. Some seeds place a ReLU or max-pool switch within
/// one finite-difference step, where the objective is not differentiable.
const GRADCHECK_SEED: u64 = 1;

#[derive(Parser)]
#[command(
    name = "epcr",
    version,
    about = "Consistency-regularized face anti-spoofing at desk scale"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic live/spoof dataset and its manifest.
    Synth(SynthArgs),
    /// Partition a manifest under one of the five protocols.
    Split(SplitArgs),
    /// Train a model on a split.
    Train(TrainArgs),
    /// Score a manifest with a checkpoint and compute metrics.
    Eval(EvalArgs),
    /// Finite-difference check of the full objective at f64.
    Gradcheck(GradcheckArgs),
    /// Random sweep of the dense-similarity decomposition.
    Lemmacheck(LemmacheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    subjects: Option<u32>,
    #[arg(long)]
    sessions: Option<u8>,
    #[arg(long)]
    frames: Option<u32>,
    /// Comma-separated attack types, e.g. `print,replay`.
    #[arg(long, value_delimiter = ',')]
    attacks: Option<Vec<AttackType>>,
    /// Comma-separated dataset ids.
    #[arg(long, value_delimiter = ',')]
    datasets: Option<Vec<String>>,
    #[arg(long)]
    image_side: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    image_noise: Option<f64>,
    #[arg(long)]
    overlay_amplitude: Option<f64>,
    #[arg(long)]
    overlay_min_factor: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    protocol: Option<u8>,
    #[arg(long)]
    labeled_pct: Option<u32>,
    /// Session-3 data added as unlabeled (protocol 2): none, live-only, live-spoof.
    #[arg(long)]
    extra: Option<ExtraMode>,
    #[arg(long)]
    extra_pct: Option<u32>,
    #[arg(long)]
    unlabeled_dataset: Option<String>,
    #[arg(long)]
    test_dataset: Option<String>,
    #[arg(long)]
    unlabeled_attack: Option<AttackType>,
    #[arg(long)]
    test_attack: Option<AttackType>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `split`.
    #[arg(long)]
    split_dir: Option<PathBuf>,
    /// Directory that manifest paths are relative to.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dtype: Option<DType>,
    /// Write both augmented views of the first batch as PPM images.
    #[arg(long)]
    dump_views: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Manifest used to pick the EER threshold.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Fixed decision threshold; takes precedence over `--dev`.
    #[arg(long, allow_negative_numbers = true)]
    threshold: Option<f64>,
    #[arg(long)]
    dtype: Option<DType>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tol: Option<f64>,
    /// Check at most this many coordinates per parameter tensor.
    #[arg(long)]
    max_coords: Option<usize>,
}

#[derive(Args)]
struct LemmacheckArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

// ── effective configurations ─────────────────────────────────────────

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    manifest: Option<PathBuf>,
    #[serde(default)]
    seed: u64,
    protocol: Option<Protocol>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainInputs {
    split_dir: Option<PathBuf>,
    data_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalFile {
    checkpoint: Option<PathBuf>,
    data_root: Option<PathBuf>,
    test: Option<PathBuf>,
    dev: Option<PathBuf>,
    threshold: Option<f64>,
    dtype: DType,
}

impl Default for EvalFile {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data_root: None,
            test: None,
            dev: None,
            threshold: None,
            dtype: DType::F32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckFile {
    seed: u64,
    tol: f64,
    max_coords: Option<usize>,
}

impl Default for GradcheckFile {
    fn default() -> Self {
        Self {
            seed: GRADCHECK_SEED,
            tol: GradCheckOptions::default().tol,
            max_coords: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LemmacheckFile {
    trials: usize,
    seed: u64,
}

impl Default for LemmacheckFile {
    fn default() -> Self {
        Self {
            trials: 200,
            seed: 0,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn load_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => toml::from_str(&read_text(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn echo_config<T: Serialize>(dir: &Path, verb: &str, value: &T) -> Result<()> {
    create_dir(dir)?;
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(format!("{verb}.toml"));
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| {
        Error::InvalidArgument(format!("missing --{flag} (or set it in the config file)"))
    })
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

// ── verbs ────────────────────────────────────────────────────────────

fn run_synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = load_toml(a.config.as_deref())?;
    set(&mut cfg.subjects, a.subjects);
    set(&mut cfg.sessions, a.sessions);
    set(&mut cfg.frames, a.frames);
    set(&mut cfg.attacks, a.attacks);
    set(&mut cfg.datasets, a.datasets);
    set(&mut cfg.image_side, a.image_side);
    set(&mut cfg.noise, a.noise);
    set(&mut cfg.image_noise, a.image_noise);
    set(&mut cfg.overlay_amplitude, a.overlay_amplitude);
    set(&mut cfg.overlay_min_factor, a.overlay_min_factor);
    set(&mut cfg.seed, a.seed);
    cfg.validate()?;
    let records = generate_synthetic(&cfg, &a.out)?;
    echo_config(&a.out, "synth", &cfg)?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn resolve_protocol(a: &SplitArgs, base: Option<Protocol>) -> Result<Protocol> {
    let number = match (a.protocol, &base) {
        (Some(n), _) => n,
        (None, Some(p)) => p.number(),
        (None, None) => {
            return Err(Error::InvalidArgument(
                "missing --protocol (or set it in the config file)".into(),
            ))
        }
    };
    let base = base.filter(|p| p.number() == number);
    let pct =
        |flag: Option<u32>, from_base: Option<u32>, name: &str| required(flag.or(from_base), name);
    Ok(match number {
        1 => {
            let b = match base {
                Some(Protocol::P1 { labeled_pct }) => Some(labeled_pct),
                _ => None,
            };
            Protocol::P1 {
                labeled_pct: pct(a.labeled_pct, b, "labeled-pct")?,
            }
        }
        2 => {
            let (be, bp) = match base {
                Some(Protocol::P2 { extra, extra_pct }) => (Some(extra), Some(extra_pct)),
                _ => (None, None),
            };
            Protocol::P2 {
                extra: required(a.extra.or(be), "extra")?,
                extra_pct: pct(a.extra_pct, bp, "extra-pct")?,
            }
        }
        3 => {
            let (bu, bt) = match base {
                Some(Protocol::P3 {
                    unlabeled_dataset,
                    test_dataset,
                }) => (Some(unlabeled_dataset), Some(test_dataset)),
                _ => (None, None),
            };
            Protocol::P3 {
                unlabeled_dataset: required(
                    a.unlabeled_dataset.clone().or(bu),
                    "unlabeled-dataset",
                )?,
                test_dataset: required(a.test_dataset.clone().or(bt), "test-dataset")?,
            }
        }
        4 => {
            let (bp, bt) = match base {
                Some(Protocol::P4 {
                    labeled_pct,
                    test_dataset,
                }) => (Some(labeled_pct), Some(test_dataset)),
                _ => (None, None),
            };
            Protocol::P4 {
                labeled_pct: pct(a.labeled_pct, bp, "labeled-pct")?,
                test_dataset: required(a.test_dataset.clone().or(bt), "test-dataset")?,
            }
        }
        _ => {
            let (bu, bt) = match base {
                Some(Protocol::P5 {
                    unlabeled_attack,
                    test_attack,
                }) => (Some(unlabeled_attack), Some(test_attack)),
                _ => (None, None),
            };
            Protocol::P5 {
                unlabeled_attack: required(a.unlabeled_attack.or(bu), "unlabeled-attack")?,
                test_attack: required(a.test_attack.or(bt), "test-attack")?,
            }
        }
    })
}

/// File name of a split part inside a split directory.
fn part_file(part: &str) -> String {
    format!("{part}.manifest")
}

fn run_split(a: SplitArgs) -> Result<()> {
    let mut file: SplitFile = load_toml(a.config.as_deref())?;
    let protocol = resolve_protocol(&a, file.protocol.take())?;
    set(&mut file.seed, a.seed);
    file.manifest = a.manifest.clone().or(file.manifest);
    let manifest_path = required(file.manifest.clone(), "manifest")?;
    let spec = SplitSpec {
        protocol: protocol.clone(),
        seed: file.seed,
    };
    let records = read_manifest(&manifest_path)?;
    let result = split(&records, &spec)?;
    create_dir(&a.out)?;
    for (part, recs) in result.parts() {
        let mut comments = epcr::data::split::provenance(&spec, part);
        comments.push(format!("source {}", manifest_path.display()));
        write_manifest(recs, &a.out.join(part_file(part)), &comments)?;
    }
    file.protocol = Some(protocol);
    echo_config(&a.out, "split", &file)?;
    let counts: Vec<String> = result
        .parts()
        .iter()
        .map(|(p, r)| format!("{p}={}", r.len()))
        .collect();
    println!("{} {}", spec.protocol, counts.join(" "));
    Ok(())
}

fn load_split_dir(dir: &Path) -> Result<SplitResult> {
    let read = |part: &str| read_manifest(&dir.join(part_file(part)));
    Ok(SplitResult {
        labeled_train: read("labeled.train")?,
        unlabeled_train: read("unlabeled.train")?,
        dev: read("dev")?,
        test: read("test")?,
    })
}

/// A train config file is a `TrainConfig` with an optional `[inputs]` table.
fn load_train_file(path: Option<&Path>) -> Result<(TrainInputs, TrainConfig)> {
    let Some(path) = path else {
        return Ok((TrainInputs::default(), TrainConfig::default()));
    };
    let bad = |e: String| Error::Config(format!("{}: {e}", path.display()));
    let mut table: toml::Table = read_text(path)?
        .parse()
        .map_err(|e: toml::de::Error| bad(e.to_string()))?;
    let inputs = match table.remove("inputs") {
        Some(v) => v
            .try_into()
            .map_err(|e: toml::de::Error| bad(e.to_string()))?,
        None => TrainInputs::default(),
    };
    let cfg = TrainConfig::from_toml(&toml::to_string(&table).map_err(|e| bad(e.to_string()))?)
        .map_err(|e| bad(e.to_string()))?;
    Ok((inputs, cfg))
}

#[derive(Serialize)]
struct TrainEcho<'a> {
    inputs: &'a TrainInputs,
    #[serde(flatten)]
    config: &'a TrainConfig,
}

fn train_as<T: Element>(
    s: &SplitResult,
    root: &Path,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<String> {
    let report = fit::<T>(s, root, cfg, opts)?;
    Ok(report.log.last().map(|l| l.line()).unwrap_or_default())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let (mut inputs, mut cfg) = load_train_file(a.config.as_deref())?;
    inputs.split_dir = a.split_dir.or(inputs.split_dir);
    inputs.data_root = a.data_root.or(inputs.data_root);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.epochs, a.epochs);
    if a.steps_per_epoch.is_some() {
        cfg.steps_per_epoch = a.steps_per_epoch;
    }
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.dtype, a.dtype);
    cfg.validate()?;
    let split_dir = required(inputs.split_dir.clone(), "split-dir")?;
    let root = required(inputs.data_root.clone(), "data-root")?;
    let s = load_split_dir(&split_dir)?;
    echo_config(
        &a.out,
        "train",
        &TrainEcho {
            inputs: &inputs,
            config: &cfg,
        },
    )?;
    let opts = FitOptions {
        out_dir: Some(a.out.clone()),
        dump_views: a.dump_views,
    };
    let last = match cfg.dtype {
        DType::F32 => train_as::<f32>(&s, &root, &cfg, &opts)?,
        DType::F64 => train_as::<f64>(&s, &root, &cfg, &opts)?,
    };
    println!("{last}");
    println!(
        "wrote {} and {} to {}",
        FINAL_CHECKPOINT,
        LOG_FILE,
        a.out.display()
    );
    Ok(())
}

fn eval_as<T: Element>(f: &EvalFile, ckpt: &Path, root: &Path, test: &Path) -> Result<EvalReport> {
    let model = load_checkpoint::<T>(ckpt)?;
    let test = read_manifest(test)?;
    let dev = f.dev.as_deref().map(read_manifest).transpose()?;
    evaluate(&model, root, &test, dev.as_deref(), f.threshold)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let mut f: EvalFile = load_toml(a.config.as_deref())?;
    f.checkpoint = a.checkpoint.or(f.checkpoint);
    f.data_root = a.data_root.or(f.data_root);
    f.test = a.test.or(f.test);
    f.dev = a.dev.or(f.dev);
    f.threshold = a.threshold.or(f.threshold);
    set(&mut f.dtype, a.dtype);
    let ckpt = required(f.checkpoint.clone(), "checkpoint")?;
    let root = required(f.data_root.clone(), "data-root")?;
    let test = required(f.test.clone(), "test")?;
    if f.dev.is_none() && f.threshold.is_none() {
        return Err(Error::InvalidArgument(
            "ACER needs a threshold: pass --dev <manifest> or --threshold <value>".into(),
        ));
    }
    let report = match f.dtype {
        DType::F32 => eval_as::<f32>(&f, &ckpt, &root, &test)?,
        DType::F64 => eval_as::<f64>(&f, &ckpt, &root, &test)?,
    };
    report.write(&a.out)?;
    echo_config(&a.out, "eval", &f)?;
    let m = &report.summary;
    println!(
        "apcer={} bpcer={} acer={} hter={} auc={} threshold={}",
        m.apcer, m.bpcer, m.acer, m.hter, m.auc, m.threshold
    );
    Ok(())
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}

fn write_report(out: Option<&Path>, verb: &str, text: &str) -> Result<()> {
    if let Some(dir) = out {
        create_dir(dir)?;
        let p = dir.join(format!("{verb}.txt"));
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let mut f: GradcheckFile = load_toml(a.config.as_deref())?;
    set(&mut f.seed, a.seed);
    set(&mut f.tol, a.tol);
    if a.max_coords.is_some() {
        f.max_coords = a.max_coords;
    }
    let opts = GradCheckOptions {
        tol: f.tol,
        max_coords_per_param: f.max_coords,
        ..GradCheckOptions::default()
    };
    let report = check_objective_gradients(&gradcheck_model(), f.seed, &opts)?;
    let text = format!(
        "coords={} max_rel_error={:e} tol={:e} {}\n",
        report.coords_checked,
        report.max_rel_error,
        report.tol,
        verdict(report.passed())
    );
    print!("{text}");
    if let Some(dir) = &a.out {
        echo_config(dir, "gradcheck", &f)?;
    }
    write_report(a.out.as_deref(), "gradcheck", &text)?;
    Ok(report.passed())
}

fn run_lemmacheck(a: LemmacheckArgs) -> Result<bool> {
    let mut f: LemmacheckFile = load_toml(a.config.as_deref())?;
    set(&mut f.trials, a.trials);
    set(&mut f.seed, a.seed);
    if f.trials == 0 {
        return Err(Error::InvalidArgument("--trials must be positive".into()));
    }
    let sweep = lemma_sweep(f.trials, f.seed)?;
    let passed = sweep.max_deviation < LEMMA_TOL;
    let text = format!(
        "trials={} max_relative_deviation={:e} worst_rows={} worst_dim={} tol={:e} {}\n",
        sweep.trials,
        sweep.max_deviation,
        sweep.worst_shape.0,
        sweep.worst_shape.1,
        LEMMA_TOL,
        verdict(passed)
    );
    print!("{text}");
    if let Some(dir) = &a.out {
        echo_config(dir, "lemmacheck", &f)?;
    }
    write_report(a.out.as_deref(), "lemmacheck", &text)?;
    Ok(passed)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth(a) => run_synth(a).map(|_| true),
        Command::Split(a) => run_split(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Lemmacheck(a) => run_lemmacheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
