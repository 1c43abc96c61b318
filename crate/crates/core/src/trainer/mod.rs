//! Training loop: two augmented views per sample, one forward over both,
//! L_supervised + L_embedd + α·L_pred in a single backward pass, then SGD.

mod check;
mod config;
pub mod eval;
mod io;
mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

pub use check::{check_objective_gradients, gradcheck_model};
pub use config::{desk_model, TrainConfig};
pub use eval::{evaluate, score_records, EvalReport, ScoredRecord, ThresholdSource};
pub use io::{encode_checkpoint, load_checkpoint, load_into, save_checkpoint};
pub use optim::{lr_at, Sgd};

use crate::augment::{compose_views, Image};
use crate::data::{read_image, ManifestRecord, SplitResult};
use crate::diffcore::{Element, Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::{overall_loss, LossBundle};
use crate::model::{build_model, Mode, Model};
use crate::rng;

pub const LOG_HEADER: &str = "# epcr-train-log v1";
pub const RUN_CONFIG_FILE: &str = "run_config.toml";
pub const LOG_FILE: &str = "train.log";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

const STREAM_LABELED: u64 = 11;
const STREAM_UNLABELED: u64 = 12;
const STREAM_AUGMENT: u64 = 13;

/// Two views plus per-row labels (`None` for unlabeled rows).
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
    pub labels: Vec<Option<u8>>,
}

impl<T: Element> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One training step: forward both views, backward the overall loss once,
/// update parameters. Returns the loss components measured before the update.
pub fn train_step<T: Element>(
    model: &mut Model<T>,
    opt: &mut Sgd<T>,
    batch: &Batch<T>,
    alpha: f64,
    lr: f64,
    step: usize,
) -> Result<LossBundle> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !batch.x1.all_finite() || !batch.x2.all_finite() {
        return Err(Error::NonFinite(format!(
            "step {step}: batch contains non-finite pixels"
        )));
    }
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let x1 = g.constant(batch.x1.clone());
    let x2 = g.constant(batch.x2.clone());
    let out = model.forward_views(&mut g, &b, x1, x2, Mode::Train)?;
    let (vars, bundle) = overall_loss(&mut g, &out, &batch.labels, alpha)?;
    let parts = [
        bundle.l_supervised,
        bundle.l_embedd,
        bundle.l_pred,
        bundle.l_overall,
    ];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "step {step}: l_supervised={} l_embedd={} l_pred={} l_overall={} lr={lr}",
            bundle.l_supervised, bundle.l_embedd, bundle.l_pred, bundle.l_overall
        )));
    }
    let grads = g.backward(vars.overall)?;
    let grads = b.grads(&grads, model);
    opt.step(model, &grads, lr)?;
    Ok(bundle)
}

/// A training sample held in memory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub label: Option<u8>,
    /// Stable identity for augmentation streams.
    pub id: u64,
}

pub fn load_samples(
    root: &Path,
    records: &[ManifestRecord],
    labeled: bool,
    id_offset: u64,
) -> Result<Vec<Sample>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(Sample {
                image: read_image(&root.join(&r.path))?,
                label: labeled.then(|| r.label.target()),
                id: id_offset + i as u64,
            })
        })
        .collect()
}

/// Endless reshuffled pass over indices `0..n`; pass `k` uses its own stream.
struct Cycler {
    n: usize,
    seed: u64,
    stream: u64,
    pass: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, seed: u64, stream: u64) -> Self {
        let mut c = Self {
            n,
            seed,
            stream,
            pass: 0,
            order: Vec::new(),
            pos: 0,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order
            .shuffle(&mut rng::stream(self.seed, &[self.stream, self.pass]));
        self.pass += 1;
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.n {
            self.reshuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Per-batch composition: (labeled rows, unlabeled rows).
pub fn batch_composition(cfg: &TrainConfig, n_unlabeled: usize) -> (usize, usize) {
    if n_unlabeled == 0 {
        return (cfg.batch_size, 0);
    }
    let l = ((cfg.batch_size as f64 * cfg.labeled_fraction_per_batch).round() as usize)
        .clamp(1, cfg.batch_size);
    (l, cfg.batch_size - l)
}

pub fn steps_per_epoch(cfg: &TrainConfig, n_labeled: usize, n_unlabeled: usize) -> usize {
    cfg.steps_per_epoch
        .unwrap_or_else(|| (n_labeled + n_unlabeled).div_ceil(cfg.batch_size).max(1))
}

fn make_batch<T: Element>(
    samples: &[&Sample],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Batch<T>> {
    let aug_seed = rng::derive_seed(cfg.seed, &[STREAM_AUGMENT, epoch as u64]);
    let mut v1 = Vec::with_capacity(samples.len());
    let mut v2 = Vec::with_capacity(samples.len());
    for s in samples {
        let (a, b) = compose_views(&s.image, &cfg.augment, aug_seed, s.id)?;
        v1.push(a);
        v2.push(b);
    }
    Ok(Batch {
        x1: Tensor::stack(&v1.iter().map(Image::to_tensor).collect::<Vec<_>>())?,
        x2: Tensor::stack(&v2.iter().map(Image::to_tensor).collect::<Vec<_>>())?,
        labels: samples.iter().map(|s| s.label).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub losses: LossBundle,
}

impl StepLog {
    pub fn line(&self) -> String {
        let l = &self.losses;
        format!(
            "epoch={} step={} lr={} l_supervised={} l_embedd={} l_pred={} l_overall={}",
            self.epoch, self.step, self.lr, l.l_supervised, l.l_embedd, l.l_pred, l.l_overall
        )
    }
}

/// Where `fit` writes its artifacts. Without an output directory nothing
/// touches the filesystem.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub out_dir: Option<PathBuf>,
    /// Write the two views of the first batch as PPM files under `views/`.
    pub dump_views: bool,
}

#[derive(Debug, Clone)]
pub struct FitReport<T> {
    pub model: Model<T>,
    pub log: Vec<StepLog>,
}

fn log_header(
    cfg: &TrainConfig,
    n_l: usize,
    n_u: usize,
    per_batch: (usize, usize),
    steps: usize,
) -> Vec<String> {
    vec![
        LOG_HEADER.to_string(),
        format!(
            "# seed={} dtype={} labeled={n_l} unlabeled={n_u} labeled_per_batch={} unlabeled_per_batch={} labeled_fraction_per_batch={}",
            cfg.seed, cfg.dtype, per_batch.0, per_batch.1, cfg.labeled_fraction_per_batch
        ),
        format!(
            "# epochs={} steps_per_epoch={steps} total_steps={} alpha={} weight_decay={} exclude_bn_from_weight_decay={}",
            cfg.epochs,
            cfg.epochs * steps,
            cfg.alpha,
            cfg.weight_decay,
            cfg.exclude_bn_from_weight_decay
        ),
    ]
}

/// Train on a split read from `data_root`.
pub fn fit<T: Element>(
    split: &SplitResult,
    data_root: &Path,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitReport<T>> {
    if split.labeled_train.is_empty() {
        return Err(Error::InvalidArgument(
            "labeled training set is empty".into(),
        ));
    }
    let labeled = load_samples(data_root, &split.labeled_train, true, 0)?;
    let unlabeled = load_samples(
        data_root,
        &split.unlabeled_train,
        false,
        split.labeled_train.len() as u64,
    )?;
    fit_samples(&labeled, &unlabeled, cfg, opts)
}

/// Train on samples already in memory.
pub fn fit_samples<T: Element>(
    labeled: &[Sample],
    unlabeled: &[Sample],
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitReport<T>> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument(
            "labeled training set is empty".into(),
        ));
    }
    if let Some(s) = labeled.iter().chain(unlabeled).find(|s| {
        s.image.width() != cfg.model.input_size || s.image.height() != cfg.model.input_size
    }) {
        return Err(Error::Config(format!(
            "sample {} is {}x{}, model expects {}x{}",
            s.id,
            s.image.width(),
            s.image.height(),
            cfg.model.input_size,
            cfg.model.input_size
        )));
    }
    let (n_l, n_u) = (labeled.len(), unlabeled.len());
    let per_batch = batch_composition(cfg, n_u);
    let steps = steps_per_epoch(cfg, n_l, n_u);
    let total = cfg.epochs * steps;

    let mut model = build_model::<T>(&cfg.model, cfg.seed)?;
    let mut opt = Sgd::new(&model, cfg);
    let mut lab = Cycler::new(n_l, cfg.seed, STREAM_LABELED);
    let mut unl = (n_u > 0).then(|| Cycler::new(n_u, cfg.seed, STREAM_UNLABELED));

    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(RUN_CONFIG_FILE);
            std::fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
            let p = dir.join(LOG_FILE);
            let mut w = BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?);
            for line in log_header(cfg, n_l, n_u, per_batch, steps) {
                writeln!(w, "{line}").map_err(|e| Error::io(&p, e))?;
            }
            Some((w, p))
        }
        None => None,
    };

    let mut log = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for _ in 0..steps {
            let mut rows: Vec<&Sample> = (0..per_batch.0).map(|_| &labeled[lab.next()]).collect();
            if let Some(u) = unl.as_mut() {
                rows.extend((0..per_batch.1).map(|_| &unlabeled[u.next()]));
            }
            let batch = make_batch::<T>(&rows, cfg, epoch)?;
            if step == 0 && opts.dump_views {
                if let Some(dir) = &opts.out_dir {
                    dump_views(&batch, &dir.join("views"))?;
                }
            }
            let lr = lr_at(step, total, cfg)?;
            let losses = train_step(&mut model, &mut opt, &batch, cfg.alpha, lr, step)?;
            let entry = StepLog {
                epoch,
                step,
                lr,
                losses,
            };
            if let Some((w, p)) = log_file.as_mut() {
                writeln!(w, "{}", entry.line()).map_err(|e| Error::io(&*p, e))?;
            }
            log.push(entry);
            step += 1;
        }
        if let Some((w, p)) = log_file.as_mut() {
            w.flush().map_err(|e| Error::io(&*p, e))?;
            let dir = opts.out_dir.as_ref().unwrap();
            save_checkpoint(&model, &dir.join(format!("epoch-{:03}.ckpt", epoch + 1)))?;
        }
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&model, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(FitReport { model, log })
}

fn dump_views<T: Element>(batch: &Batch<T>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (view, x) in [(1, &batch.x1), (2, &batch.x2)] {
        let [n, _, h, w] = x.shape();
        for i in 0..n {
            let data = x.sample(i).iter().map(|v| v.to_f64() as f32).collect();
            let img = Image::new(w, h, data)?;
            img.write_ppm(&dir.join(format!("sample{i:03}_view{view}.ppm")))?;
        }
    }
    Ok(())
}
