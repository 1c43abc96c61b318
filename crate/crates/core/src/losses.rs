//! EPCR objectives.
//!
//! Two layers live here: value-level functions over plain matrices and
//! tensors (used by checks and tests), and graph builders that record the
//! same losses on a [`Graph`] for training.

use crate::diffcore::{normalized_row_sum, row_scale, Element, Graph, Reduction, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ViewOutputs;

/// Default weight of the prediction-consistency term.
pub const DEFAULT_ALPHA: f64 = 0.1;

/// Norm below which a center vector is considered degenerate.
pub const CENTER_NORM_FLOOR: f64 = 1e-12;

/// An s²×d matrix, one row per spatial position.
#[derive(Debug, Clone, PartialEq)]
pub struct FlattenedEmbedding {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FlattenedEmbedding {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::shape(format!(
                "{} values cannot form a {rows}×{dim} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    /// Flatten batch entry `n` of an (N, d, s, s) map: row `y·s + x` holds
    /// the d channel values at spatial position (y, x).
    pub fn from_map<T: Element>(map: &Tensor<T>, n: usize) -> Self {
        let [_, d, h, w] = map.shape();
        let p = h * w;
        let sample = map.sample(n);
        let mut data = Vec::with_capacity(p * d);
        for i in 0..p {
            data.extend((0..d).map(|c| sample[c * p + i].to_f64()));
        }
        Self {
            rows: p,
            dim: d,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Σᵢ rowᵢ/‖rowᵢ‖ (zero rows contribute nothing).
    pub fn normalized_sum(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for i in 0..self.rows {
            let r = self.row(i);
            let s = row_scale(r.iter().map(|v| v * v).sum::<f64>().sqrt());
            for (a, v) in acc.iter_mut().zip(r) {
                *a += v * s;
            }
        }
        acc
    }

    /// Center of the normalized rows, H̄ = (1/s²) Σᵢ Ĥⁱ.
    pub fn center(&self) -> Vec<f64> {
        let n = self.rows.max(1) as f64;
        self.normalized_sum().into_iter().map(|v| v / n).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_same(h: &FlattenedEmbedding, f: &FlattenedEmbedding) -> Result<()> {
    if h.rows != f.rows || h.dim != f.dim {
        return Err(Error::shape(format!(
            "dense similarity needs equal shapes, got {}×{} and {}×{}",
            h.rows, h.dim, f.rows, f.dim
        )));
    }
    Ok(())
}

/// Σᵢ Σⱼ ⟨Ĥⁱ, F̂ʲ⟩, evaluated as ⟨Σᵢ Ĥⁱ, Σⱼ F̂ʲ⟩. `Mean` divides by s⁴.
pub fn dense_similarity(
    h: &FlattenedEmbedding,
    f: &FlattenedEmbedding,
    reduction: Reduction,
) -> Result<f64> {
    check_same(h, f)?;
    let total = dot(&h.normalized_sum(), &f.normalized_sum());
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / (h.rows * h.rows).max(1) as f64,
    })
}

/// Both sides of the dense-similarity decomposition
/// DS(H,F) = √(DS(H,H)·DS(F,F)) · cos⟨H̄,F̄⟩.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaTerms {
    pub lhs: f64,
    pub rhs: f64,
    pub self_h: f64,
    pub self_f: f64,
    pub cosine: f64,
}

impl LemmaTerms {
    /// |lhs − rhs| / max(1, |lhs|)
    pub fn deviation(&self) -> f64 {
        (self.lhs - self.rhs).abs() / self.lhs.abs().max(1.0)
    }
}

pub fn lemma_terms(
    h: &FlattenedEmbedding,
    f: &FlattenedEmbedding,
    reduction: Reduction,
) -> Result<LemmaTerms> {
    check_same(h, f)?;
    let (ch, cf) = (h.center(), f.center());
    let (nh, nf) = (dot(&ch, &ch).sqrt(), dot(&cf, &cf).sqrt());
    if nh < CENTER_NORM_FLOOR {
        return Err(Error::DegenerateCenter("H center"));
    }
    if nf < CENTER_NORM_FLOOR {
        return Err(Error::DegenerateCenter("F center"));
    }
    let cosine = dot(&ch, &cf) / (nh * nf);
    let lhs = dense_similarity(h, f, reduction)?;
    let self_h = dense_similarity(h, h, reduction)?;
    let self_f = dense_similarity(f, f, reduction)?;
    Ok(LemmaTerms {
        lhs,
        rhs: (self_h * self_f).sqrt() * cosine,
        self_h,
        self_f,
        cosine,
    })
}

fn batch_dense_similarity_mean<T: Element>(h: &Tensor<T>, f: &Tensor<T>) -> Result<f64> {
    if h.shape() != f.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", h.shape(), f.shape())));
    }
    let [n, d, hs, ws] = h.shape();
    let p = hs * ws;
    let total: f64 = (0..n)
        .map(|i| {
            dot(
                &normalized_row_sum(h.sample(i), d, p),
                &normalized_row_sum(f.sample(i), d, p),
            )
        })
        .sum();
    Ok(total / (n * p * p).max(1) as f64)
}

/// −½(DS(H1, F2) + DS(H2, F1)) with mean reduction over batch and row pairs.
pub fn loss_embedd<T: Element>(
    h1: &Tensor<T>,
    f2: &Tensor<T>,
    h2: &Tensor<T>,
    f1: &Tensor<T>,
) -> Result<f64> {
    Ok(-0.5 * (batch_dense_similarity_mean(h1, f2)? + batch_dense_similarity_mean(h2, f1)?))
}

/// Mean of squared differences over all N·s² elements.
pub fn mse_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "mse: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.numel() == 0 {
        return Err(Error::shape("mse: empty input"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).powi(2))
        .sum();
    Ok(sum / a.numel() as f64)
}

/// ½·MSE(C_H1, C_F2) + ½·MSE(C_H2, C_F1)
pub fn loss_pred<T: Element>(
    c_h1: &Tensor<T>,
    c_f2: &Tensor<T>,
    c_h2: &Tensor<T>,
    c_f1: &Tensor<T>,
) -> Result<f64> {
    for t in [c_h1, c_f2, c_h2, c_f1] {
        if t.channels() != 1 {
            return Err(Error::shape(format!(
                "prediction maps need one channel, got {:?}",
                t.shape()
            )));
        }
    }
    Ok(0.5 * mse_map(c_h1, c_f2)? + 0.5 * mse_map(c_h2, c_f1)?)
}

/// Constant s×s map of the binary label: 1 for spoof, 0 for live.
pub fn expand_label<T: Element>(y: u8, side: usize) -> Result<Tensor<T>> {
    if y > 1 {
        return Err(Error::InvalidArgument(format!(
            "label must be 0 or 1, got {y}"
        )));
    }
    Ok(Tensor::full([1, 1, side, side], T::from_f64(y as f64)))
}

fn label_maps<T: Element>(labels: &[u8], side: usize) -> Result<Tensor<T>> {
    let maps = labels
        .iter()
        .map(|&y| expand_label::<T>(y, side))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&maps)
}

/// ½·MSE(C_F1, Y) + ½·MSE(C_F2, Y) over batch rows that all carry labels.
pub fn loss_supervised<T: Element>(
    c_f1: &Tensor<T>,
    c_f2: &Tensor<T>,
    labels: &[Option<u8>],
) -> Result<f64> {
    let labels: Vec<u8> = labels
        .iter()
        .enumerate()
        .map(|(i, y)| {
            y.ok_or_else(|| {
                Error::InvalidArgument(format!("row {i} is unlabeled; select labeled rows first"))
            })
        })
        .collect::<Result<_>>()?;
    if labels.len() != c_f1.batch() {
        return Err(Error::shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            c_f1.batch()
        )));
    }
    let y = label_maps::<T>(&labels, c_f1.shape()[2])?;
    Ok(0.5 * mse_map(c_f1, &y)? + 0.5 * mse_map(c_f2, &y)?)
}

/// Scalar loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub l_supervised: f64,
    pub l_embedd: f64,
    pub l_pred: f64,
    pub l_overall: f64,
    pub alpha: f64,
}

/// Value-level overall loss; supervised term uses only labeled rows.
pub fn loss_overall<T: Element>(
    out: &ViewOutputs<Tensor<T>>,
    labels: &[Option<u8>],
    alpha: f64,
) -> Result<LossBundle> {
    if labels.is_empty() || out.f1.batch() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let l_embedd = loss_embedd(&out.h1, &out.f2, &out.h2, &out.f1)?;
    let l_pred = loss_pred(&out.c_h1, &out.c_f2, &out.c_h2, &out.c_f1)?;
    let idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, y)| y.map(|_| i))
        .collect();
    let l_supervised = if idx.is_empty() {
        0.0
    } else {
        let sel: Vec<Option<u8>> = idx.iter().map(|&i| labels[i]).collect();
        loss_supervised(&out.c_f1.select(&idx)?, &out.c_f2.select(&idx)?, &sel)?
    };
    Ok(LossBundle {
        l_supervised,
        l_embedd,
        l_pred,
        l_overall: l_supervised + l_embedd + alpha * l_pred,
        alpha,
    })
}

/// Spatial sizes s² and embedding widths d covered by [`lemma_sweep`].
pub const LEMMA_ROWS: [usize; 4] = [1, 4, 16, 64];
pub const LEMMA_DIMS: [usize; 3] = [2, 8, 64];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaSweep {
    pub trials: usize,
    pub max_deviation: f64,
    /// (s², d) of the trial with the largest deviation.
    pub worst_shape: (usize, usize),
    /// Extremes of the mean-reduced DS(H, F) over all trials.
    pub ds_mean_range: (f64, f64),
}

/// Random (H, F) pairs with entries in [−1, 1), cycling through every
/// (s², d) combination, checking the decomposition under sum reduction.
pub fn lemma_sweep(trials: usize, seed: u64) -> Result<LemmaSweep> {
    use rand::Rng;
    let shapes: Vec<(usize, usize)> = LEMMA_ROWS
        .iter()
        .flat_map(|&r| LEMMA_DIMS.iter().map(move |&d| (r, d)))
        .collect();
    let mut out = LemmaSweep {
        trials,
        max_deviation: 0.0,
        worst_shape: shapes[0],
        ds_mean_range: (f64::INFINITY, f64::NEG_INFINITY),
    };
    for t in 0..trials {
        let (rows, dim) = shapes[t % shapes.len()];
        let mut rng = crate::rng::stream(seed, &[t as u64]);
        let mut draw = || {
            FlattenedEmbedding::new(
                rows,
                dim,
                (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
        };
        let (h, f) = (draw()?, draw()?);
        let terms = lemma_terms(&h, &f, Reduction::Sum)?;
        let dev = terms.deviation();
        if dev > out.max_deviation || t == 0 {
            out.max_deviation = out.max_deviation.max(dev);
            out.worst_shape = (rows, dim);
        }
        let mean = dense_similarity(&h, &f, Reduction::Mean)?;
        out.ds_mean_range = (out.ds_mean_range.0.min(mean), out.ds_mean_range.1.max(mean));
    }
    Ok(out)
}

// ── graph builders ───────────────────────────────────────────────────

/// Loss nodes recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub supervised: Option<Var>,
    pub embedd: Var,
    pub pred: Var,
    pub overall: Var,
}

/// −½(DS(H1, sg(F2)) + DS(H2, sg(F1))); gradient reaches only H1 and H2.
pub fn embedd_loss<T: Element>(
    g: &mut Graph<T>,
    h1: Var,
    f2: Var,
    h2: Var,
    f1: Var,
) -> Result<Var> {
    let t2 = g.stop_gradient(f2);
    let t1 = g.stop_gradient(f1);
    let a = g.dense_similarity(h1, t2, Reduction::Mean)?;
    let b = g.dense_similarity(h2, t1, Reduction::Mean)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, -0.5))
}

/// ½·MSE(C_H1, C_F2) + ½·MSE(C_H2, C_F1); no stop-gradient on either side.
pub fn pred_loss<T: Element>(
    g: &mut Graph<T>,
    c_h1: Var,
    c_f2: Var,
    c_h2: Var,
    c_f1: Var,
) -> Result<Var> {
    let a = g.mse(c_h1, c_f2)?;
    let b = g.mse(c_h2, c_f1)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

/// Supervised term over the labeled rows, or `None` when no row is labeled.
pub fn supervised_loss<T: Element>(
    g: &mut Graph<T>,
    c_f1: Var,
    c_f2: Var,
    labels: &[Option<u8>],
) -> Result<Option<Var>> {
    let idx: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, y)| y.map(|_| i))
        .collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let ys: Vec<u8> = idx.iter().filter_map(|&i| labels[i]).collect();
    let side = g.shape(c_f1)[2];
    let y = g.constant(label_maps(&ys, side)?);
    let s1 = g.select(c_f1, &idx)?;
    let s2 = g.select(c_f2, &idx)?;
    let a = g.mse(s1, y)?;
    let b = g.mse(s2, y)?;
    let s = g.add(a, b)?;
    Ok(Some(g.scale(s, 0.5)))
}

/// L_supervised + L_embedd + α·L_pred, recorded for a single backward pass.
pub fn overall_loss<T: Element>(
    g: &mut Graph<T>,
    out: &ViewOutputs<Var>,
    labels: &[Option<u8>],
    alpha: f64,
) -> Result<(LossVars, LossBundle)> {
    let batch = g.shape(out.f1)[0];
    if batch == 0 || labels.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if labels.len() != batch {
        return Err(Error::shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let supervised = supervised_loss(g, out.c_f1, out.c_f2, labels)?;
    let embedd = embedd_loss(g, out.h1, out.f2, out.h2, out.f1)?;
    let pred = pred_loss(g, out.c_h1, out.c_f2, out.c_h2, out.c_f1)?;
    let weighted = g.scale(pred, alpha);
    let mut overall = g.add(embedd, weighted)?;
    if let Some(s) = supervised {
        overall = g.add(s, overall)?;
    }
    let val = |v: Var| g.value(v).item().to_f64();
    let bundle = LossBundle {
        l_supervised: supervised.map(val).unwrap_or(0.0),
        l_embedd: val(embedd),
        l_pred: val(pred),
        l_overall: val(overall),
        alpha,
    };
    Ok((
        LossVars {
            supervised,
            embedd,
            pred,
            overall,
        },
        bundle,
    ))
}
