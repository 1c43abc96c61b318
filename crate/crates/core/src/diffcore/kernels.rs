//! Forward and backward kernels on raw tensors. The graph in `graph.rs`
//! records which of these ran; nothing here knows about the tape.

use crate::error::{Error, Result};

use super::element::Element;
use super::tensor::Tensor;

// ── convolution ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new<T: Element>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [batch, cin, h, w] = input.shape();
        let [cout, wcin, kh, kw] = weight.shape();
        if kh != kw {
            return Err(Error::shape(format!("conv2d: non-square kernel {kh}x{kw}")));
        }
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: weight expects {wcin} input channels, input {:?} has {cin}",
                input.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] =
                            if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                                x[(c * g.h + iy as usize) * g.w + ix as usize]
                            } else {
                                T::ZERO
                            };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.cout {
            return Err(Error::shape(format!(
                "conv2d: bias has {} entries for {} output channels",
                b.numel(),
                g.cout
            )));
        }
    }
    let mut out = Tensor::zeros([g.batch, g.cout, g.ho, g.wo]);
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; rows * cols]
    };
    for n in 0..g.batch {
        let x = input.sample(n);
        let src: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        let per = g.cout * cols;
        let dst = &mut out.data_mut()[n * per..(n + 1) * per];
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        let beta = if bias.is_some() { T::ONE } else { T::ZERO };
        T::gemm(
            g.cout,
            rows,
            cols,
            T::ONE,
            weight.data(),
            false,
            src,
            false,
            beta,
            dst,
        );
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of [`conv2d_forward`]. Only the requested ones are computed.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
    want: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut dx = want[0].then(|| Tensor::zeros(input.shape()));
    let mut dw = want[1].then(|| Tensor::zeros(weight.shape()));
    let mut db = want[2].then(|| Tensor::zeros([g.cout, 1, 1, 1]));
    let mut col = vec![T::ZERO; rows * cols];
    for n in 0..g.batch {
        let dy = grad_out.sample(n);
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                input.sample(n)
            } else {
                im2col(input.sample(n), &g, &mut col);
                &col
            };
            // dW += dY (cout×cols) · colᵀ (cols×rows)
            T::gemm(
                g.cout,
                cols,
                rows,
                T::ONE,
                dy,
                false,
                src,
                true,
                T::ONE,
                dw.data_mut(),
            );
        }
        if let Some(db) = db.as_mut() {
            for (oc, chunk) in dy.chunks(cols).enumerate() {
                db.data_mut()[oc] += chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let per = g.cin * g.h * g.w;
            let dxs = &mut dx.data_mut()[n * per..(n + 1) * per];
            if g.is_pointwise() {
                // dX = Wᵀ (cin×cout) · dY (cout×cols), written straight into place.
                T::gemm(
                    rows,
                    g.cout,
                    cols,
                    T::ONE,
                    weight.data(),
                    true,
                    dy,
                    false,
                    T::ZERO,
                    dxs,
                );
            } else {
                T::gemm(
                    rows,
                    g.cout,
                    cols,
                    T::ONE,
                    weight.data(),
                    true,
                    dy,
                    false,
                    T::ZERO,
                    &mut col,
                );
                col2im_add(&col, &g, dxs);
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

// ── batch normalization ──────────────────────────────────────────────

/// Per-channel statistics computed by a train-mode forward.
pub struct BatchStats<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
    /// Element count per channel, N·H·W.
    pub count: usize,
}

fn channel_iter<T: Element>(t: &Tensor<T>) -> impl Iterator<Item = (usize, &[T])> + '_ {
    let [n, c, h, w] = t.shape();
    let hw = h * w;
    (0..n).flat_map(move |i| {
        (0..c).map(move |ch| (ch, &t.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw]))
    })
}

pub fn batchnorm_train_forward<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let [n, c, h, w] = input.shape();
    check_affine(c, gamma, beta)?;
    if n == 0 {
        return Err(Error::shape("batchnorm: train mode needs batch size >= 1"));
    }
    let count = n * h * w;
    let inv_count = T::from_f64(1.0 / count as f64);
    let mut mean = vec![T::ZERO; c];
    for (ch, plane) in channel_iter(input) {
        mean[ch] += plane.iter().copied().sum::<T>();
    }
    mean.iter_mut().for_each(|m| *m = *m * inv_count);
    let mut var = vec![T::ZERO; c];
    for (ch, plane) in channel_iter(input) {
        let m = mean[ch];
        var[ch] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
    }
    var.iter_mut().for_each(|v| *v = *v * inv_count);
    let eps = T::from_f64(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();

    let mut normalized = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let hw = h * w;
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let (m, s, gm, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for j in base..base + hw {
                let xhat = (input.data()[j] - m) * s;
                normalized.data_mut()[j] = xhat;
                out.data_mut()[j] = gm * xhat + bt;
            }
        }
    }
    Ok((
        out,
        BatchStats {
            normalized,
            inv_std,
            mean,
            var,
            count,
        },
    ))
}

pub struct AffineGrads<T> {
    pub input: Option<Tensor<T>>,
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
}

fn affine_param_grads<T: Element>(
    grad_out: &Tensor<T>,
    normalized: &Tensor<T>,
    c: usize,
) -> (Vec<T>, Vec<T>) {
    let mut sum_dy = vec![T::ZERO; c];
    let mut sum_dy_xhat = vec![T::ZERO; c];
    for ((ch, dy), (_, xh)) in channel_iter(grad_out).zip(channel_iter(normalized)) {
        sum_dy[ch] += dy.iter().copied().sum::<T>();
        sum_dy_xhat[ch] += dy.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
    }
    (sum_dy, sum_dy_xhat)
}

pub fn batchnorm_train_backward<T: Element>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BatchStats<T>,
    want: [bool; 3],
) -> AffineGrads<T> {
    let [n, c, h, w] = grad_out.shape();
    let (sum_dy, sum_dy_xhat) = affine_param_grads(grad_out, &stats.normalized, c);
    let input = want[0].then(|| {
        let mut dx = Tensor::zeros(grad_out.shape());
        let m = T::from_f64(stats.count as f64);
        let inv_m = T::from_f64(1.0 / stats.count as f64);
        let hw = h * w;
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let scale = gamma.data()[ch] * stats.inv_std[ch] * inv_m;
                for j in base..base + hw {
                    let dy = grad_out.data()[j];
                    let xh = stats.normalized.data()[j];
                    dx.data_mut()[j] = scale * (m * dy - sum_dy[ch] - xh * sum_dy_xhat[ch]);
                }
            }
        }
        dx
    });
    AffineGrads {
        input,
        gamma: want[1].then(|| per_channel(sum_dy_xhat)),
        beta: want[2].then(|| per_channel(sum_dy)),
    }
}

/// Eval-mode normalization with frozen statistics. Returns the output and
/// the normalized input (needed for the gamma gradient).
pub fn batchnorm_eval_forward<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = input.shape();
    check_affine(c, gamma, beta)?;
    if mean.len() != c || inv_std.len() != c {
        return Err(Error::shape(format!(
            "batchnorm: running statistics have {} channels, input has {c}",
            mean.len()
        )));
    }
    let hw = h * w;
    let mut normalized = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                let xhat = (input.data()[j] - mean[ch]) * inv_std[ch];
                normalized.data_mut()[j] = xhat;
                out.data_mut()[j] = gamma.data()[ch] * xhat + beta.data()[ch];
            }
        }
    }
    Ok((out, normalized))
}

pub fn batchnorm_eval_backward<T: Element>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    normalized: &Tensor<T>,
    inv_std: &[T],
    want: [bool; 3],
) -> AffineGrads<T> {
    let [n, c, h, w] = grad_out.shape();
    let (sum_dy, sum_dy_xhat) = affine_param_grads(grad_out, normalized, c);
    let input = want[0].then(|| {
        let hw = h * w;
        let mut dx = Tensor::zeros(grad_out.shape());
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let scale = gamma.data()[ch] * inv_std[ch];
                for j in base..base + hw {
                    dx.data_mut()[j] = scale * grad_out.data()[j];
                }
            }
        }
        dx
    });
    AffineGrads {
        input,
        gamma: want[1].then(|| per_channel(sum_dy_xhat)),
        beta: want[2].then(|| per_channel(sum_dy)),
    }
}

fn check_affine<T: Element>(c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape(format!(
            "batchnorm: affine parameters have {}/{} entries for {c} channels",
            gamma.numel(),
            beta.numel()
        )));
    }
    Ok(())
}

fn per_channel<T: Element>(v: Vec<T>) -> Tensor<T> {
    let c = v.len();
    Tensor::new([c, 1, 1, 1], v).expect("length matches")
}

// ── pooling / activation ─────────────────────────────────────────────

/// Non-overlapping max pooling (window = stride = `k`). Returns the output
/// and, per output element, the flat input index that won. Ties go to the
/// first element in row-major window order.
pub fn maxpool2d_forward<T: Element>(
    input: &Tensor<T>,
    k: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = input.shape();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape(format!(
            "maxpool2d: spatial extents {h}x{w} not divisible by stride {k}"
        )));
    }
    let (ho, wo) = (h / k, w / k);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut argmax = Vec::with_capacity(out.numel());
    let mut o = 0;
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = input.index(i, ch, oy * k, ox * k);
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = input.index(i, ch, oy * k + dy, ox * k + dx);
                            if input.data()[idx] > input.data()[best] {
                                best = idx;
                            }
                        }
                    }
                    out.data_mut()[o] = input.data()[best];
                    argmax.push(best);
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2d_backward<T: Element>(
    grad_out: &Tensor<T>,
    input_shape: [usize; 4],
    argmax: &[usize],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&src, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[src] += g;
    }
    dx
}

pub fn relu_forward<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > T::ZERO { v } else { T::ZERO })
        .collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

pub fn relu_backward<T: Element>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Tensor<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::new(input.shape(), data).expect("same shape")
}
