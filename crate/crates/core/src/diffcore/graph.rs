//! Tape-based reverse-mode differentiation.
//!
//! Every op appends one node to the graph in execution order. `backward`
//! replays nodes from the loss toward the leaves, strictly in reverse.

use crate::error::{Error, Result};

use super::element::Element;
use super::kernels::{self, BatchStats};
use super::tensor::{Shape, Tensor};

/// Rows with euclidean norm below this are scaled by `1/ROW_NORM_FLOOR`
/// instead of `1/norm`, so an all-zero row normalizes to zero.
pub const ROW_NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        stats: BatchStats<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    StopGradient(Var),
    Select {
        input: Var,
        indices: Vec<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    DenseSimilarity {
        h: Var,
        f: Var,
        reduction: Reduction,
    },
    Mse(Var, Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(*bias);
                v
            }
            Op::BatchNormTrain {
                input, gamma, beta, ..
            }
            | Op::BatchNormEval {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Relu(x) | Op::StopGradient(x) | Op::Scale(x, _) | Op::Sum(x) => vec![*x],
            Op::MaxPool { input, .. } | Op::Select { input, .. } => vec![*input],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::DenseSimilarity { h, f, .. } => vec![*h, *f],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNormTrain { .. } => "batchnorm_train",
            Op::BatchNormEval { .. } => "batchnorm_eval",
            Op::Relu(_) => "relu",
            Op::MaxPool { .. } => "maxpool2d",
            Op::StopGradient(_) => "stop_gradient",
            Op::Select { .. } => "select",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::DenseSimilarity { .. } => "dense_similarity",
            Op::Mse(..) => "mse",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch moments reported by a train-mode batch norm, for running-stat updates.
#[derive(Debug, Clone)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    // Values substituted for stop-gradient outputs, in creation order.
    frozen: Option<Vec<Tensor<T>>>,
    stop_count: usize,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            frozen: None,
            stop_count: 0,
        }
    }

    /// A graph whose k-th `stop_gradient` emits `frozen[k]` instead of its
    /// input's current value. Used by finite differences so that a
    /// perturbation cannot leak through a detached branch.
    pub fn with_frozen_stops(frozen: Vec<Tensor<T>>) -> Self {
        Self {
            nodes: Vec::new(),
            frozen: Some(frozen),
            stop_count: 0,
        }
    }

    /// Outputs of every `stop_gradient` node, in creation order.
    pub fn stop_gradient_values(&self) -> Vec<Tensor<T>> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGradient(_)))
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Nodes `v` was computed from.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    // ── ops ─────────────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Train-mode batch norm over (N, H, W) per channel.
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchMoments<T>)> {
        let (out, stats) = kernels::batchnorm_train_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            eps,
        )?;
        let moments = BatchMoments {
            mean: stats.mean.clone(),
            var: stats.var.clone(),
            count: stats.count,
        };
        let rg = self.any_grad(&[input, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                stats,
            },
            rg,
        );
        Ok((v, moments))
    }

    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::ONE / (v + eps).sqrt())
            .collect();
        let (out, normalized) = kernels::batchnorm_eval_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            &inv_std,
        )?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = kernels::relu_forward(self.value(input));
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2d_forward(self.value(input), k)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    /// Identity forward; nothing flows back into `input` through this node.
    pub fn stop_gradient(&mut self, input: Var) -> Var {
        let k = self.stop_count;
        self.stop_count += 1;
        let out = match self.frozen.as_ref().and_then(|f| f.get(k)) {
            Some(v) if v.shape() == self.shape(input) => v.clone(),
            _ => self.value(input).clone(),
        };
        self.push(out, Op::StopGradient(input), false)
    }

    /// Gather batch entries.
    pub fn select(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(input).select(indices)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            out,
            Op::Select {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Sum of all elements, as a single-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let total: T = self.value(input).data().iter().copied().sum();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let t = self.value(input);
        let out =
            Tensor::new(t.shape(), t.data().iter().map(|&v| v * f).collect()).expect("same shape");
        let rg = self.any_grad(&[input]);
        self.push(out, Op::Scale(input, f), rg)
    }

    /// Dense similarity between two (N, d, s, s) maps, one flattened s²×d
    /// matrix per batch entry. `Sum` adds the per-sample double sums;
    /// `Mean` averages over all N·s⁴ row pairs.
    pub fn dense_similarity(&mut self, h: Var, f: Var, reduction: Reduction) -> Result<Var> {
        let (th, tf) = (self.value(h), self.value(f));
        if th.shape() != tf.shape() {
            return Err(Error::shape(format!(
                "dense_similarity: {:?} vs {:?}",
                th.shape(),
                tf.shape()
            )));
        }
        let [n, d, hs, ws] = th.shape();
        let positions = hs * ws;
        let mut total = 0.0f64;
        for i in 0..n {
            let sh = normalized_row_sum(th.sample(i), d, positions);
            let sf = normalized_row_sum(tf.sample(i), d, positions);
            total += sh.iter().zip(&sf).map(|(a, b)| a * b).sum::<f64>();
        }
        let value = match reduction {
            Reduction::Sum => total,
            Reduction::Mean => total / (n * positions * positions).max(1) as f64,
        };
        let rg = self.any_grad(&[h, f]);
        Ok(self.push(
            Tensor::scalar(T::from_f64(value)),
            Op::DenseSimilarity { h, f, reduction },
            rg,
        ))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "mse: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        if ta.numel() == 0 {
            return Err(Error::shape("mse: empty input"));
        }
        let sum: T = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let out = Tensor::scalar(sum / T::from_f64(ta.numel() as f64));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mse(a, b), rg))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse replay from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let seed = self.value(loss);
        if seed.numel() != 1 {
            return Err(Error::shape(format!(
                "backward: loss must have one element, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        grads[loss.0] = Some(Tensor::full(seed.shape(), T::ONE));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            visited.push(Var(id));
            for (target, contrib) in self.input_grads(&node.op, &g)? {
                accumulate(&mut grads[target.0], contrib);
            }
            grads[id] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, op: &Op<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut res = Vec::new();
        match op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let want = [
                    self.wants(*input),
                    self.wants(*weight),
                    bias.is_some_and(|b| self.wants(b)),
                ];
                let cg = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    *stride,
                    *pad,
                    g,
                    want,
                )?;
                push_some(&mut res, *input, cg.input);
                push_some(&mut res, *weight, cg.weight);
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    res.push((*b, reshape_like(db, self.value(*b))));
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                stats,
            } => {
                let want = [self.wants(*input), self.wants(*gamma), self.wants(*beta)];
                let ag = kernels::batchnorm_train_backward(g, self.value(*gamma), stats, want);
                push_some(&mut res, *input, ag.input);
                if let Some(t) = ag.gamma {
                    res.push((*gamma, reshape_like(t, self.value(*gamma))));
                }
                if let Some(t) = ag.beta {
                    res.push((*beta, reshape_like(t, self.value(*beta))));
                }
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let want = [self.wants(*input), self.wants(*gamma), self.wants(*beta)];
                let ag = kernels::batchnorm_eval_backward(
                    g,
                    self.value(*gamma),
                    normalized,
                    inv_std,
                    want,
                );
                push_some(&mut res, *input, ag.input);
                if let Some(t) = ag.gamma {
                    res.push((*gamma, reshape_like(t, self.value(*gamma))));
                }
                if let Some(t) = ag.beta {
                    res.push((*beta, reshape_like(t, self.value(*beta))));
                }
            }
            Op::Relu(input) => {
                if self.wants(*input) {
                    res.push((*input, kernels::relu_backward(g, self.value(*input))));
                }
            }
            Op::MaxPool { input, argmax } => {
                if self.wants(*input) {
                    res.push((
                        *input,
                        kernels::maxpool2d_backward(g, self.shape(*input), argmax),
                    ));
                }
            }
            Op::Select { input, indices } => {
                if self.wants(*input) {
                    let src = self.value(*input);
                    let mut dx = Tensor::zeros(src.shape());
                    let per = src.numel() / src.batch().max(1);
                    for (row, &i) in indices.iter().enumerate() {
                        let dst = &mut dx.data_mut()[i * per..(i + 1) * per];
                        for (d, &v) in dst.iter_mut().zip(&g.data()[row * per..(row + 1) * per]) {
                            *d += v;
                        }
                    }
                    res.push((*input, dx));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    res.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    res.push((*b, g.clone()));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let data = g
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&u, &y)| u * y)
                        .collect();
                    res.push((*a, Tensor::new(g.shape(), data)?));
                }
                if self.wants(*b) {
                    let data = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&u, &x)| u * x)
                        .collect();
                    res.push((*b, Tensor::new(g.shape(), data)?));
                }
            }
            Op::Sum(input) => {
                if self.wants(*input) {
                    res.push((*input, Tensor::full(self.shape(*input), g.item())));
                }
            }
            Op::Scale(input, factor) => {
                if self.wants(*input) {
                    let data = g.data().iter().map(|&v| v * *factor).collect();
                    res.push((*input, Tensor::new(g.shape(), data)?));
                }
            }
            Op::DenseSimilarity { h, f, reduction } => {
                let upstream = g.item().to_f64();
                let [n, _, hs, ws] = self.shape(*h);
                let p = hs * ws;
                let scale = match reduction {
                    Reduction::Sum => upstream,
                    Reduction::Mean => upstream / (n * p * p).max(1) as f64,
                };
                if self.wants(*h) {
                    res.push((
                        *h,
                        dense_similarity_grad(self.value(*h), self.value(*f), scale),
                    ));
                }
                if self.wants(*f) {
                    res.push((
                        *f,
                        dense_similarity_grad(self.value(*f), self.value(*h), scale),
                    ));
                }
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = g.item() * T::from_f64(2.0 / ta.numel() as f64);
                if self.wants(*a) {
                    let data = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| k * (x - y))
                        .collect();
                    res.push((*a, Tensor::new(ta.shape(), data)?));
                }
                if self.wants(*b) {
                    let data = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| k * (y - x))
                        .collect();
                    res.push((*b, Tensor::new(ta.shape(), data)?));
                }
            }
        }
        Ok(res)
    }
}

fn push_some<T>(res: &mut Vec<(Var, Tensor<T>)>, v: Var, t: Option<Tensor<T>>) {
    if let Some(t) = t {
        res.push((v, t));
    }
}

fn reshape_like<T: Element>(t: Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    Tensor::new(like.shape(), t.into_data()).expect("element counts agree")
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, contrib: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += *c;
            }
        }
        None => *slot = Some(contrib),
    }
}

/// Norm and reciprocal scale for a row, with the zero-row floor applied.
#[inline]
pub(crate) fn row_scale(norm: f64) -> f64 {
    1.0 / norm.max(ROW_NORM_FLOOR)
}

// Row `i` of the flattened s²×d matrix is the channel vector at spatial
// position `i` (row-major over H, W).
fn row<T: Element>(
    sample: &[T],
    d: usize,
    positions: usize,
    i: usize,
) -> impl Iterator<Item = f64> + '_ {
    (0..d).map(move |c| sample[c * positions + i].to_f64())
}

/// Σᵢ normalize(rowᵢ) for one (d, s, s) sample, accumulated in f64.
pub(crate) fn normalized_row_sum<T: Element>(sample: &[T], d: usize, positions: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; d];
    for i in 0..positions {
        let norm = row(sample, d, positions, i)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let s = row_scale(norm);
        for (a, v) in acc.iter_mut().zip(row(sample, d, positions, i)) {
            *a += v * s;
        }
    }
    acc
}

// d/dx of scale·⟨Σᵢ x̂ᵢ, Σⱼ ŷⱼ⟩ for every row of x.
fn dense_similarity_grad<T: Element>(x: &Tensor<T>, other: &Tensor<T>, scale: f64) -> Tensor<T> {
    let [n, d, hs, ws] = x.shape();
    let p = hs * ws;
    let mut out = Tensor::zeros(x.shape());
    for s in 0..n {
        let u = normalized_row_sum(other.sample(s), d, p);
        let xs = x.sample(s);
        let base = s * d * p;
        for i in 0..p {
            let r: Vec<f64> = row(xs, d, p, i).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dst = out.data_mut();
            if norm > ROW_NORM_FLOOR {
                // (I − x̂x̂ᵀ) u / ‖x‖
                let inv = 1.0 / norm;
                let proj = r.iter().zip(&u).map(|(a, b)| a * inv * b).sum::<f64>();
                for c in 0..d {
                    dst[base + c * p + i] = T::from_f64(scale * inv * (u[c] - r[c] * inv * proj));
                }
            } else {
                let inv = 1.0 / ROW_NORM_FLOOR;
                for c in 0..d {
                    dst[base + c * p + i] = T::from_f64(scale * inv * u[c]);
                }
            }
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<Var>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when no gradient
    /// reached it (including every node that does not require grad).
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but yields zeros of the given shape when
    /// nothing reached `v`.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Op nodes in the order backward visited them.
    pub fn visit_order(&self) -> &[Var] {
        &self.visited
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_gradient_passes_values_and_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn([1, 2, 2, 2], |[_, c, h, w]| {
            (c + 2 * h + w) as f64 - 1.5
        }));
        let y = g.param(Tensor::full([1, 2, 2, 2], 0.3));
        let sx = g.stop_gradient(x);
        assert_eq!(g.value(sx), g.value(x));
        let prod = g.mul(sx, y).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get_or_zeros(x, [1, 2, 2, 2]).data(), &[0.0; 8]);
        assert_eq!(grads.get(y).unwrap(), g.value(x));
    }

    #[test]
    fn backward_visits_in_reverse_execution_order() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full([1, 1, 2, 2], 1.0));
        let a = g.relu(x);
        let b = g.scale(a, 2.0);
        let c = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let loss = g.mse(b, c).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.visit_order(), &[loss, b, a]);
        let gx = grads.get(x).unwrap();
        // d/dx mean((2x)^2) = 8x / 4
        assert!(gx.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn select_scatters_gradient_back() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn([3, 1, 1, 2], |[n, _, _, w]| {
            (n * 2 + w) as f64
        }));
        let s = g.select(x, &[2, 0]).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 5.0, 0.0, 1.0]);
        let z = g.constant(Tensor::zeros([2, 1, 1, 2]));
        let loss = g.mse(s, z).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.5, 0.0, 0.0, 2.0, 2.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros([1, 1, 2, 2]));
        assert!(g.backward(x).is_err());
    }
}
