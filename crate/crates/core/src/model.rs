//! The Siamese network: dense encoder f (backbone + projector), dense
//! predictor h and dense classifier c, with one parameter set shared by
//! both views.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{BatchMoments, Element, Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Side of the square RGB input, in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    /// Output width of each backbone block. The first block is followed by
    /// a 2×2 max-pool, every later block opens with a stride-2 convolution.
    pub backbone_channels: Vec<usize>,
    /// Spatial side `s` of F, H and the classifier maps.
    pub feature_side: usize,
    /// Embedding width `d` of projector and predictor.
    pub embed_dim: usize,
    pub bn_eps: f64,
    /// Running statistics update rate: new = (1 − m)·old + m·batch.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            in_channels: 3,
            backbone_channels: vec![32, 64, 64],
            feature_side: 8,
            embed_dim: 64,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let blocks = self.backbone_channels.len();
        if blocks == 0 {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.backbone_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let factor = 1usize << blocks;
        if self.input_size == 0
            || self.input_size % factor != 0
            || self.input_size / factor != self.feature_side
        {
            return Err(Error::Config(format!(
                "backbone of {blocks} blocks downsamples by {factor}: input {} cannot reach feature side {}",
                self.input_size, self.feature_side
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || self.bn_eps <= 0.0 {
            return Err(Error::Config(
                "bn_momentum must be in (0,1] and bn_eps > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub name: String,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// False until the first train-mode update or an explicit initialization.
    pub initialized: bool,
}

impl<T: Element> BnState<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            initialized: false,
        }
    }

    /// Mark the current (mean 0, variance 1) statistics as usable in eval mode.
    pub fn initialize(&mut self) {
        self.initialized = true;
    }

    fn update(&mut self, m: &BatchMoments<T>, momentum: f64) {
        let keep = T::from_f64(1.0 - momentum);
        let take = T::from_f64(momentum);
        let unbias = if m.count > 1 {
            T::from_f64(m.count as f64 / (m.count - 1) as f64)
        } else {
            T::ONE
        };
        for (r, &b) in self.running_mean.iter_mut().zip(&m.mean) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&m.var) {
            *r = keep * *r + take * (b * unbias);
        }
        self.initialized = true;
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Bn {
    gamma: usize,
    beta: usize,
    state: usize,
}

/// conv → optional BN → optional ReLU
#[derive(Debug, Clone)]
struct Unit {
    conv: Conv,
    bn: Option<Bn>,
    relu: bool,
}

#[derive(Debug, Clone)]
enum Stage {
    Unit(Unit),
    MaxPool,
}

/// The eight maps of one Siamese pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewOutputs<V> {
    pub f1: V,
    pub f2: V,
    pub h1: V,
    pub h2: V,
    pub c_f1: V,
    pub c_f2: V,
    pub c_h1: V,
    pub c_h2: V,
}

impl<V> ViewOutputs<V> {
    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> ViewOutputs<U> {
        ViewOutputs {
            f1: f(&self.f1),
            f2: f(&self.f2),
            h1: f(&self.h1),
            h2: f(&self.h2),
            c_f1: f(&self.c_f1),
            c_f2: f(&self.c_f2),
            c_h1: f(&self.c_h1),
            c_h2: f(&self.c_h2),
        }
    }

    /// Exchange the roles of view 1 and view 2.
    pub fn swapped(self) -> Self {
        ViewOutputs {
            f1: self.f2,
            f2: self.f1,
            h1: self.h2,
            h2: self.h1,
            c_f1: self.c_f2,
            c_f2: self.c_f1,
            c_h1: self.c_h2,
            c_h2: self.c_h1,
        }
    }
}

/// Graph leaves holding the model parameters for one step.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Use leaves created elsewhere (e.g. by the gradient checker), in
    /// parameter declaration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Parameter gradients in declaration order (zeros where none arrived).
    pub fn grads<T: Element>(&self, grads: &Gradients<T>, model: &Model<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(&model.params)
            .map(|(&v, p)| grads.get_or_zeros(v, p.value.shape()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    bn: Vec<BnState<T>>,
    backbone: Vec<Stage>,
    projector: Vec<Unit>,
    predictor: Vec<Unit>,
    classifier: Unit,
}

struct Builder<T> {
    rng: ChaCha8Rng,
    params: Vec<Param<T>>,
    bn: Vec<BnState<T>>,
}

impl<T: Element> Builder<T> {
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Conv {
        let fan_in = (cin * k * k) as f64;
        // Uniform with variance 2/fan_in.
        let bound = (6.0 / fan_in).sqrt();
        let weight = Tensor::from_fn([cout, cin, k, k], |_| {
            T::from_f64(self.rng.gen_range(-bound..bound))
        });
        self.params.push(Param {
            name: format!("{name}.weight"),
            kind: ParamKind::ConvWeight,
            value: weight,
        });
        let weight = self.params.len() - 1;
        let bias = bias.then(|| {
            self.params.push(Param {
                name: format!("{name}.bias"),
                kind: ParamKind::ConvBias,
                value: Tensor::zeros([cout, 1, 1, 1]),
            });
            self.params.len() - 1
        });
        Conv {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn {
        self.params.push(Param {
            name: format!("{name}.gamma"),
            kind: ParamKind::BnGamma,
            value: Tensor::full([c, 1, 1, 1], T::ONE),
        });
        self.params.push(Param {
            name: format!("{name}.beta"),
            kind: ParamKind::BnBeta,
            value: Tensor::zeros([c, 1, 1, 1]),
        });
        self.bn.push(BnState::new(name, c));
        Bn {
            gamma: self.params.len() - 2,
            beta: self.params.len() - 1,
            state: self.bn.len() - 1,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn unit(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bn: bool,
        relu: bool,
    ) -> Unit {
        // A bias in front of batch norm is cancelled by the mean subtraction.
        let conv = self.conv(&format!("{name}.conv"), cin, cout, k, stride, !bn);
        let bn = bn.then(|| self.bn(&format!("{name}.bn"), cout));
        Unit { conv, bn, relu }
    }
}

/// Build a network with parameters drawn deterministically from `seed`.
pub fn build_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
        bn: Vec::new(),
    };
    let mut backbone = Vec::new();
    let mut cin = config.in_channels;
    for (i, &width) in config.backbone_channels.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        backbone.push(Stage::Unit(b.unit(
            &format!("backbone.{i}.0"),
            cin,
            width,
            3,
            stride,
            true,
            true,
        )));
        backbone.push(Stage::Unit(b.unit(
            &format!("backbone.{i}.1"),
            width,
            width,
            3,
            1,
            true,
            true,
        )));
        if i == 0 {
            backbone.push(Stage::MaxPool);
        }
        cin = width;
    }
    let d = config.embed_dim;
    let projector = (0..3)
        .map(|i| {
            let input = if i == 0 { cin } else { d };
            b.unit(&format!("projector.{i}"), input, d, 1, 1, true, i < 2)
        })
        .collect();
    let predictor = vec![
        b.unit("predictor.0", d, d, 1, 1, true, true),
        b.unit("predictor.1", d, d, 1, 1, false, false),
    ];
    let classifier = b.unit("classifier", d, 1, 1, 1, false, false);
    Ok(Model {
        config: config.clone(),
        params: b.params,
        bn: b.bn,
        backbone,
        projector,
        predictor,
        classifier,
    })
}

type Updates<T> = Vec<(usize, BatchMoments<T>)>;

impl<T: Element> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState<T>] {
        &mut self.bn
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Put every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf(p.value.clone(), trainable))
                .collect(),
        }
    }

    /// Mark every BN layer's current running statistics as usable.
    pub fn initialize_running_stats(&mut self) {
        self.bn.iter_mut().for_each(BnState::initialize);
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
            bn: self
                .bn
                .iter()
                .map(|s| BnState {
                    name: s.name.clone(),
                    running_mean: s
                        .running_mean
                        .iter()
                        .map(|v| U::from_f64(v.to_f64()))
                        .collect(),
                    running_var: s
                        .running_var
                        .iter()
                        .map(|v| U::from_f64(v.to_f64()))
                        .collect(),
                    initialized: s.initialized,
                })
                .collect(),
            backbone: self.backbone.clone(),
            projector: self.projector.clone(),
            predictor: self.predictor.clone(),
            classifier: self.classifier.clone(),
        }
    }

    fn check_bound(&self, b: &Bound) -> Result<()> {
        if b.vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "bound {} parameter leaves, model has {}",
                b.vars.len(),
                self.params.len()
            )));
        }
        Ok(())
    }

    fn run_unit(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        u: &Unit,
        mode: Mode,
        updates: &mut Updates<T>,
    ) -> Result<Var> {
        let mut y = g.conv2d(
            x,
            b.vars[u.conv.weight],
            u.conv.bias.map(|i| b.vars[i]),
            u.conv.stride,
            u.conv.pad,
        )?;
        if let Some(bn) = &u.bn {
            let (gamma, beta) = (b.vars[bn.gamma], b.vars[bn.beta]);
            y = match mode {
                Mode::Train => {
                    let (out, moments) = g.batchnorm_train(y, gamma, beta, self.config.bn_eps)?;
                    updates.push((bn.state, moments));
                    out
                }
                Mode::Eval => {
                    let st = &self.bn[bn.state];
                    if !st.initialized {
                        return Err(Error::UninitializedRunningStats(st.name.clone()));
                    }
                    g.batchnorm_eval(
                        y,
                        gamma,
                        beta,
                        &st.running_mean,
                        &st.running_var,
                        self.config.bn_eps,
                    )?
                }
            };
        }
        if u.relu {
            y = g.relu(y);
        }
        Ok(y)
    }

    fn encode_inner(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        mode: Mode,
        up: &mut Updates<T>,
    ) -> Result<Var> {
        let [_, c, h, w] = g.shape(x);
        let side = self.config.input_size;
        if c != self.config.in_channels || h != side || w != side {
            return Err(Error::shape(format!(
                "model expects (N,{},{side},{side}) input, got {:?}",
                self.config.in_channels,
                g.shape(x)
            )));
        }
        let mut y = x;
        for stage in &self.backbone {
            y = match stage {
                Stage::Unit(u) => self.run_unit(g, b, y, u, mode, up)?,
                Stage::MaxPool => g.maxpool2d(y, 2)?,
            };
        }
        for u in &self.projector {
            y = self.run_unit(g, b, y, u, mode, up)?;
        }
        Ok(y)
    }

    fn predict_inner(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        f: Var,
        mode: Mode,
        up: &mut Updates<T>,
    ) -> Result<Var> {
        let mut y = f;
        for u in &self.predictor {
            y = self.run_unit(g, b, y, u, mode, up)?;
        }
        Ok(y)
    }

    fn apply(&mut self, updates: Updates<T>) {
        let m = self.config.bn_momentum;
        for (idx, moments) in updates {
            self.bn[idx].update(&moments, m);
        }
    }

    /// f = projector ∘ backbone. Train mode updates running statistics.
    pub fn encode(&mut self, g: &mut Graph<T>, b: &Bound, x: Var, mode: Mode) -> Result<Var> {
        self.check_bound(b)?;
        let mut up = Vec::new();
        let y = self.encode_inner(g, b, x, mode, &mut up)?;
        self.apply(up);
        Ok(y)
    }

    /// Eval-mode encoder on a shared reference.
    pub fn encode_eval(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var> {
        self.check_bound(b)?;
        self.encode_inner(g, b, x, Mode::Eval, &mut Vec::new())
    }

    /// h, the dense predictor.
    pub fn predict(&mut self, g: &mut Graph<T>, b: &Bound, f: Var, mode: Mode) -> Result<Var> {
        self.check_bound(b)?;
        let mut up = Vec::new();
        let y = self.predict_inner(g, b, f, mode, &mut up)?;
        self.apply(up);
        Ok(y)
    }

    /// c, the dense classifier (a single 1×1 convolution to one channel).
    pub fn classify(&self, g: &mut Graph<T>, b: &Bound, z: Var) -> Result<Var> {
        self.check_bound(b)?;
        self.run_unit(g, b, z, &self.classifier, Mode::Eval, &mut Vec::new())
    }

    /// One symmetric pass over both views with shared parameters.
    pub fn forward_views(
        &mut self,
        g: &mut Graph<T>,
        b: &Bound,
        x1: Var,
        x2: Var,
        mode: Mode,
    ) -> Result<ViewOutputs<Var>> {
        if g.shape(x1) != g.shape(x2) {
            return Err(Error::shape(format!(
                "views differ in shape: {:?} vs {:?}",
                g.shape(x1),
                g.shape(x2)
            )));
        }
        let f1 = self.encode(g, b, x1, mode)?;
        let f2 = self.encode(g, b, x2, mode)?;
        let h1 = self.predict(g, b, f1, mode)?;
        let h2 = self.predict(g, b, f2, mode)?;
        let c_f1 = self.classify(g, b, f1)?;
        let c_f2 = self.classify(g, b, f2)?;
        let c_h1 = self.classify(g, b, h1)?;
        let c_h2 = self.classify(g, b, h2)?;
        Ok(ViewOutputs {
            f1,
            f2,
            h1,
            h2,
            c_f1,
            c_f2,
            c_h1,
            c_h2,
        })
    }

    /// [`forward_views`](Self::forward_views) on plain tensors, returning values.
    pub fn forward_views_values(
        &mut self,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
        mode: Mode,
    ) -> Result<ViewOutputs<Tensor<T>>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let v1 = g.constant(x1.clone());
        let v2 = g.constant(x2.clone());
        let out = self.forward_views(&mut g, &b, v1, v2, mode)?;
        Ok(out.map(|&v| g.value(v).clone()))
    }

    /// Eval-mode C_F maps (the f → c branch), shape (N, 1, s, s).
    pub fn score_maps(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = self.encode_eval(&mut g, &b, xv)?;
        let c = self.classify(&mut g, &b, f)?;
        Ok(g.value(c).clone())
    }
}
