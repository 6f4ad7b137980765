//! Convolutional classifiers with batch-norm running statistics and per-layer
//! feature taps.
//!
//! A [`Model`] is a flat list of [`Layer`]s. Residual connections are encoded
//! with the [`Layer::SkipSave`] / [`Layer::SkipAdd`] marker pair, which keeps
//! every layer addressable by a single index (needed for pruning surgery).

mod arch;
pub mod checkpoint;

use rand::Rng;

pub use arch::{build_model, Arch, ArchSpec};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm normalizes with batch statistics; running stats can be updated.
    Train,
    /// Batch-norm normalizes with running statistics.
    Eval,
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize, bias: bool, rng: &mut R) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        Self {
            weight: Tensor::randn(&[c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt(), rng).with_requires_grad(true),
            bias: bias.then(|| Tensor::zeros(&[c_out]).with_requires_grad(true)),
            stride,
            pad,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    /// Running average of the unbiased batch variance.
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    /// Frozen layers always normalize with running stats and never update them.
    pub frozen: bool,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()).with_requires_grad(true),
            beta: Tensor::zeros(&[channels]).with_requires_grad(true),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
            frozen: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Exponential moving average update from one batch.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let mom = T::lit(self.momentum);
        let keep = T::one() - mom;
        let unbias = if stats.count > 1 {
            T::lit(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + mom * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + mom * v * unbias;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[fan_out, fan_in], (1.0 / fan_in as f64).sqrt(), rng).with_requires_grad(true),
            bias: Tensor::zeros(&[fan_out]).with_requires_grad(true),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Per-channel multiplicative gate. Values are 0 or 1; the gradient with
/// respect to the gate is what pruning importance is computed from.
#[derive(Debug, Clone)]
pub struct Gate<T: Real> {
    pub values: Tensor<T>,
}

impl<T: Real> Gate<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            values: Tensor::full(&[channels], T::one()).with_requires_grad(true),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T: Real> {
    Conv2d(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    MaxPool2d { kernel: usize },
    /// `[N, C, H, W] -> [N, C]`
    GlobalAvgPool,
    Flatten,
    Linear(Linear<T>),
    Gate(Gate<T>),
    /// Pushes the current activation for a later [`Layer::SkipAdd`].
    SkipSave,
    /// Adds the most recently saved activation.
    SkipAdd,
}

/// Differentiable statistics of one batch-norm input.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    /// The activation entering the batch-norm layer.
    pub input: Var,
    /// Per-channel mean over batch and spatial dims.
    pub mean: Var,
    /// Per-channel biased variance over batch and spatial dims.
    pub var: Var,
}

pub struct Forward<T: Real> {
    pub logits: Var,
    pub taps: Vec<Tap>,
    /// Graph leaves for [`Model::params`], in the same order.
    pub params: Vec<Var>,
    /// Graph leaves for each gate layer, in layer order.
    pub gates: Vec<Var>,
    /// `(layer index, stats)` for every batch-norm that used batch statistics.
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

/// Per-layer feature statistics (one entry per batch-norm tap).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats<T> {
    pub mean: Vec<Vec<T>>,
    pub var: Vec<Vec<T>>,
}

impl<T: Real> FeatureStats<T> {
    pub fn layers(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    pub layers: Vec<Layer<T>>,
    /// `[C, H, W]` of a single input image.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    /// Architecture family name (informational).
    pub kind: String,
}

impl<T: Real> Model<T> {
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode, want_taps: bool) -> Result<Forward<T>> {
        let xs = g.shape(x);
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "model",
                format!("input {xs:?} does not match model input [N, {:?}]", self.input_shape),
            ));
        }
        let mut h = x;
        let mut stack = Vec::new();
        let mut out = Forward {
            logits: x,
            taps: Vec::new(),
            params: Vec::new(),
            gates: Vec::new(),
            bn_stats: Vec::new(),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Conv2d(c) => {
                    let w = g.input(&c.weight);
                    out.params.push(w);
                    let b = c.bias.as_ref().map(|b| g.input(b));
                    out.params.extend(b);
                    g.conv2d(h, w, b, c.stride, c.pad)?
                }
                Layer::BatchNorm(bn) => {
                    if want_taps {
                        let mean = g.channel_mean(h)?;
                        let var = g.channel_var(h)?;
                        out.taps.push(Tap { input: h, mean, var });
                    }
                    let gamma = g.input(&bn.gamma);
                    let beta = g.input(&bn.beta);
                    out.params.push(gamma);
                    out.params.push(beta);
                    if mode == Mode::Train && !bn.frozen {
                        let (y, stats) = g.batchnorm_train(h, gamma, beta, T::lit(bn.eps))?;
                        out.bn_stats.push((i, stats));
                        y
                    } else {
                        g.batchnorm_eval(h, gamma, beta, bn.running_mean.data(), bn.running_var.data(), T::lit(bn.eps))?
                    }
                }
                Layer::Relu => g.relu(h),
                Layer::MaxPool2d { kernel } => g.maxpool2d(h, *kernel)?,
                Layer::GlobalAvgPool => {
                    let s = g.shape(h).to_vec();
                    if s.len() != 4 || s[2] != s[3] {
                        return Err(Error::shape(
                            "global_avg_pool",
                            format!("layer {i}: expected square NCHW input, got {s:?}"),
                        ));
                    }
                    let p = g.avgpool2d(h, s[2])?;
                    g.reshape(p, &[s[0], s[1]])?
                }
                Layer::Flatten => {
                    let s = g.shape(h).to_vec();
                    let rest = s[1..].iter().product();
                    g.reshape(h, &[s[0], rest])?
                }
                Layer::Linear(l) => {
                    let w = g.input(&l.weight);
                    let b = g.input(&l.bias);
                    out.params.push(w);
                    out.params.push(b);
                    g.linear(h, w, Some(b))?
                }
                Layer::Gate(gate) => {
                    let s = g.input(&gate.values);
                    out.gates.push(s);
                    g.channel_scale(h, s)?
                }
                Layer::SkipSave => {
                    stack.push(h);
                    h
                }
                Layer::SkipAdd => {
                    let saved = stack.pop().ok_or_else(|| {
                        Error::shape("skip_add", format!("layer {i}: no saved activation"))
                    })?;
                    g.add(h, saved)?
                }
            };
        }
        out.logits = h;
        Ok(out)
    }

    /// Trainable tensors in forward order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    v.push(&c.weight);
                    v.extend(c.bias.as_ref());
                }
                Layer::BatchNorm(bn) => {
                    v.push(&bn.gamma);
                    v.push(&bn.beta);
                }
                Layer::Linear(l) => {
                    v.push(&l.weight);
                    v.push(&l.bias);
                }
                _ => {}
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    v.push(&mut c.weight);
                    v.extend(c.bias.as_mut());
                }
                Layer::BatchNorm(bn) => {
                    v.push(&mut bn.gamma);
                    v.push(&mut bn.beta);
                }
                Layer::Linear(l) => {
                    v.push(&mut l.weight);
                    v.push(&mut l.bias);
                }
                _ => {}
            }
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Adds gradients from a finished backward pass into the parameters.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, fwd: &Forward<T>) -> Result<()> {
        let vars = fwd.params.clone();
        for (p, v) in self.params_mut().into_iter().zip(vars) {
            if !p.requires_grad() {
                continue;
            }
            match g.grad(v) {
                Some(gr) => p.accumulate_grad(gr)?,
                None => {
                    let zeros = vec![T::zero(); p.numel()];
                    p.accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.params_mut().into_iter().for_each(|p| p.set_requires_grad(requires_grad));
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        for (i, s) in stats {
            if let Layer::BatchNorm(bn) = &mut self.layers[*i] {
                if !bn.frozen {
                    bn.update_running(s);
                }
            }
        }
    }

    /// Freezes every batch-norm layer: running statistics and affine params.
    pub fn freeze_bn(&mut self) {
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                bn.frozen = true;
                bn.gamma.set_requires_grad(false);
                bn.beta.set_requires_grad(false);
            }
        }
    }

    pub fn batchnorms(&self) -> impl Iterator<Item = &BatchNorm<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    /// Running statistics of every batch-norm layer in tap order.
    pub fn bn_stats(&self) -> FeatureStats<T> {
        let (mean, var) = self
            .batchnorms()
            .map(|bn| (bn.running_mean.data().to_vec(), bn.running_var.data().to_vec()))
            .unzip();
        FeatureStats { mean, var }
    }

    /// Eval-mode logits for a batch of images, evaluated in chunks.
    pub fn predict(&self, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let n = images.shape()[0];
        let mut logits = Vec::with_capacity(n * self.classes);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let part = images.slice_outer(start, end)?;
            let mut g = Graph::new();
            let x = g.input(&part);
            let f = self.forward(&mut g, x, Mode::Eval, false)?;
            logits.extend_from_slice(g.value(f.logits));
            start = end;
        }
        Tensor::from_vec(&[n, self.classes], logits)
    }

    /// Top-1 accuracy (fraction in `[0, 1]`) against integer labels.
    pub fn accuracy(&self, images: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let logits = self.predict(images, 256)?;
        Ok(top1_accuracy(logits.data(), self.classes, labels))
    }

    /// Copy accepting `h × w` images. Fails when the layers cannot handle that size.
    pub fn with_input_size(&self, h: usize, w: usize) -> Result<Self> {
        if self.input_shape.len() != 3 {
            return Err(Error::shape("with_input_size", format!("model input {:?} is not CHW", self.input_shape)));
        }
        let mut m = self.clone();
        m.input_shape = vec![self.input_shape[0], h, w];
        m.layer_input_shapes()?;
        Ok(m)
    }

    /// Spatial shape `[C, H, W]` (or `[F]`) entering each layer, plus the output.
    pub fn layer_input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut s = self.input_shape.clone();
        let mut stack = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            shapes.push(s.clone());
            let bad = |what: String| Error::shape("model", format!("layer {i}: {what}"));
            s = match layer {
                Layer::Conv2d(c) => {
                    if s.len() != 3 || s[0] != c.c_in() {
                        return Err(bad(format!("conv expects {} channels, input {s:?}", c.c_in())));
                    }
                    let k = c.kernel();
                    if s[1] + 2 * c.pad < k || s[2] + 2 * c.pad < k {
                        return Err(bad(format!("input {s:?} smaller than kernel {k}")));
                    }
                    vec![
                        c.c_out(),
                        (s[1] + 2 * c.pad - k) / c.stride + 1,
                        (s[2] + 2 * c.pad - k) / c.stride + 1,
                    ]
                }
                Layer::BatchNorm(bn) => {
                    if s[0] != bn.channels() {
                        return Err(bad(format!("batch-norm has {} channels, input {s:?}", bn.channels())));
                    }
                    s
                }
                Layer::Gate(gt) => {
                    if s[0] != gt.values.numel() {
                        return Err(bad(format!("gate has {} channels, input {s:?}", gt.values.numel())));
                    }
                    s
                }
                Layer::Relu => s,
                Layer::MaxPool2d { kernel } => {
                    if s.len() != 3 || s[1] < *kernel || s[2] < *kernel {
                        return Err(bad(format!("max-pool {kernel} on input {s:?}")));
                    }
                    vec![s[0], s[1] / kernel, s[2] / kernel]
                }
                Layer::GlobalAvgPool => vec![s[0]],
                Layer::Flatten => vec![s.iter().product()],
                Layer::Linear(l) => {
                    if s != [l.fan_in()] {
                        return Err(bad(format!("linear expects {} features, input {s:?}", l.fan_in())));
                    }
                    vec![l.fan_out()]
                }
                Layer::SkipSave => {
                    stack.push(s.clone());
                    s
                }
                Layer::SkipAdd => {
                    let saved = stack.pop().ok_or_else(|| bad("unmatched skip-add".into()))?;
                    if saved != s {
                        return Err(bad(format!("skip-add of {saved:?} and {s:?}")));
                    }
                    s
                }
            };
        }
        shapes.push(s);
        Ok(shapes)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                    weight: c.weight.cast(),
                    bias: c.bias.as_ref().map(|b| b.cast()),
                    stride: c.stride,
                    pad: c.pad,
                }),
                Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNorm {
                    gamma: bn.gamma.cast(),
                    beta: bn.beta.cast(),
                    running_mean: bn.running_mean.cast(),
                    running_var: bn.running_var.cast(),
                    momentum: bn.momentum,
                    eps: bn.eps,
                    frozen: bn.frozen,
                }),
                Layer::Relu => Layer::Relu,
                Layer::MaxPool2d { kernel } => Layer::MaxPool2d { kernel: *kernel },
                Layer::GlobalAvgPool => Layer::GlobalAvgPool,
                Layer::Flatten => Layer::Flatten,
                Layer::Linear(l) => Layer::Linear(Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                }),
                Layer::Gate(gt) => Layer::Gate(Gate {
                    values: gt.values.cast(),
                }),
                Layer::SkipSave => Layer::SkipSave,
                Layer::SkipAdd => Layer::SkipAdd,
            })
            .collect();
        Model {
            layers,
            input_shape: self.input_shape.clone(),
            classes: self.classes,
            kind: self.kind.clone(),
        }
    }
}

/// Fraction of rows whose argmax equals the label.
pub fn top1_accuracy<T: Real>(logits: &[T], classes: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / labels.len() as f64
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
