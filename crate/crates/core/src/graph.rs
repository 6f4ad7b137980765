//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass. Node
//! indices are issued in creation order, which is already a topological order,
//! so [`Graph::backward`] walks the node list once in reverse. A graph supports
//! exactly one backward pass; a second call is rejected.
//!
//! Tensors enter the graph through [`Graph::input`] (a copy of the values and
//! the `requires_grad` flag). After backward, leaf gradients are read back with
//! [`Graph::grad`] and accumulated into the owning [`Tensor`].

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution geometry (square kernels, symmetric padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    XLogY(Var, Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        x: Var,
        k: usize,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelScale {
        x: Var,
        s: Var,
    },
    ChannelMean(Var),
    ChannelVar {
        x: Var,
        mean: Vec<T>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    LogSoftmax(Var),
    Softmax(Var),
    CrossEntropy {
        x: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Batch statistics computed by a train-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over batch and spatial dims.
    pub var: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `[N, C, rest...]` into `(N, C, prod(rest))`.
fn channel_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("expected [N, C, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], numel(&shape[2..])))
}

fn rows_cols(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(Error::shape(op, format!("expected 2-d input, got {shape:?}")));
    }
    Ok((shape[0], shape[1]))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf copied from `t`, inheriting its `requires_grad` flag.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Adds a leaf that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    pub fn scalar_const(&mut self, value: T) -> Var {
        self.push(Vec::new(), vec![value], false, Op::Leaf)
    }

    /// Copies a node's value into a new gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).data
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_vec(&n.shape, n.data.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, mk: fn(Var, Var) -> Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, mk(a, b)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// `x * ln(y)` with the convention `0 * ln(0) = 0`.
    pub fn xlogy(&mut self, x: Var, y: Var) -> Result<Var> {
        self.binary(
            "xlogy",
            x,
            y,
            |x, y| if x == T::zero() { T::zero() } else { x * y.ln() },
            Op::XLogY,
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    /// ReLU; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::shape("clamp", format!("lower bound {lo} exceeds upper {hi}")));
        }
        Ok(self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi)))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::lit(self.value(a).len().max(1) as f64);
        let s: T = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s / n], rg, Op::Mean(a))
    }

    /// Euclidean norm of all elements; its gradient at the origin is zero.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s: T = self.value(a).iter().map(|&x| x * x).sum();
        let rg = self.rg(a);
        self.push(Vec::new(), vec![s.sqrt()], rg, Op::L2Norm(a))
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols("matmul", self.shape(a))?;
        let (k2, n) = rows_cols("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m, k, n, T::one(), self.value(a), k as isize, 1, self.value(b), n as isize, 1,
            T::zero(), &mut out, n as isize, 1,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    /// `x @ w^T + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, fin) = rows_cols("linear", self.shape(x))?;
        let (fout, fin2) = rows_cols("linear", self.shape(w))?;
        if fin != fin2 {
            return Err(Error::shape(
                "linear",
                format!("input features {fin} vs weight {:?}", self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} vs {fout} outputs", self.shape(b)),
                ));
            }
        }
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            n, fin, fout, T::one(), self.value(x), fin as isize, 1, self.value(w), 1, fin as isize,
            T::one(), &mut out, fout as isize, 1,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![n, fout], out, rg, Op::Linear { x, w, b }))
    }

    /// 2-d convolution on NCHW input with weight `[O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and weight, got {xs:?} and {ws:?}"),
            ));
        }
        if ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("non-square kernel {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs weight in-channels {} (weight {ws:?})", xs[1], ws[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {xs:?} (pad {pad})"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} vs {} filters", self.shape(b), ws[0]),
                ));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kernel: k,
            stride,
            pad,
            h_out: (xs[2] + 2 * pad - k) / stride + 1,
            w_out: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let rows = geom.cols_rows();
        let l = geom.out_len();
        let per_img = rows * l;
        let mut cols = vec![T::zero(); geom.batch * per_img];
        {
            let xv = self.value(x);
            for n in 0..geom.batch {
                im2col(&xv[n * geom.c_in * geom.h * geom.w..], &geom, &mut cols[n * per_img..(n + 1) * per_img]);
            }
        }
        let mut out = vec![T::zero(); geom.batch * geom.c_out * l];
        {
            let wv = self.value(w);
            for n in 0..geom.batch {
                let o = &mut out[n * geom.c_out * l..(n + 1) * geom.c_out * l];
                if let Some(b) = b {
                    for (oc, &bv) in self.value(b).iter().enumerate() {
                        o[oc * l..(oc + 1) * l].iter_mut().for_each(|v| *v = bv);
                    }
                }
                T::gemm(
                    geom.c_out, rows, l, T::one(), wv, rows as isize, 1,
                    &cols[n * per_img..], l as isize, 1, T::one(), o, l as isize, 1,
                );
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        // cols are only needed for the weight gradient
        if !self.rg(w) {
            cols = Vec::new();
        }
        Ok(self.push(
            vec![geom.batch, geom.c_out, geom.h_out, geom.w_out],
            out,
            rg,
            Op::Conv2d { x, w, b, geom, cols },
        ))
    }

    // ---------------------------------------------------------------- pooling

    /// Non-overlapping `k x k` max pooling (stride `k`, trailing rows dropped).
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.pool_dims("maxpool2d", x, k)?;
        let (ho, wo) = (h / k, w / k);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + oh * k * w + ow * k;
                    for i in 0..k {
                        for j in 0..k {
                            let idx = base + (oh * k + i) * w + ow * k + j;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, c, ho, wo], out, rg, Op::MaxPool2d { x, argmax }))
    }

    /// Non-overlapping `k x k` average pooling (stride `k`).
    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.pool_dims("avgpool2d", x, k)?;
        let (ho, wo) = (h / k, w / k);
        let inv = T::lit(1.0 / (k * k) as f64);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut s = T::zero();
                    for i in 0..k {
                        for j in 0..k {
                            s += xv[base + (oh * k + i) * w + ow * k + j];
                        }
                    }
                    out.push(s * inv);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, c, ho, wo], out, rg, Op::AvgPool2d { x, k }))
    }

    fn pool_dims(&self, op: &'static str, x: Var, k: usize) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape(op, format!("expected NCHW input, got {s:?}")));
        }
        if k == 0 || s[2] < k || s[3] < k {
            return Err(Error::shape(op, format!("window {k} does not fit input {s:?}")));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    // ---------------------------------------------------------------- normalization

    fn check_channel_param(&self, op: &'static str, p: Var, c: usize) -> Result<()> {
        if self.shape(p) != [c] {
            return Err(Error::shape(
                op,
                format!("per-channel parameter {:?} vs {c} channels", self.shape(p)),
            ));
        }
        Ok(())
    }

    /// Batch normalization with batch statistics (training behaviour).
    /// Returns the output and the statistics used, for running-average updates.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let (n, c, s) = channel_dims("batchnorm", self.shape(x))?;
        self.check_channel_param("batchnorm", gamma, c)?;
        self.check_channel_param("batchnorm", beta, c)?;
        let m = n * s;
        if m == 0 {
            return Err(Error::shape("batchnorm", "empty batch"));
        }
        let (mean, var) = channel_moments(self.value(x), n, c, s);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * s;
                for j in off..off + s {
                    let h = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = gv[ch] * h + bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let stats = BatchStats {
            mean,
            var,
            count: m,
        };
        let v = self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, stats))
    }

    /// Batch normalization with fixed statistics (inference behaviour).
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (n, c, s) = channel_dims("batchnorm", self.shape(x))?;
        self.check_channel_param("batchnorm", gamma, c)?;
        self.check_channel_param("batchnorm", beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("running stats of length {}/{} vs {c} channels", mean.len(), var.len()),
            ));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * s;
                let a = gv[ch] * inv_std[ch];
                for j in off..off + s {
                    out[j] = a * (xv[j] - mean[ch]) + bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
        ))
    }

    /// Multiplies channel `c` of `x: [N, C, ...]` by `s[c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, sp) = channel_dims("channel_scale", self.shape(x))?;
        self.check_channel_param("channel_scale", s, c)?;
        let xv = self.value(x);
        let sv = self.value(s);
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * sp;
                for j in off..off + sp {
                    out[j] = xv[j] * sv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(self.shape(x).to_vec(), out, rg, Op::ChannelScale { x, s }))
    }

    /// Per-channel mean over batch and spatial dims: `[N, C, ...] -> [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, s) = channel_dims("channel_mean", self.shape(x))?;
        if n * s == 0 {
            return Err(Error::shape("channel_mean", "empty batch"));
        }
        let (mean, _) = channel_moments(self.value(x), n, c, s);
        let rg = self.rg(x);
        Ok(self.push(vec![c], mean, rg, Op::ChannelMean(x)))
    }

    /// Per-channel biased variance over batch and spatial dims: `[N, C, ...] -> [C]`.
    pub fn channel_var(&mut self, x: Var) -> Result<Var> {
        let (n, c, s) = channel_dims("channel_var", self.shape(x))?;
        if n * s == 0 {
            return Err(Error::shape("channel_var", "empty batch"));
        }
        let (mean, var) = channel_moments(self.value(x), n, c, s);
        let rg = self.rg(x);
        Ok(self.push(vec![c], var, rg, Op::ChannelVar { x, mean }))
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape(x)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{end} on axis {axis} of {s:?}"),
            ));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&xv[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.rg(x);
        Ok(self.push(shape, out, rg, Op::Slice { x, axis, start }))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`; gradients scatter back.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for output shape {shape:?}", index.len()),
            ));
        }
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of bounds for {:?}", self.shape(x)),
            ));
        }
        let out = index.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, rg, Op::Gather { x, index }))
    }

    /// Nearest-neighbour spatial upsampling of NCHW input by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::shape("upsample_nearest", "factor must be >= 1"));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample_nearest", format!("expected NCHW input, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let mut index = Vec::with_capacity(s[0] * s[1] * ho * wo);
        for plane in 0..s[0] * s[1] {
            for i in 0..ho {
                for j in 0..wo {
                    index.push(plane * h * w + (i / factor) * w + j / factor);
                }
            }
        }
        self.gather(x, index, &[s[0], s[1], ho, wo])
    }

    // ---------------------------------------------------------------- softmax family

    /// Row-wise log-softmax of a `[N, K]` input.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, k) = rows_cols("log_softmax", self.shape(x))?;
        let mut out = self.value(x).to_vec();
        for r in 0..n {
            let row = &mut out[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, k], out, rg, Op::LogSoftmax(x)))
    }

    /// Row-wise softmax of a `[N, K]` input.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, k) = rows_cols("softmax", self.shape(x))?;
        let out = softmax_rows(self.value(x), n, k);
        let rg = self.rg(x);
        Ok(self.push(vec![n, k], out, rg, Op::Softmax(x)))
    }

    /// Mean cross-entropy of `[N, K]` logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = rows_cols("cross_entropy", self.shape(logits))?;
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::shape("cross_entropy", format!("target {t} >= {k} classes")));
        }
        if n == 0 {
            return Err(Error::shape("cross_entropy", "empty batch"));
        }
        let probs = softmax_rows(self.value(logits), n, k);
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &self.value(logits)[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            loss += lse - row[t];
        }
        loss /= T::lit(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            rg,
            Op::CrossEntropy {
                x: logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates d`loss`/d`v` for every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = self.shape(loss);
        if !shape.is_empty() && numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].data.len()]);
            f(buf);
        };
        let val = |v: Var| nodes[v.0].data.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |d| add_into(d, g));
                acc(grads, *b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |d| add_into(d, g));
                acc(grads, *b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(grads, *a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * bv[j];
                    }
                });
                acc(grads, *b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * av[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(grads, *a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / bv[j];
                    }
                });
                acc(grads, *b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                    }
                });
            }
            Op::XLogY(x, y) => {
                let (xv, yv) = (val(*x), val(*y));
                acc(grads, *x, &mut |d| {
                    for j in 0..d.len() {
                        if yv[j] > T::zero() {
                            d[j] += g[j] * yv[j].ln();
                        }
                    }
                });
                acc(grads, *y, &mut |d| {
                    for j in 0..d.len() {
                        if xv[j] != T::zero() {
                            d[j] += g[j] * xv[j] / yv[j];
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(grads, *a, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c)
            }),
            Op::AddScalar(a) => acc(grads, *a, &mut |d| add_into(d, g)),
            Op::Exp(a) => {
                let out = &node.data;
                acc(grads, *a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * out[j];
                    }
                })
            }
            Op::Log(a) => {
                let av = val(*a);
                acc(grads, *a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] / av[j];
                    }
                })
            }
            Op::Sqrt(a) => {
                let out = &node.data;
                let half = T::lit(0.5);
                acc(grads, *a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * half / out[j];
                    }
                })
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc(grads, *a, &mut |d| {
                    for j in 0..d.len() {
                        if av[j] > T::zero() {
                            d[j] += g[j];
                        }
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                acc(grads, *a, &mut |d| {
                    for j in 0..d.len() {
                        if av[j] >= *lo && av[j] <= *hi {
                            d[j] += g[j];
                        }
                    }
                })
            }
            Op::Sum(a) => acc(grads, *a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let s = g[0] / T::lit(val(*a).len().max(1) as f64);
                acc(grads, *a, &mut |d| d.iter_mut().for_each(|d| *d += s))
            }
            Op::L2Norm(a) => {
                let norm = node.data[0];
                if norm > T::zero() {
                    let av = val(*a);
                    let s = g[0] / norm;
                    acc(grads, *a, &mut |d| {
                        for j in 0..d.len() {
                            d[j] += s * av[j];
                        }
                    })
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (val(*a), val(*b));
                // dA = G B^T ; dB = A^T G
                acc(grads, *a, &mut |d| {
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, bv, 1, n as isize, T::one(), d, k as isize, 1)
                });
                acc(grads, *b, &mut |d| {
                    T::gemm(k, m, n, T::one(), av, 1, k as isize, g, n as isize, 1, T::one(), d, n as isize, 1)
                });
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let fout = nodes[w.0].shape[0];
                let (xv, wv) = (val(*x), val(*w));
                // dX = G W ; dW = G^T X ; db = colsum(G)
                acc(grads, *x, &mut |d| {
                    T::gemm(n, fout, fin, T::one(), g, fout as isize, 1, wv, fin as isize, 1, T::one(), d, fin as isize, 1)
                });
                acc(grads, *w, &mut |d| {
                    T::gemm(fout, n, fin, T::one(), g, 1, fout as isize, xv, fin as isize, 1, T::one(), d, fin as isize, 1)
                });
                if let Some(b) = b {
                    acc(grads, *b, &mut |d| {
                        for row in g.chunks(fout) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let rows = geom.cols_rows();
                let l = geom.out_len();
                let per_img = rows * l;
                let per_out = geom.c_out * l;
                if let Some(b) = b {
                    acc(grads, *b, &mut |d| {
                        for n in 0..geom.batch {
                            for oc in 0..geom.c_out {
                                let s: T = g[n * per_out + oc * l..n * per_out + (oc + 1) * l].iter().copied().sum();
                                d[oc] += s;
                            }
                        }
                    });
                }
                acc(grads, *w, &mut |d| {
                    for n in 0..geom.batch {
                        T::gemm(
                            geom.c_out, l, rows, T::one(), &g[n * per_out..], l as isize, 1,
                            &cols[n * per_img..], 1, l as isize, T::one(), d, rows as isize, 1,
                        );
                    }
                });
                let wv = val(*w);
                acc(grads, *x, &mut |d| {
                    let mut dcols = vec![T::zero(); per_img];
                    let per_in = geom.c_in * geom.h * geom.w;
                    for n in 0..geom.batch {
                        T::gemm(
                            rows, geom.c_out, l, T::one(), wv, 1, rows as isize,
                            &g[n * per_out..], l as isize, 1, T::zero(), &mut dcols, l as isize, 1,
                        );
                        col2im(&dcols, geom, &mut d[n * per_in..(n + 1) * per_in]);
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => acc(grads, *x, &mut |d| {
                for (j, &src) in argmax.iter().enumerate() {
                    d[src] += g[j];
                }
            }),
            Op::AvgPool2d { x, k } => {
                let s = &nodes[x.0].shape;
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / k, w / k);
                let inv = T::lit(1.0 / (k * k) as f64);
                acc(grads, *x, &mut |d| {
                    for plane in 0..s[0] * s[1] {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let gv = g[(plane * ho + oh) * wo + ow] * inv;
                                for i in 0..*k {
                                    for j in 0..*k {
                                        d[plane * h * w + (oh * k + i) * w + ow * k + j] += gv;
                                    }
                                }
                            }
                        }
                    }
                })
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, s) = channel_dims("batchnorm", &nodes[x.0].shape).unwrap();
                let m = T::lit((n * s) as f64);
                let gv = val(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * s;
                        for j in off..off + s {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                acc(grads, *gamma, &mut |d| add_into(d, &sum_gx));
                acc(grads, *beta, &mut |d| add_into(d, &sum_g));
                acc(grads, *x, &mut |d| {
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * s;
                            let a = gv[ch] * inv_std[ch] / m;
                            for j in off..off + s {
                                d[j] += a * (m * g[j] - sum_g[ch] - xhat[j] * sum_gx[ch]);
                            }
                        }
                    }
                });
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c, s) = channel_dims("batchnorm", &nodes[x.0].shape).unwrap();
                let (xv, gv) = (val(*x), val(*gamma));
                acc(grads, *gamma, &mut |d| {
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * s;
                            for j in off..off + s {
                                d[ch] += g[j] * (xv[j] - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                });
                acc(grads, *beta, &mut |d| {
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * s;
                            d[ch] += g[off..off + s].iter().copied().sum::<T>();
                        }
                    }
                });
                acc(grads, *x, &mut |d| {
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * s;
                            let a = gv[ch] * inv_std[ch];
                            for j in off..off + s {
                                d[j] += g[j] * a;
                            }
                        }
                    }
                });
            }
            Op::ChannelScale { x, s } => {
                let (n, c, sp) = channel_dims("channel_scale", &nodes[x.0].shape).unwrap();
                let (xv, sv) = (val(*x), val(*s));
                acc(grads, *s, &mut |d| {
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * sp;
                            for j in off..off + sp {
                                d[ch] += g[j] * xv[j];
                            }
                        }
                    }
                });
                acc(grads, *x, &mut |d| {
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * sp;
                            for j in off..off + sp {
                                d[j] += g[j] * sv[ch];
                            }
                        }
                    }
                });
            }
            Op::ChannelMean(x) => {
                let (n, c, s) = channel_dims("channel_mean", &nodes[x.0].shape).unwrap();
                let inv = T::one() / T::lit((n * s) as f64);
                acc(grads, *x, &mut |d| {
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * s;
                            let gv = g[ch] * inv;
                            d[off..off + s].iter_mut().for_each(|d| *d += gv);
                        }
                    }
                })
            }
            Op::ChannelVar { x, mean } => {
                let (n, c, s) = channel_dims("channel_var", &nodes[x.0].shape).unwrap();
                let two_over_m = T::lit(2.0 / (n * s) as f64);
                let xv = val(*x);
                acc(grads, *x, &mut |d| {
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * s;
                            let gv = g[ch] * two_over_m;
                            for j in off..off + s {
                                d[j] += gv * (xv[j] - mean[ch]);
                            }
                        }
                    }
                })
            }
            Op::Reshape(x) => acc(grads, *x, &mut |d| add_into(d, g)),
            Op::Concat { inputs, axis } => {
                let base = &node.shape;
                let outer = numel(&base[..*axis]);
                let inner = numel(&base[axis + 1..]);
                let total = base[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = nodes[v.0].shape[*axis] * inner;
                    acc(grads, v, &mut |d| {
                        for o in 0..outer {
                            add_into(&mut d[o * chunk..(o + 1) * chunk], &g[o * total + offset..o * total + offset + chunk]);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = &nodes[x.0].shape;
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let len = node.shape[*axis] * inner;
                acc(grads, *x, &mut |d| {
                    for o in 0..outer {
                        let base = o * s[*axis] * inner + start * inner;
                        add_into(&mut d[base..base + len], &g[o * len..(o + 1) * len]);
                    }
                })
            }
            Op::Gather { x, index } => acc(grads, *x, &mut |d| {
                for (j, &src) in index.iter().enumerate() {
                    d[src] += g[j];
                }
            }),
            Op::LogSoftmax(x) => {
                let k = node.shape[1];
                let out = &node.data;
                acc(grads, *x, &mut |d| {
                    for (r, grow) in g.chunks(k).enumerate() {
                        let gs: T = grow.iter().copied().sum();
                        for j in 0..k {
                            d[r * k + j] += grow[j] - out[r * k + j].exp() * gs;
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let k = node.shape[1];
                let out = &node.data;
                acc(grads, *x, &mut |d| {
                    for (r, grow) in g.chunks(k).enumerate() {
                        let p = &out[r * k..(r + 1) * k];
                        let dot: T = grow.iter().zip(p).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            d[r * k + j] += p[j] * (grow[j] - dot);
                        }
                    }
                })
            }
            Op::CrossEntropy { x, targets, probs } => {
                let k = nodes[x.0].shape[1];
                let scale = g[0] / T::lit(targets.len() as f64);
                acc(grads, *x, &mut |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            d[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                })
            }
        }
    }
}

fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
}

/// Per-channel mean and biased variance of `[N, C, S]` data (two-pass).
pub(crate) fn channel_moments<T: Real>(x: &[T], n: usize, c: usize, s: usize) -> (Vec<T>, Vec<T>) {
    let m = T::lit((n * s) as f64);
    let mut mean = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * s;
            mean[ch] += x[off..off + s].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * s;
            var[ch] += x[off..off + s].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

pub(crate) fn softmax_rows<T: Real>(x: &[T], n: usize, k: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for r in 0..n {
        let row = &mut out[r * k..(r + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let l = g.out_len();
    let k = g.kernel;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let l = g.out_len();
    let k = g.kernel;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            line[iw as usize] += src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward_and_zero_subgradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::from_vec(&[3], vec![-1.0, 2.0, 0.0]).unwrap().with_requires_grad(true));
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 2.0, 0.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::scalar(3.0).with_requires_grad(true));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::scalar(3.0).with_requires_grad(true));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f32>::new();
        let a = g.input(&Tensor::zeros(&[2, 3]));
        let b = g.input(&Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
        let err = g.matmul(a, a).unwrap_err().to_string();
        assert!(err.starts_with("matmul"), "{err}");
        let x = g.input(&Tensor::zeros(&[1, 2, 5, 5]));
        let w = g.input(&Tensor::zeros(&[4, 3, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.starts_with("conv2d") && err.contains("in-channels 3"), "{err}");
    }

    #[test]
    fn identity_conv_is_identity() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..2 * 3 * 4 * 5).map(|v| v as f32 * 0.5 - 7.0).collect();
        let x = g.input(&Tensor::from_vec(&[2, 3, 4, 5], data.clone()).unwrap());
        let mut w = vec![0.0f32; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = g.input(&Tensor::from_vec(&[3, 3, 1, 1], w).unwrap());
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), data.as_slice());
    }

    #[test]
    fn upsample_blocks() {
        let mut g = Graph::<f32>::new();
        let x = g.input(&Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let same = g.upsample_nearest(x, 1).unwrap();
        assert_eq!(g.value(same), &[1.0, 2.0, 3.0, 4.0]);
        let y = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(g.value(y), &expected);
        assert!(g.upsample_nearest(x, 0).is_err());
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g = Graph::<f32>::new();
        let a = g.input(&Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.input(&Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, 1, 1, 3).unwrap();
        assert_eq!(g.value(s), &[2.0, 5.0, 4.0, 6.0]);
    }

    #[test]
    fn channel_stats_of_constant_batch() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::full(&[4, 2, 3, 3], 1.5));
        let m = g.channel_mean(x).unwrap();
        let v = g.channel_var(x).unwrap();
        assert_eq!(g.value(m), &[1.5, 1.5]);
        assert_eq!(g.value(v), &[0.0, 0.0]);
    }
}
