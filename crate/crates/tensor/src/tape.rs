//! Record-then-backward reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append a node and return a [`Var`] handle; [`Tape::backward`] walks the
//! nodes in reverse and returns [`Gradients`] for every leaf that was marked
//! as requiring a gradient. Nodes that cannot reach such a leaf are skipped,
//! so frozen networks cost only their forward pass plus the activation
//! gradients actually needed.
//!
//! Tapes are single-threaded scratch state. Leaf values are `Arc`-shared so
//! binding a large parameter set does not copy it.

use std::sync::Arc;

use rand::Rng;

use crate::conv::{self, ConvGeometry};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Logistic function without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Per-channel running mean/variance maintained by batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: BATCH_NORM_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

enum Op {
    Leaf,
    Conv3d {
        x: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    ConvTranspose3d {
        x: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    ChannelBias {
        x: Var,
        bias: Var,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Reshape {
        x: Var,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    ClampedLog {
        x: Var,
        eps: f64,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    RowNorm {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Slice {
        x: Var,
        start: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::ConvTranspose3d { .. } => "conv_transpose3d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Linear { .. } => "linear",
            Op::Reshape { .. } => "reshape",
            Op::Activation { .. } => "activation",
            Op::ClampedLog { .. } => "log",
            Op::Affine { .. } => "affine",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::RowNorm { .. } => "row_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes ownership of a gradient, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn batch_of(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, rest @ ..] if !rest.is_empty() => Ok((*n, rest.iter().product())),
        s => Err(TensorError::invalid(op, format!("expected a batched tensor, got {s:?}"))),
    }
}

fn volumetric(t: &Tensor, op: &'static str) -> Result<[usize; 5]> {
    match *t.shape() {
        [n, c, d, h, w] => Ok([n, c, d, h, w]),
        ref s => Err(TensorError::invalid(op, format!("expected N×C×D×H×W, got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input value. Leaves with `requires_grad` receive a gradient
    /// (zeros when unreachable) from [`Tape::backward`].
    pub fn leaf(&mut self, value: impl Into<Arc<Tensor>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(value, false)
    }

    pub fn conv3d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, d, h, w] = volumetric(self.value(x), "conv3d")?;
        let ks = self.value(kernel).shape().to_vec();
        let [f, kc, k, k2, k3] = ks[..] else {
            return Err(TensorError::invalid("conv3d", format!("kernel must be F×C×k×k×k, got {ks:?}")));
        };
        if k != k2 || k != k3 {
            return Err(TensorError::invalid("conv3d", "kernel must be cubic"));
        }
        if kc != c {
            return Err(TensorError::ChannelMismatch {
                op: "conv3d",
                input: c,
                kernel: kc,
            });
        }
        let geom = ConvGeometry::forward([d, h, w], k, stride, pad)?;
        let out = conv::conv_forward(
            self.value(x).data(),
            self.value(kernel).data(),
            n,
            c,
            f,
            &geom,
        );
        let [od, oh, ow] = geom.output;
        let value = Tensor::new([n, f, od, oh, ow], out)?;
        let needs = self.needs(x) || self.needs(kernel);
        self.push(value, Op::Conv3d { x, kernel, geom }, needs)
    }

    /// Adjoint of [`Tape::conv3d`] for the same `F×C×k×k×k` kernel: maps `F`
    /// channels to `C`.
    pub fn conv_transpose3d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, f, d, h, w] = volumetric(self.value(x), "conv_transpose3d")?;
        let ks = self.value(kernel).shape().to_vec();
        let [kf, c, k, k2, k3] = ks[..] else {
            return Err(TensorError::invalid(
                "conv_transpose3d",
                format!("kernel must be F×C×k×k×k, got {ks:?}"),
            ));
        };
        if k != k2 || k != k3 {
            return Err(TensorError::invalid("conv_transpose3d", "kernel must be cubic"));
        }
        if kf != f {
            return Err(TensorError::ChannelMismatch {
                op: "conv_transpose3d",
                input: f,
                kernel: kf,
            });
        }
        let geom = ConvGeometry::transposed([d, h, w], k, stride, pad)?;
        let out = conv::conv_backward_data(
            self.value(x).data(),
            self.value(kernel).data(),
            n,
            c,
            f,
            &geom,
        );
        let [od, oh, ow] = geom.input;
        let value = Tensor::new([n, c, od, oh, ow], out)?;
        let needs = self.needs(x) || self.needs(kernel);
        self.push(value, Op::ConvTranspose3d { x, kernel, geom }, needs)
    }

    /// Adds `bias[c]` to every element of channel `c` of an `N×C×…` tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(TensorError::invalid("channel_bias", "expected N×C×…"));
        }
        let c = xs[1];
        self.value(bias).expect_shape("channel_bias", &[c])?;
        let inner: usize = xs[2..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bc = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(out, Op::ChannelBias { x, bias }, needs)
    }

    /// `y = x·Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, fin) = match *self.value(x).shape() {
            [n, fin] => (n, fin),
            ref s => return Err(TensorError::invalid("linear", format!("input must be N×in, got {s:?}"))),
        };
        let fout = match *self.value(weight).shape() {
            [o, i] if i == fin => o,
            ref s => {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    expected: vec![s.first().copied().unwrap_or(0), fin],
                    got: s.to_vec(),
                })
            }
        };
        let mut out = vec![0.0; n * fout];
        conv::matmul(
            self.value(x).data(),
            false,
            self.value(weight).data(),
            true,
            (n, fin, fout),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            self.value(b).expect_shape("linear", &[fout])?;
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bd).for_each(|(v, b)| *v += b);
            }
        }
        let needs = self.needs(x) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        self.push(Tensor::new([n, fout], out)?, Op::Linear { x, weight, bias }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        self.push(value, Op::Reshape { x }, needs)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let value = self.value(x).map(|v| kind.apply(v));
        let needs = self.needs(x);
        self.push(value, Op::Activation { x, kind }, needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn clamped_log(&mut self, x: Var, eps: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(eps).ln());
        let needs = self.needs(x);
        self.push(value, Op::ClampedLog { x, eps }, needs)
    }

    /// `scale·x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + offset);
        let needs = self.needs(x);
        self.push(value, Op::Affine { x, scale }, needs)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        tb.expect_shape(name, ta.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok((value, self.needs(a) || self.needs(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, needs) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(value, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, needs) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(value, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, needs) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(value, Op::Mul { a, b }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(TensorError::invalid("mean", "empty tensor"));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let needs = self.needs(x);
        self.push(value, Op::Mean { x }, needs)
    }

    /// Per-sample Euclidean norm: `[N, …]` → `[N]`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let (n, inner) = batch_of(self.value(x), "row_norm")?;
        let norms = self
            .value(x)
            .data()
            .chunks(inner.max(1))
            .take(n)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let needs = self.needs(x);
        self.push(Tensor::new([n], norms)?, Op::RowNorm { x }, needs)
    }

    /// Batch normalization over the batch and spatial axes of `N×C×…`.
    ///
    /// In [`Mode::Train`] the batch moments are used and `stats` is updated
    /// with its momentum; in [`Mode::Infer`] `stats` is read only.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        stats: &mut RunningStats,
    ) -> Result<Var> {
        if mode == Mode::Train {
            return self.batch_norm_train(x, gamma, beta, Some(stats));
        }
        self.batch_norm_infer(x, gamma, beta, stats)
    }

    /// Training-mode batch normalization; `stats`, when given, receives a
    /// momentum update (mean and unbiased variance).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<&mut RunningStats>,
    ) -> Result<Var> {
        let (n, c, inner) = self.bn_shape(x, gamma, beta)?;
        if n < 2 {
            return Err(TensorError::invalid("batch_norm", "training mode needs a batch of at least 2"));
        }
        let m = (n * inner) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, chunk) in xd.chunks(inner).enumerate() {
            mean[i % c] += chunk.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for (i, chunk) in xd.chunks(inner).enumerate() {
            let mu = mean[i % c];
            var[i % c] += chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        if let Some(stats) = stats {
            if stats.channels() != c {
                return Err(TensorError::invalid("batch_norm", "running stats channel count mismatch"));
            }
            let mo = stats.momentum;
            let unbias = m / (m - 1.0);
            for ch in 0..c {
                stats.mean[ch] = (1.0 - mo) * stats.mean[ch] + mo * mean[ch];
                stats.var[ch] = (1.0 - mo) * stats.var[ch] + mo * var[ch] * unbias;
            }
        }
        self.bn_apply(x, gamma, beta, &mean, inv_std, inner, true)
    }

    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, stats: &RunningStats) -> Result<Var> {
        let (_, c, inner) = self.bn_shape(x, gamma, beta)?;
        if stats.channels() != c {
            return Err(TensorError::invalid("batch_norm", "running stats channel count mismatch"));
        }
        let inv_std = stats.var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        self.bn_apply(x, gamma, beta, &stats.mean, inv_std, inner, false)
    }

    fn bn_shape(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.value(x).shape();
        if xs.len() < 2 {
            return Err(TensorError::invalid("batch_norm", "expected N×C×…"));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner = xs[2..].iter().product();
        self.value(gamma).expect_shape("batch_norm", &[c])?;
        self.value(beta).expect_shape("batch_norm", &[c])?;
        Ok((n, c, inner))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        inner: usize,
        train: bool,
    ) -> Result<Var> {
        let c = mean.len();
        let xt = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xt.len()];
        let mut out = vec![0.0; xt.len()];
        for (i, (src, (xh, o))) in xt
            .data()
            .chunks(inner)
            .zip(xhat.chunks_mut(inner).zip(out.chunks_mut(inner)))
            .enumerate()
        {
            let ch = i % c;
            for ((s, h), y) in src.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                *h = (s - mean[ch]) * inv_std[ch];
                *y = g[ch] * *h + b[ch];
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            needs,
        )
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. Infer mode returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if mode == Mode::Infer || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push(value, Op::Dropout { x, mask }, needs)
    }

    /// Concatenates along the batch axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.is_empty() || sa[1..] != sb[1..] || sb.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                expected: sa.to_vec(),
                got: sb.to_vec(),
            });
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data)?, Op::Concat { a, b }, needs)
    }

    /// Rows `start..start+len` along the batch axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, inner) = batch_of(self.value(x), "slice")?;
        if start + len > n {
            return Err(TensorError::invalid("slice", format!("{start}..{} out of {n}", start + len)));
        }
        let mut shape = self.value(x).shape().to_vec();
        shape[0] = len;
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data)?, Op::Slice { x, start }, needs)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every leaf recorded with `requires_grad` gets an entry; leaves the
    /// loss does not depend on receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lt.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if !gy.is_finite() {
                return Err(TensorError::NonFinite { op: node.op.name() });
            }
            self.propagate(node, &gy, &mut grads)?;
        }

        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            let is_param = matches!(node.op, Op::Leaf) && node.needs_grad;
            if is_param {
                match g {
                    Some(t) if !t.is_finite() => return Err(TensorError::NonFinite { op: "backward" }),
                    Some(_) => {}
                    None => *g = Some(Tensor::zeros(node.value.shape().to_vec())),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, g: Tensor| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        let shape_of = |v: Var| self.value(v).shape().to_vec();

        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, kernel, geom } => {
                let [n, c, ..] = volumetric(self.value(*x), "conv3d")?;
                let f = self.value(*kernel).shape()[0];
                if self.needs(*x) {
                    let dx = conv::conv_backward_data(gy.data(), self.value(*kernel).data(), n, c, f, geom);
                    acc(*x, Tensor::new(shape_of(*x), dx)?);
                }
                if self.needs(*kernel) {
                    let mut dk = vec![0.0; self.value(*kernel).len()];
                    conv::conv_backward_kernel(gy.data(), self.value(*x).data(), n, c, f, geom, &mut dk);
                    acc(*kernel, Tensor::new(shape_of(*kernel), dk)?);
                }
            }
            Op::ConvTranspose3d { x, kernel, geom } => {
                let [n, f, ..] = volumetric(self.value(*x), "conv_transpose3d")?;
                let c = self.value(*kernel).shape()[1];
                if self.needs(*x) {
                    let dx = conv::conv_forward(gy.data(), self.value(*kernel).data(), n, c, f, geom);
                    acc(*x, Tensor::new(shape_of(*x), dx)?);
                }
                if self.needs(*kernel) {
                    let mut dk = vec![0.0; self.value(*kernel).len()];
                    conv::conv_backward_kernel(self.value(*x).data(), gy.data(), n, c, f, geom, &mut dk);
                    acc(*kernel, Tensor::new(shape_of(*kernel), dk)?);
                }
            }
            Op::ChannelBias { x, bias } => {
                if self.needs(*bias) {
                    let c = self.value(*bias).len();
                    let inner: usize = gy.shape()[2..].iter().product();
                    let mut db = vec![0.0; c];
                    for (i, chunk) in gy.data().chunks(inner).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    acc(*bias, Tensor::new([c], db)?);
                }
                if self.needs(*x) {
                    acc(*x, gy.clone());
                }
            }
            Op::Linear { x, weight, bias } => {
                let (n, fin) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let fout = self.value(*weight).shape()[0];
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * fin];
                    conv::matmul(gy.data(), false, self.value(*weight).data(), false, (n, fout, fin), &mut dx, false);
                    acc(*x, Tensor::new([n, fin], dx)?);
                }
                if self.needs(*weight) {
                    let mut dw = vec![0.0; fout * fin];
                    conv::matmul(gy.data(), true, self.value(*x).data(), false, (fout, n, fin), &mut dw, false);
                    acc(*weight, Tensor::new([fout, fin], dw)?);
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    let mut db = vec![0.0; fout];
                    for row in gy.data().chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    acc(b, Tensor::new([fout], db)?);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    acc(*x, gy.clone().reshape(shape_of(*x))?);
                }
            }
            Op::Activation { x, kind } => {
                if self.needs(*x) {
                    let (xs, ys) = (self.value(*x).data(), node.value.data());
                    let dx = gy
                        .data()
                        .iter()
                        .zip(xs.iter().zip(ys))
                        .map(|(g, (&xv, &yv))| g * kind.derivative(xv, yv))
                        .collect();
                    acc(*x, Tensor::new(shape_of(*x), dx)?);
                }
            }
            Op::ClampedLog { x, eps } => {
                if self.needs(*x) {
                    let dx = gy
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, &xv)| if xv > *eps { g / xv } else { 0.0 })
                        .collect();
                    acc(*x, Tensor::new(shape_of(*x), dx)?);
                }
            }
            Op::Affine { x, scale } => {
                if self.needs(*x) {
                    acc(*x, gy.map(|g| g * scale));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    acc(*a, gy.clone());
                }
                if self.needs(*b) {
                    acc(*b, gy.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    acc(*a, gy.clone());
                }
                if self.needs(*b) {
                    acc(*b, gy.map(|g| -g));
                }
            }
            Op::Mul { a, b } => {
                let prod = |t: &Tensor| -> Result<Tensor> {
                    let d = gy.data().iter().zip(t.data()).map(|(g, v)| g * v).collect();
                    Tensor::new(gy.shape().to_vec(), d)
                };
                if self.needs(*a) {
                    acc(*a, prod(self.value(*b))?);
                }
                if self.needs(*b) {
                    acc(*b, prod(self.value(*a))?);
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    acc(*x, Tensor::full(shape_of(*x), gy.data()[0]));
                }
            }
            Op::Mean { x } => {
                if self.needs(*x) {
                    let n = self.value(*x).len() as f64;
                    acc(*x, Tensor::full(shape_of(*x), gy.data()[0] / n));
                }
            }
            Op::RowNorm { x } => {
                if self.needs(*x) {
                    let xt = self.value(*x);
                    let inner = xt.len() / gy.len().max(1);
                    let mut dx = vec![0.0; xt.len()];
                    for (r, (row, drow)) in xt.data().chunks(inner).zip(dx.chunks_mut(inner)).enumerate() {
                        let norm = node.value.data()[r];
                        if norm > 0.0 {
                            let s = gy.data()[r] / norm;
                            drow.iter_mut().zip(row).for_each(|(d, v)| *d = s * v);
                        }
                    }
                    acc(*x, Tensor::new(shape_of(*x), dx)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.value(*x).shape();
                let (n, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                let m = (n * inner) as f64;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, (gchunk, hchunk)) in gy.data().chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    let ch = i % c;
                    dbeta[ch] += gchunk.iter().sum::<f64>();
                    dgamma[ch] += gchunk.iter().zip(hchunk).map(|(a, b)| a * b).sum::<f64>();
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; gy.len()];
                    for (i, ((dchunk, gchunk), hchunk)) in dx
                        .chunks_mut(inner)
                        .zip(gy.data().chunks(inner))
                        .zip(xhat.chunks(inner))
                        .enumerate()
                    {
                        let ch = i % c;
                        let scale = g[ch] * inv_std[ch];
                        if *train {
                            let (sb, sg) = (dbeta[ch] / m, dgamma[ch] / m);
                            for ((d, gv), h) in dchunk.iter_mut().zip(gchunk).zip(hchunk) {
                                *d = scale * (gv - sb - h * sg);
                            }
                        } else {
                            for (d, gv) in dchunk.iter_mut().zip(gchunk) {
                                *d = scale * gv;
                            }
                        }
                    }
                    acc(*x, Tensor::new(shape_of(*x), dx)?);
                }
                if self.needs(*gamma) {
                    acc(*gamma, Tensor::new([c], dgamma)?);
                }
                if self.needs(*beta) {
                    acc(*beta, Tensor::new([c], dbeta)?);
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let dx = gy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    acc(*x, Tensor::new(shape_of(*x), dx)?);
                }
            }
            Op::Concat { a, b } => {
                let split = self.value(*a).len();
                if self.needs(*a) {
                    acc(*a, Tensor::new(shape_of(*a), gy.data()[..split].to_vec())?);
                }
                if self.needs(*b) {
                    acc(*b, Tensor::new(shape_of(*b), gy.data()[split..].to_vec())?);
                }
            }
            Op::Slice { x, start } => {
                if self.needs(*x) {
                    let inner = gy.len() / gy.shape()[0].max(1);
                    let mut dx = Tensor::zeros(shape_of(*x));
                    dx.data_mut()[start * inner..][..gy.len()].copy_from_slice(gy.data());
                    acc(*x, dx);
                }
            }
        }
        Ok(())
    }
}
