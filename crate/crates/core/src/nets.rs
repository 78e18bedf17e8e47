//! Generator, discriminator and projection network definitions.
//!
//! Every spatial layer is a stride-2, kernel-4, pad-1 (transposed)
//! convolution, so each block halves or doubles the lattice. The generator
//! starts from a `2³` lattice after its linear layer; the discriminator and
//! projection stacks end on one.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use voxsnap_tensor::{he_init, Bound, Mode, ParamId, ParamStore, RunningStats, Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;
pub const BASE_EXTENT: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub resolution: usize,
    pub latent_dim: usize,
    /// Channel count entering each generator upsampling block.
    pub gen_channels: Vec<usize>,
    /// Output channels of each discriminator / projection conv block.
    pub disc_channels: Vec<usize>,
    pub leaky_slope: f64,
    pub dropout: f64,
}

impl Architecture {
    /// The 16³ layout: G 128→64→32→1, D 1→32→64→128.
    pub fn desk(latent_dim: usize) -> Self {
        Self {
            resolution: 16,
            latent_dim,
            gen_channels: vec![128, 64, 32],
            disc_channels: vec![32, 64, 128],
            leaky_slope: 0.2,
            dropout: 0.5,
        }
    }

    /// Same topology with every channel count divided by `factor`.
    pub fn narrowed(mut self, factor: usize) -> Self {
        for c in self.gen_channels.iter_mut().chain(self.disc_channels.iter_mut()) {
            *c = (*c / factor).max(1);
        }
        self
    }

    pub fn blocks(&self) -> usize {
        (self.resolution / BASE_EXTENT).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 2 * BASE_EXTENT || !r.is_power_of_two() {
            return Err(Error::invalid(format!("resolution {r} is not a power of two >= 4")));
        }
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be >= 1"));
        }
        let n = self.blocks();
        if self.gen_channels.len() != n || self.disc_channels.len() != n {
            return Err(Error::invalid(format!(
                "resolution {r} needs {n} channel entries per network, got {} and {}",
                self.gen_channels.len(),
                self.disc_channels.len()
            )));
        }
        if self.gen_channels.iter().chain(&self.disc_channels).any(|&c| c == 0) {
            return Err(Error::invalid("channel counts must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Extent of the discriminator feature layer: `[C_f, 2, 2, 2]`.
    pub fn feature_shape(&self) -> [usize; 4] {
        let c = *self.disc_channels.last().unwrap_or(&0);
        [c, BASE_EXTENT, BASE_EXTENT, BASE_EXTENT]
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape().iter().product()
    }

    fn base_cells(&self) -> usize {
        BASE_EXTENT.pow(3)
    }
}

/// Parameters plus batch-norm running statistics of one network.
#[derive(Clone, Debug)]
pub struct NetState {
    pub params: ParamStore,
    pub stats: Vec<RunningStats>,
}

impl NetState {
    fn new() -> Self {
        Self {
            params: ParamStore::new(),
            stats: Vec::new(),
        }
    }

    /// Parameters and running statistics as named tensors.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        for (i, s) in self.stats.iter().enumerate() {
            let c = s.channels();
            out.push((format!("bn{i}.running_mean"), Tensor::new([c], s.mean.clone()).expect("shape")));
            out.push((format!("bn{i}.running_var"), Tensor::new([c], s.var.clone()).expect("shape")));
        }
        out
    }

    pub fn load(&mut self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        self.params.load_from(|n| tensors.get(n))?;
        for (i, s) in self.stats.iter_mut().enumerate() {
            for (suffix, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
                let name = format!("bn{i}.{suffix}");
                let t = tensors
                    .get(&name)
                    .ok_or_else(|| voxsnap_tensor::TensorError::MissingTensor(name.clone()))?;
                if t.shape() != [dst.len()] {
                    return Err(Error::invalid(format!("{name} has shape {:?}", t.shape())));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(())
    }

    pub fn bit_identical(&self, other: &NetState) -> bool {
        self.params.bit_identical(&other.params) && self.stats == other.stats
    }
}

/// How batch normalization (and dropout) behave in one forward pass.
pub enum Pass<'a> {
    /// Running statistics, no dropout.
    Infer,
    /// Batch statistics; dropout is active when an RNG is supplied and
    /// running statistics are updated only when `update_stats` is set.
    Train {
        rng: Option<&'a mut dyn rand::RngCore>,
        update_stats: bool,
    },
}

impl Pass<'_> {
    fn mode(&self) -> Mode {
        match self {
            Pass::Infer => Mode::Infer,
            Pass::Train { .. } => Mode::Train,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
}

fn add_bn(state: &mut NetState, name: &str, c: usize) -> BnIds {
    let gamma = state.params.add(format!("{name}.gamma"), Tensor::ones([c]));
    let beta = state.params.add(format!("{name}.beta"), Tensor::zeros([c]));
    state.stats.push(RunningStats::new(c));
    BnIds { gamma, beta }
}

fn apply_bn(
    tape: &mut Tape,
    bound: &Bound,
    ids: BnIds,
    stats: &mut RunningStats,
    x: Var,
    pass: &Pass<'_>,
) -> Result<Var> {
    let (g, b) = (bound.var(ids.gamma), bound.var(ids.beta));
    Ok(match pass {
        Pass::Infer => tape.batch_norm_infer(x, g, b, stats)?,
        Pass::Train { update_stats: true, .. } => tape.batch_norm_train(x, g, b, Some(stats))?,
        Pass::Train { update_stats: false, .. } => tape.batch_norm_train(x, g, b, None)?,
    })
}

/// Small-variance normal initialization for output heads.
fn head_init<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

fn check_latent(arch: &Architecture, shape: &[usize]) -> Result<usize> {
    match shape {
        [n, d] if *d == arch.latent_dim => Ok(*n),
        [_, d] => Err(Error::LatentDimMismatch {
            expected: arch.latent_dim,
            got: *d,
        }),
        _ => Err(Error::invalid(format!("latent batch must be [N, d], got {shape:?}"))),
    }
}

fn check_grid_batch(arch: &Architecture, shape: &[usize]) -> Result<usize> {
    let r = arch.resolution;
    match shape {
        [n, 1, d, h, w] if *d == r && *h == r && *w == r => Ok(*n),
        [_, 1, d, h, w] if d == h && h == w => Err(Error::ResolutionMismatch { expected: r, got: *d }),
        _ => Err(Error::invalid(format!("grid batch must be [N, 1, {r}, {r}, {r}], got {shape:?}"))),
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub arch: Architecture,
    pub state: NetState,
    fc_w: ParamId,
    fc_b: ParamId,
    bns: Vec<BnIds>,
    deconvs: Vec<ParamId>,
    out_bias: ParamId,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut state = NetState::new();
        let c0 = arch.gen_channels[0];
        let cells = arch.base_cells();
        let d = arch.latent_dim;
        let fc_w = state.params.add("fc.weight", he_init([c0 * cells, d], d, rng)?);
        let fc_b = state.params.add("fc.bias", Tensor::zeros([c0 * cells]));
        let mut bns = vec![add_bn(&mut state, "bn0", c0)];
        let mut deconvs = Vec::new();
        let n = arch.blocks();
        for i in 0..n {
            let cin = arch.gen_channels[i];
            let cout = if i + 1 < n { arch.gen_channels[i + 1] } else { 1 };
            // Each output cell of a stride-2 transposed conv sees k³/8 taps per input channel.
            let fan_in = cin * KERNEL.pow(3) / STRIDE.pow(3);
            let shape = [cin, cout, KERNEL, KERNEL, KERNEL];
            let w = if i + 1 < n {
                he_init(shape, fan_in, rng)?
            } else {
                head_init(shape, fan_in, rng)
            };
            deconvs.push(state.params.add(format!("deconv{i}.weight"), w));
            if i + 1 < n {
                bns.push(add_bn(&mut state, &format!("bn{}", i + 1), cout));
            }
        }
        let out_bias = state.params.add("deconv_out.bias", Tensor::zeros([1]));
        Ok(Self {
            arch: arch.clone(),
            state,
            fc_w,
            fc_b,
            bns,
            deconvs,
            out_bias,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.state.params
    }

    /// Records `z: [N, d]` → occupancy `[N, 1, R, R, R]` in (0, 1).
    ///
    /// `stats` receives running-statistic updates when the pass asks for
    /// them; pass a scratch copy otherwise.
    pub fn record(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        pass: &mut Pass<'_>,
        stats: &mut [RunningStats],
    ) -> Result<Var> {
        let n = check_latent(&self.arch, tape.value(z).shape())?;
        let c0 = self.arch.gen_channels[0];
        let b = BASE_EXTENT;
        let mut h = tape.linear(z, bound.var(self.fc_w), Some(bound.var(self.fc_b)))?;
        h = tape.reshape(h, &[n, c0, b, b, b])?;
        h = apply_bn(tape, bound, self.bns[0], &mut stats[0], h, pass)?;
        h = tape.relu(h)?;
        let last = self.deconvs.len() - 1;
        for (i, &w) in self.deconvs.iter().enumerate() {
            h = tape.conv_transpose3d(h, bound.var(w), STRIDE, PAD)?;
            if i < last {
                h = apply_bn(tape, bound, self.bns[i + 1], &mut stats[i + 1], h, pass)?;
                h = tape.relu(h)?;
            } else {
                h = tape.channel_bias(h, bound.var(self.out_bias))?;
                h = tape.sigmoid(h)?;
            }
        }
        Ok(h)
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let mut stats = self.state.stats.clone();
        self.record(tape, bound, z, &mut Pass::Infer, &mut stats)
    }

    /// Training-mode forward pass that updates the running statistics.
    pub fn forward_train(&mut self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let mut stats = std::mem::take(&mut self.state.stats);
        let mut pass = Pass::Train {
            rng: None,
            update_stats: true,
        };
        let out = self.record(tape, bound, z, &mut pass, &mut stats);
        self.state.stats = stats;
        out
    }

    /// Inference-mode generation without gradients: `[N, d]` → `[N, 1, R, R, R]`.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.state.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, &bound, zv)?;
        Ok(tape.value(out).clone())
    }
}

/// Conv → batch norm → leaky ReLU blocks shared by the discriminator and the
/// projection network.
#[derive(Clone, Debug)]
struct ConvStack {
    convs: Vec<ParamId>,
    bns: Vec<BnIds>,
}

impl ConvStack {
    fn new<R: Rng + ?Sized>(arch: &Architecture, state: &mut NetState, rng: &mut R) -> Result<Self> {
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut cin = 1;
        for (i, &cout) in arch.disc_channels.iter().enumerate() {
            let fan_in = cin * KERNEL.pow(3);
            let w = he_init([cout, cin, KERNEL, KERNEL, KERNEL], fan_in, rng)?;
            convs.push(state.params.add(format!("conv{i}.weight"), w));
            bns.push(add_bn(state, &format!("bn{i}"), cout));
            cin = cout;
        }
        Ok(Self { convs, bns })
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        arch: &Architecture,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        pass: &mut Pass<'_>,
        stats: &mut [RunningStats],
        dropout: f64,
    ) -> Result<Var> {
        let mut h = x;
        for (i, &w) in self.convs.iter().enumerate() {
            h = tape.conv3d(h, bound.var(w), STRIDE, PAD)?;
            h = apply_bn(tape, bound, self.bns[i], &mut stats[i], h, pass)?;
            h = tape.leaky_relu(h, arch.leaky_slope)?;
            if dropout > 0.0 {
                let mode = pass.mode();
                if let Pass::Train { rng: Some(rng), .. } = pass {
                    h = tape.dropout(h, dropout, mode, rng)?;
                }
            }
        }
        Ok(h)
    }
}

/// Discriminator outputs from one pass.
#[derive(Clone, Copy, Debug)]
pub struct DiscOutput {
    /// `[N, 1]` pre-sigmoid scores.
    pub logits: Var,
    /// `[N, 1]` realism scores in (0, 1).
    pub score: Var,
    /// `[N, C_f, 2, 2, 2]` feature layer.
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub arch: Architecture,
    pub state: NetState,
    stack: ConvStack,
    head_w: ParamId,
    head_b: ParamId,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut state = NetState::new();
        let stack = ConvStack::new(arch, &mut state, rng)?;
        let f = arch.feature_len();
        let head_w = state.params.add("head.weight", head_init([1, f], f, rng));
        let head_b = state.params.add("head.bias", Tensor::zeros([1]));
        Ok(Self {
            arch: arch.clone(),
            state,
            stack,
            head_w,
            head_b,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.state.params
    }

    pub fn record(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        pass: &mut Pass<'_>,
        stats: &mut [RunningStats],
    ) -> Result<DiscOutput> {
        let n = check_grid_batch(&self.arch, tape.value(x).shape())?;
        let features = self.stack.record(&self.arch, tape, bound, x, pass, stats, self.arch.dropout)?;
        let flat = tape.reshape(features, &[n, self.arch.feature_len()])?;
        let logits = tape.linear(flat, bound.var(self.head_w), Some(bound.var(self.head_b)))?;
        let score = tape.sigmoid(logits)?;
        Ok(DiscOutput { logits, score, features })
    }

    /// Inference-mode pass: running statistics, dropout off.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<DiscOutput> {
        let mut stats = self.state.stats.clone();
        self.record(tape, bound, x, &mut Pass::Infer, &mut stats)
    }

    /// Training-mode pass with dropout drawn from `rng`.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        rng: &mut dyn rand::RngCore,
        update_stats: bool,
    ) -> Result<DiscOutput> {
        let mut stats = std::mem::take(&mut self.state.stats);
        let mut pass = Pass::Train {
            rng: Some(rng),
            update_stats,
        };
        let out = self.record(tape, bound, x, &mut pass, &mut stats);
        self.state.stats = stats;
        out
    }

    /// Inference-mode scores and flattened features `[N, C_f·8]` without gradients.
    pub fn evaluate(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.state.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv)?;
        let n = tape.value(out.score).len();
        let features = tape.value(out.features).clone().reshape([n, self.arch.feature_len()])?;
        Ok((tape.value(out.score).data().to_vec(), features))
    }
}

#[derive(Clone, Debug)]
pub struct ProjectionNet {
    pub arch: Architecture,
    pub state: NetState,
    stack: ConvStack,
    head_w: ParamId,
    head_b: ParamId,
}

impl ProjectionNet {
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut state = NetState::new();
        let stack = ConvStack::new(arch, &mut state, rng)?;
        let f = arch.feature_len();
        let head_w = state.params.add("head.weight", head_init([arch.latent_dim, f], f, rng));
        let head_b = state.params.add("head.bias", Tensor::zeros([arch.latent_dim]));
        Ok(Self {
            arch: arch.clone(),
            state,
            stack,
            head_w,
            head_b,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.state.params
    }

    /// Records `x: [N, 1, R, R, R]` → latent codes `[N, d]` in [−1, 1].
    pub fn record(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        pass: &mut Pass<'_>,
        stats: &mut [RunningStats],
    ) -> Result<Var> {
        let n = check_grid_batch(&self.arch, tape.value(x).shape())?;
        let h = self.stack.record(&self.arch, tape, bound, x, pass, stats, 0.0)?;
        let flat = tape.reshape(h, &[n, self.arch.feature_len()])?;
        let z = tape.linear(flat, bound.var(self.head_w), Some(bound.var(self.head_b)))?;
        Ok(tape.tanh(z)?)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut stats = self.state.stats.clone();
        self.record(tape, bound, x, &mut Pass::Infer, &mut stats)
    }

    pub fn forward_train(&mut self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut stats = std::mem::take(&mut self.state.stats);
        let mut pass = Pass::Train {
            rng: None,
            update_stats: true,
        };
        let out = self.record(tape, bound, x, &mut pass, &mut stats);
        self.state.stats = stats;
        out
    }

    /// Inference-mode projection without gradients: `[N, 1, R, R, R]` → `[N, d]`.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.state.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(z).clone())
    }
}
