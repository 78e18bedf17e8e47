//! Adversarial training and latent-space sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use voxsnap_tensor::{Adam, AdamConfig, Gradients, ParamStore, Tape, Tensor, Var};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nets::{Architecture, Discriminator, Generator};
use crate::voxel::ContinuousGrid;

/// Floor applied inside every log of the adversarial losses.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanTrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub epochs: usize,
    pub latent_dim: usize,
    pub seed: u64,
    pub dropout: f64,
    /// Discriminator updates are skipped while its batch accuracy exceeds this.
    pub d_accuracy_cap: f64,
    /// Channel widths; `None` selects the default layout for the resolution.
    pub gen_channels: Option<Vec<usize>>,
    pub disc_channels: Option<Vec<usize>>,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GanTrainConfig {
    /// Hyperparameters reported for the full 64³ model.
    pub fn full_scale() -> Self {
        Self {
            lr_g: 0.0025,
            lr_d: 1e-5,
            batch_size: 100,
            beta1: 0.5,
            epochs: 30,
            latent_dim: 200,
            seed: 0,
            dropout: 0.5,
            d_accuracy_cap: 0.95,
            gen_channels: None,
            disc_channels: None,
        }
    }

    /// Reference 16³ configuration.
    pub fn desk() -> Self {
        Self {
            lr_g: 0.001,
            lr_d: 5e-5,
            batch_size: 32,
            latent_dim: 32,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::invalid(format!("beta1 {} outside [0, 1)", self.beta1)));
        }
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.d_accuracy_cap > 0.0 && self.d_accuracy_cap <= 1.0) {
            return Err(Error::invalid("d_accuracy_cap must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn architecture(&self, resolution: usize) -> Result<Architecture> {
        let blocks = (resolution / crate::nets::BASE_EXTENT).max(1).trailing_zeros() as usize;
        let disc_default: Vec<usize> = (0..blocks).map(|i| 32 << i).collect();
        let gen_default: Vec<usize> = disc_default.iter().rev().map(|c| c * 4).collect::<Vec<_>>();
        let gen_default = if resolution == 16 { vec![128, 64, 32] } else { gen_default };
        let arch = Architecture {
            resolution,
            latent_dim: self.latent_dim,
            gen_channels: self.gen_channels.clone().unwrap_or(gen_default),
            disc_channels: self.disc_channels.clone().unwrap_or(disc_default),
            leaky_slope: 0.2,
            dropout: self.dropout,
        };
        arch.validate()?;
        Ok(arch)
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            ..AdamConfig::with_lr(lr)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub g_loss: f64,
    pub d_loss: f64,
    pub d_real_acc: f64,
    pub d_fake_acc: f64,
    /// False when the accuracy cap skipped the discriminator update.
    pub d_updated: bool,
    pub timestamp_ms: u128,
}

impl StepRecord {
    pub fn d_acc(&self) -> f64 {
        0.5 * (self.d_real_acc + self.d_fake_acc)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn push(&mut self, rec: StepRecord) {
        debug_assert!(self.steps.last().is_none_or(|l| l.step < rec.step));
        self.steps.push(rec);
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(move |s| s.epoch == epoch)
    }

    /// Mean discriminator accuracy over one epoch.
    pub fn epoch_d_acc(&self, epoch: usize) -> Option<f64> {
        let accs: Vec<f64> = self.epoch(epoch).map(StepRecord::d_acc).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn last_epoch(&self) -> Option<usize> {
        self.steps.last().map(|s| s.epoch)
    }
}

pub fn sample_latents<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Tensor {
    let data = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new([n, d], data).expect("shape")
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn collect_grads(grads: &mut Gradients, vars: &[Var], params: &ParamStore) -> Vec<Tensor> {
    vars.iter()
        .zip(params.iter())
        .map(|(&v, (_, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect()
}

fn frac(values: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    values.iter().filter(|&&v| pred(v)).count() as f64 / values.len().max(1) as f64
}

/// Discriminator loss `−mean log s_real − mean log(1 − s_fake)` over a
/// `[real; fake]` score column.
pub fn record_d_loss(tape: &mut Tape, score: Var, n_real: usize) -> Result<Var> {
    let n = tape.value(score).shape()[0];
    let real = tape.slice(score, 0, n_real)?;
    let fake = tape.slice(score, n_real, n - n_real)?;
    let log_real = tape.clamped_log(real, LOG_EPS)?;
    let one_minus = tape.affine(fake, -1.0, 1.0)?;
    let log_fake = tape.clamped_log(one_minus, LOG_EPS)?;
    let a = tape.mean(log_real)?;
    let b = tape.mean(log_fake)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, -1.0)?)
}

/// Generator loss `−mean log s_fake` (the non-saturating form).
pub fn record_g_loss(tape: &mut Tape, score: Var, n_real: usize) -> Result<Var> {
    let n = tape.value(score).shape()[0];
    let fake = tape.slice(score, n_real, n - n_real)?;
    let log_fake = tape.clamped_log(fake, LOG_EPS)?;
    let m = tape.mean(log_fake)?;
    Ok(tape.scale(m, -1.0)?)
}

/// Owns both networks, their optimizers and the training RNG.
pub struct GanTrainer {
    pub config: GanTrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub rng: ChaCha8Rng,
    pub log: TrainLog,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

impl GanTrainer {
    pub fn new(resolution: usize, config: GanTrainConfig) -> Result<Self> {
        config.validate()?;
        let arch = config.architecture(resolution)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(&arch, &mut rng)?;
        let discriminator = Discriminator::new(&arch, &mut rng)?;
        let adam_g = Adam::new(config.adam(config.lr_g), generator.params());
        let adam_d = Adam::new(config.adam(config.lr_d), discriminator.params());
        Ok(Self {
            config,
            generator,
            discriminator,
            adam_g,
            adam_d,
            rng,
            log: TrainLog::default(),
            epoch: 0,
            step: 0,
        })
    }

    fn fake_batch(&mut self, n: usize) -> Result<Tensor> {
        let z = sample_latents(n, self.config.latent_dim, &mut self.rng);
        let mut tape = Tape::new();
        let bound = self.generator.state.params.bind(&mut tape, false);
        let zv = tape.constant(z);
        let out = self.generator.forward_train(&mut tape, &bound, zv)?;
        Ok(tape.value(out).clone())
    }

    /// Discriminator loss and accuracies on `[real; fake]`, updating its
    /// parameters unless the accuracy cap is hit.
    pub fn discriminator_step(&mut self, real: &Tensor, fake: &Tensor) -> Result<(f64, f64, f64, bool)> {
        let n = real.shape()[0];
        let mut tape = Tape::new();
        let bound = self.discriminator.state.params.bind(&mut tape, true);
        let rv = tape.constant(real.clone());
        let fv = tape.constant(fake.clone());
        let x = tape.concat(rv, fv)?;
        let out = self.discriminator.forward_train(&mut tape, &bound, x, &mut self.rng, true)?;
        let loss = record_d_loss(&mut tape, out.score, n)?;
        let scores = tape.value(out.score).data();
        let real_acc = frac(&scores[..n], |s| s > 0.5);
        let fake_acc = frac(&scores[n..], |s| s < 0.5);
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                what: "discriminator loss",
                step: self.step as usize,
            });
        }
        let update = 0.5 * (real_acc + fake_acc) <= self.config.d_accuracy_cap;
        if update {
            let mut grads = tape.backward(loss)?;
            let grads = collect_grads(&mut grads, bound.vars(), self.discriminator.params());
            drop(tape);
            self.adam_d.step(&mut self.discriminator.state.params, &grads)?;
        }
        Ok((loss_value, real_acc, fake_acc, update))
    }

    /// One generator update against the current discriminator.
    pub fn generator_step(&mut self, real: &Tensor) -> Result<f64> {
        let n = real.shape()[0];
        let z = sample_latents(n, self.config.latent_dim, &mut self.rng);
        let mut tape = Tape::new();
        let g_bound = self.generator.state.params.bind(&mut tape, true);
        let d_bound = self.discriminator.state.params.bind(&mut tape, false);
        let zv = tape.constant(z);
        let fake = self.generator.forward_train(&mut tape, &g_bound, zv)?;
        let rv = tape.constant(real.clone());
        let x = tape.concat(rv, fake)?;
        let out = self.discriminator.forward_train(&mut tape, &d_bound, x, &mut self.rng, false)?;
        let loss = record_g_loss(&mut tape, out.score, n)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                what: "generator loss",
                step: self.step as usize,
            });
        }
        let mut grads = tape.backward(loss)?;
        let grads = collect_grads(&mut grads, g_bound.vars(), self.generator.params());
        drop(tape);
        self.adam_g.step(&mut self.generator.state.params, &grads)?;
        Ok(loss_value)
    }

    pub fn train_step(&mut self, real: &Tensor) -> Result<StepRecord> {
        let n = real.shape()[0];
        let fake = self.fake_batch(n)?;
        let (d_loss, d_real_acc, d_fake_acc, d_updated) = self.discriminator_step(real, &fake)?;
        if !d_updated {
            tracing::debug!(step = self.step, "discriminator update skipped at accuracy cap");
        }
        let g_loss = self.generator_step(real)?;
        self.step += 1;
        let rec = StepRecord {
            step: self.step,
            epoch: self.epoch,
            g_loss,
            d_loss,
            d_real_acc,
            d_fake_acc,
            d_updated,
            timestamp_ms: now_ms(),
        };
        self.log.push(rec.clone());
        Ok(rec)
    }

    /// One pass over the train split; `on_step` sees every record.
    pub fn train_epoch(&mut self, ds: &Dataset, on_step: &mut dyn FnMut(&StepRecord)) -> Result<()> {
        let mut shuffle_rng = ChaCha8Rng::from_rng(&mut self.rng);
        let batches = ds.batches(Split::Train, self.config.batch_size, true, &mut shuffle_rng)?;
        for real in batches {
            let rec = self.train_step(&real)?;
            on_step(&rec);
        }
        self.epoch += 1;
        Ok(())
    }
}

pub struct GanModels {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub log: TrainLog,
}

/// Callbacks invoked during [`train_gan`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub on_step: Option<&'a mut dyn FnMut(&StepRecord)>,
    /// Called after every epoch, typically to write a checkpoint.
    pub on_epoch: Option<&'a mut dyn FnMut(&GanTrainer) -> Result<()>>,
}

pub fn train_gan(ds: &Dataset, config: &GanTrainConfig, hooks: TrainHooks<'_>) -> Result<GanModels> {
    if ds.split(Split::Train).next().is_none() {
        return Err(Error::EmptySplit(Split::Train));
    }
    let mut trainer = GanTrainer::new(ds.resolution(), config.clone())?;
    let mut noop = |_: &StepRecord| {};
    let on_step = hooks.on_step.unwrap_or(&mut noop);
    let mut on_epoch = hooks.on_epoch;
    for _ in 0..config.epochs {
        trainer.train_epoch(ds, on_step)?;
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&trainer)?;
        }
    }
    Ok(GanModels {
        generator: trainer.generator,
        discriminator: trainer.discriminator,
        log: trainer.log,
    })
}

/// Generates each latent row on its own so results do not depend on batch
/// composition.
pub fn generate_grids(g: &Generator, z: &Tensor) -> Result<Vec<ContinuousGrid>> {
    let d = g.arch.latent_dim;
    if z.rank() != 2 || z.shape()[1] != d {
        return Err(Error::LatentDimMismatch {
            expected: d,
            got: *z.shape().last().unwrap_or(&0),
        });
    }
    let r = g.arch.resolution;
    z.data()
        .chunks(d)
        .map(|row| {
            let out = g.generate(&Tensor::new([1, d], row.to_vec())?)?;
            ContinuousGrid::new(r, out.into_data())
        })
        .collect()
}

pub fn sample_shapes<R: Rng + ?Sized>(g: &Generator, n: usize, rng: &mut R) -> Result<Vec<(Vec<f64>, ContinuousGrid)>> {
    if n == 0 {
        return Err(Error::invalid("n must be >= 1"));
    }
    let z = sample_latents(n, g.arch.latent_dim, rng);
    let grids = generate_grids(g, &z)?;
    Ok(z.data().chunks(g.arch.latent_dim).map(<[f64]>::to_vec).zip(grids).collect())
}

/// `G(λ·z_r + (1−λ)·z_i)` for `steps` values of λ evenly spaced over [0, 1].
pub fn interpolate(g: &Generator, z_r: &[f64], z_i: &[f64], steps: usize) -> Result<Vec<ContinuousGrid>> {
    let d = g.arch.latent_dim;
    for z in [z_r, z_i] {
        if z.len() != d {
            return Err(Error::LatentDimMismatch { expected: d, got: z.len() });
        }
    }
    if steps < 2 {
        return Err(Error::invalid("interpolation needs at least 2 steps"));
    }
    let mut data = Vec::with_capacity(steps * d);
    for k in 0..steps {
        let lambda = k as f64 / (steps - 1) as f64;
        data.extend(z_r.iter().zip(z_i).map(|(r, i)| lambda * r + (1.0 - lambda) * i));
    }
    generate_grids(g, &Tensor::new([steps, d], data)?)
}
