//! Dissimilarity and realism functionals, the projection network training
//! loop, latent refinement and the SNAP pipeline.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxsnap_tensor::{Adam, AdamConfig, Tape, Tensor, Var};

use crate::dataset::{grids_to_tensor, Category, Dataset, Split};
use crate::error::{Error, Result};
use crate::nets::{Discriminator, Generator, ProjectionNet};
use crate::voxel::{
    binarize, drop_voxels, Axis, Connectivity, ContinuousGrid, Keep, Postprocess, VoxelGrid, DEFAULT_MIN_FRACTION,
    DEFAULT_THRESHOLD,
};

/// Floor inside the realism log of the refinement objective.
pub const REALISM_EPS: f64 = 1e-12;
/// Step halvings tried before refinement gives up.
pub const MAX_HALVINGS: usize = 5;

/// Occupancy that can be fed to the discriminator.
pub trait Occupancy {
    fn dim(&self) -> usize;
    fn values(&self) -> Vec<f64>;

    /// `[1, 1, D, D, D]` tensor.
    fn to_tensor(&self) -> Tensor {
        let d = self.dim();
        Tensor::new([1, 1, d, d, d], self.values()).expect("cubic grid")
    }
}

impl Occupancy for VoxelGrid {
    fn dim(&self) -> usize {
        VoxelGrid::dim(self)
    }

    fn values(&self) -> Vec<f64> {
        self.to_values()
    }
}

impl Occupancy for ContinuousGrid {
    fn dim(&self) -> usize {
        ContinuousGrid::dim(self)
    }

    fn values(&self) -> Vec<f64> {
        ContinuousGrid::values(self).to_vec()
    }
}

fn check_resolution(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::ResolutionMismatch { expected, got });
    }
    Ok(())
}

/// Feature-layer activations (inference mode) as a flat vector.
pub fn features(d: &Discriminator, x: &impl Occupancy) -> Result<Vec<f64>> {
    check_resolution(d.arch.resolution, x.dim())?;
    Ok(d.evaluate(&x.to_tensor())?.1.into_data())
}

/// Euclidean distance between two feature vectors.
pub fn feature_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `‖conv15(x1) − conv15(x2)‖₂` with deterministic features.
pub fn dissimilarity(d: &Discriminator, x1: &impl Occupancy, x2: &impl Occupancy) -> Result<f64> {
    Ok(feature_distance(&features(d, x1)?, &features(d, x2)?))
}

/// Discriminator score in (0, 1), inference mode.
pub fn realism(d: &Discriminator, x: &impl Occupancy) -> Result<f64> {
    check_resolution(d.arch.resolution, x.dim())?;
    Ok(d.evaluate(&x.to_tensor())?.0[0])
}

/// Scores and per-row features for a `[N, 1, R, R, R]` batch.
pub fn evaluate_batch(d: &Discriminator, x: &Tensor) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let (scores, feats) = d.evaluate(x)?;
    let f = d.arch.feature_len();
    Ok((scores, feats.data().chunks(f).map(<[f64]>::to_vec).collect()))
}

/// `P_n(x)` in inference mode.
pub fn project_network(p: &ProjectionNet, x: &impl Occupancy) -> Result<Vec<f64>> {
    check_resolution(p.arch.resolution, x.dim())?;
    Ok(p.project(&x.to_tensor())?.into_data())
}

pub fn generate_one(g: &Generator, z: &[f64]) -> Result<ContinuousGrid> {
    if z.len() != g.arch.latent_dim {
        return Err(Error::LatentDimMismatch {
            expected: g.arch.latent_dim,
            got: z.len(),
        });
    }
    let out = g.generate(&Tensor::new([1, z.len()], z.to_vec())?)?;
    ContinuousGrid::new(g.arch.resolution, out.into_data())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnapConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub refine_steps: usize,
    pub refine_lr: f64,
    pub threshold: f64,
    pub component_removal: bool,
    pub symmetrize: bool,
    pub category: Option<Category>,
}

impl Default for SnapConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            refine_steps: 30,
            refine_lr: 0.05,
            threshold: DEFAULT_THRESHOLD,
            component_removal: true,
            symmetrize: true,
            category: None,
        }
    }
}

impl SnapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::invalid("lambda1 and lambda2 must be >= 0"));
        }
        if !(self.refine_lr > 0.0 && self.refine_lr.is_finite()) {
            return Err(Error::invalid("refine_lr must be positive"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }

    pub fn postprocess(&self) -> Postprocess {
        Postprocess {
            component_removal: self.component_removal,
            min_fraction: DEFAULT_MIN_FRACTION,
            connectivity: Connectivity::TwentySix,
            symmetrize: self.symmetrize,
            axis: Axis::X,
            keep: Keep::Low,
        }
    }

    pub fn apply(&mut self, o: &SnapOverrides) {
        macro_rules! take {
            ($($f:ident),*) => { $(if let Some(v) = o.$f { self.$f = v; })* };
        }
        take!(lambda1, lambda2, refine_steps, refine_lr, threshold, component_removal, symmetrize);
    }
}

/// Partial [`SnapConfig`] supplied per request.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapOverrides {
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub refine_steps: Option<usize>,
    pub refine_lr: Option<f64>,
    pub threshold: Option<f64>,
    pub component_removal: Option<bool>,
    pub symmetrize: Option<bool>,
}

/// One evaluation of `λ₁·dissimilarity(x, G(z)) − λ₂·log realism(G(z))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub dissimilarity: f64,
    pub realism: f64,
}

/// The refinement objective for one target grid with frozen G and D.
pub struct Objective<'a> {
    g: &'a Generator,
    d: &'a Discriminator,
    target: Tensor,
    lambda1: f64,
    lambda2: f64,
}

impl<'a> Objective<'a> {
    pub fn new(g: &'a Generator, d: &'a Discriminator, x: &impl Occupancy, lambda1: f64, lambda2: f64) -> Result<Self> {
        check_resolution(g.arch.resolution, x.dim())?;
        check_resolution(d.arch.resolution, x.dim())?;
        if g.arch.feature_len() != d.arch.feature_len() {
            return Err(Error::invalid("generator and discriminator architectures differ"));
        }
        let f = d.arch.feature_len();
        let target = Tensor::new([1, f], features(d, x)?)?;
        Ok(Self {
            g,
            d,
            target,
            lambda1,
            lambda2,
        })
    }

    fn record(&self, z: &[f64], grad: bool) -> Result<(Tape, Var, Var, ObjectiveValue)> {
        let latent = self.g.arch.latent_dim;
        if z.len() != latent {
            return Err(Error::LatentDimMismatch {
                expected: latent,
                got: z.len(),
            });
        }
        let mut tape = Tape::new();
        let gb = self.g.state.params.bind(&mut tape, false);
        let db = self.d.state.params.bind(&mut tape, false);
        let zv = tape.leaf(Tensor::new([1, latent], z.to_vec())?, grad);
        let x = self.g.forward(&mut tape, &gb, zv)?;
        let out = self.d.forward(&mut tape, &db, x)?;
        let flat = tape.reshape(out.features, &[1, self.d.arch.feature_len()])?;
        let target = tape.constant(self.target.clone());
        let diff = tape.sub(flat, target)?;
        let norm = tape.row_norm(diff)?;
        let norm = tape.sum(norm)?;
        let log_r = tape.clamped_log(out.score, REALISM_EPS)?;
        let log_r = tape.sum(log_r)?;
        let a = tape.scale(norm, self.lambda1)?;
        let b = tape.scale(log_r, -self.lambda2)?;
        let f = tape.add(a, b)?;
        let value = ObjectiveValue {
            value: tape.value(f).data()[0],
            dissimilarity: tape.value(norm).data()[0],
            realism: tape.value(out.score).data()[0],
        };
        if !value.value.is_finite() {
            return Err(Error::NonFinite { what: "objective", step: 0 });
        }
        Ok((tape, zv, f, value))
    }

    pub fn value(&self, z: &[f64]) -> Result<ObjectiveValue> {
        Ok(self.record(z, false)?.3)
    }

    pub fn value_and_grad(&self, z: &[f64]) -> Result<(ObjectiveValue, Vec<f64>)> {
        let (tape, zv, f, value) = self.record(z, true)?;
        let grads = tape.backward(f)?;
        let g = grads.get(zv).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; z.len()]);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "objective gradient", step: 0 });
        }
        Ok((value, g))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub z: Vec<f64>,
    pub initial: ObjectiveValue,
    pub last: ObjectiveValue,
    pub steps_taken: usize,
}

/// Gradient descent with backtracking: at most `steps` accepted steps, each
/// strictly decreasing the objective; stops early after `MAX_HALVINGS`
/// failed halvings.
pub fn descend(obj: &Objective<'_>, z0: &[f64], steps: usize, lr: f64) -> Result<Refinement> {
    let (initial, mut grad) = obj.value_and_grad(z0)?;
    let mut z = z0.to_vec();
    let mut current = initial.clone();
    let mut steps_taken = 0;
    'outer: while steps_taken < steps {
        let mut eta = lr;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = z.iter().zip(&grad).map(|(v, g)| v - eta * g).collect();
            let (val, g) = obj.value_and_grad(&cand)?;
            if val.value < current.value {
                z = cand;
                current = val;
                grad = g;
                steps_taken += 1;
                continue 'outer;
            }
            eta *= 0.5;
        }
        break;
    }
    Ok(Refinement {
        z,
        initial,
        last: current,
        steps_taken,
    })
}

/// `P_R`: refinement from `z0` under the SNAP objective.
pub fn refine_latent(
    z0: &[f64],
    x: &impl Occupancy,
    g: &Generator,
    d: &Discriminator,
    cfg: &SnapConfig,
) -> Result<Refinement> {
    cfg.validate()?;
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("z0 is not finite"));
    }
    let obj = Objective::new(g, d, x, cfg.lambda1, cfg.lambda2)?;
    descend(&obj, z0, cfg.refine_steps, cfg.refine_lr)
}

/// Plain descent on the dissimilarity alone, from an arbitrary start.
pub fn gradient_baseline_project(
    x: &impl Occupancy,
    g: &Generator,
    d: &Discriminator,
    z_init: &[f64],
    steps: usize,
    lr: f64,
) -> Result<Refinement> {
    if z_init.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("z_init is not finite"));
    }
    if !(lr > 0.0) {
        return Err(Error::invalid("lr must be positive"));
    }
    let obj = Objective::new(g, d, x, 1.0, 0.0)?;
    descend(&obj, z_init, steps, lr)
}

/// Trained networks sharing one architecture.
#[derive(Clone, Debug)]
pub struct Models {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub projection: ProjectionNet,
}

impl Models {
    pub fn new(generator: Generator, discriminator: Discriminator, projection: ProjectionNet) -> Result<Self> {
        let a = &generator.arch;
        for other in [&discriminator.arch, &projection.arch] {
            if other.resolution != a.resolution || other.latent_dim != a.latent_dim {
                return Err(Error::invalid("networks disagree on resolution or latent dimension"));
            }
        }
        Ok(Self {
            generator,
            discriminator,
            projection,
        })
    }

    pub fn resolution(&self) -> usize {
        self.generator.arch.resolution
    }

    pub fn latent_dim(&self) -> usize {
        self.generator.arch.latent_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapMetrics {
    pub dissimilarity_initial: f64,
    pub dissimilarity_final: f64,
    pub realism_initial: f64,
    pub realism_final: f64,
    pub steps_taken: usize,
    /// Seconds; excluded from serialized results so identical requests
    /// produce identical bytes.
    #[serde(skip)]
    pub wall_time: f64,
}

pub const WARN_EMPTY_OUTPUT: &str = "empty_output";

#[derive(Clone, Debug, PartialEq)]
pub struct SnapResult {
    pub grid: VoxelGrid,
    pub z_initial: Vec<f64>,
    pub z_final: Vec<f64>,
    pub metrics: SnapMetrics,
    pub warnings: Vec<String>,
}

/// JSON form: grid as base64 VXGB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapResultJson {
    pub grid: String,
    pub z_initial: Vec<f64>,
    pub z_final: Vec<f64>,
    pub metrics: SnapMetrics,
    pub warnings: Vec<String>,
}

impl SnapResult {
    pub fn to_json(&self) -> SnapResultJson {
        SnapResultJson {
            grid: crate::voxel::to_base64(&self.grid),
            z_initial: self.z_initial.clone(),
            z_final: self.z_final.clone(),
            metrics: self.metrics.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

/// Binarizes and postprocesses a generator output.
pub fn finish_grid(out: &ContinuousGrid, cfg: &SnapConfig) -> Result<VoxelGrid> {
    cfg.postprocess().apply(&binarize(out, cfg.threshold)?)
}

/// Project → refine → generate → binarize → postprocess.
pub fn snap(x: &VoxelGrid, models: &Models, cfg: &SnapConfig) -> Result<SnapResult> {
    let start = Instant::now();
    cfg.validate()?;
    check_resolution(models.resolution(), x.dim())?;
    let z_initial = project_network(&models.projection, x)?;
    let r = refine_latent(&z_initial, x, &models.generator, &models.discriminator, cfg)?;
    let out = generate_one(&models.generator, &r.z)?;
    let grid = finish_grid(&out, cfg)?;
    let mut warnings = Vec::new();
    if grid.is_empty() {
        warnings.push(WARN_EMPTY_OUTPUT.to_string());
    }
    Ok(SnapResult {
        grid,
        z_initial,
        z_final: r.z,
        metrics: SnapMetrics {
            dissimilarity_initial: r.initial.dissimilarity,
            dissimilarity_final: r.last.dissimilarity,
            realism_initial: r.initial.realism,
            realism_final: r.last.realism,
            steps_taken: r.steps_taken,
            wall_time: start.elapsed().as_secs_f64(),
        },
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub drop_fraction: f64,
    pub seed: u64,
}

impl Default for ProjTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            batch_size: 50,
            epochs: 20,
            beta1: 0.5,
            drop_fraction: 0.5,
            seed: 0,
        }
    }
}

impl ProjTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.drop_fraction) {
            return Err(Error::invalid("drop_fraction outside [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::invalid("beta1 outside [0, 1)"));
        }
        Ok(())
    }
}

/// Mean training loss per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjLog {
    pub epoch_losses: Vec<f64>,
}

/// Trains `P_n` to minimise `mean ‖conv15(x) − conv15(G(P_n(x)))‖` over
/// voxel-dropped train shapes; G and D are only read.
pub fn train_projection(
    ds: &Dataset,
    g: &Generator,
    d: &Discriminator,
    cfg: &ProjTrainConfig,
    mut on_epoch: impl FnMut(usize, f64, &ProjectionNet) -> Result<()>,
) -> Result<(ProjectionNet, ProjLog)> {
    cfg.validate()?;
    check_resolution(g.arch.resolution, ds.resolution())?;
    check_resolution(d.arch.resolution, ds.resolution())?;
    let g_before = g.state.clone();
    let d_before = d.state.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = ProjectionNet::new(&g.arch, &mut rng)?;
    let mut adam = Adam::new(
        AdamConfig {
            beta1: cfg.beta1,
            ..AdamConfig::with_lr(cfg.lr)
        },
        p.params(),
    );
    let train: Vec<&VoxelGrid> = ds.grids(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptySplit(Split::Train));
    }
    let f = d.arch.feature_len();
    let mut log = ProjLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks_exact(cfg.batch_size) {
            let dropped: Vec<VoxelGrid> = chunk
                .iter()
                .map(|&i| drop_voxels(train[i], cfg.drop_fraction, &mut rng))
                .collect::<Result<_>>()?;
            let x = grids_to_tensor(dropped.iter());
            let (_, fx) = d.evaluate(&x)?;
            let n = chunk.len();

            let mut tape = Tape::new();
            let pb = p.state.params.bind(&mut tape, true);
            let gb = g.state.params.bind(&mut tape, false);
            let db = d.state.params.bind(&mut tape, false);
            let xv = tape.constant(x);
            let z = p.forward_train(&mut tape, &pb, xv)?;
            let gen = g.forward(&mut tape, &gb, z)?;
            let out = d.forward(&mut tape, &db, gen)?;
            let flat = tape.reshape(out.features, &[n, f])?;
            let target = tape.constant(fx);
            let diff = tape.sub(flat, target)?;
            let norms = tape.row_norm(diff)?;
            let loss = tape.mean(norms)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite {
                    what: "projection loss",
                    step,
                });
            }
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = pb
                .vars()
                .iter()
                .zip(p.params().iter())
                .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                .collect();
            drop(tape);
            adam.step(&mut p.state.params, &grads)?;
            losses.push(loss_value);
            step += 1;
        }
        let mean = crate::stats::mean(&losses);
        log.epoch_losses.push(mean);
        on_epoch(epoch, mean, &p)?;
    }
    assert!(
        g.state.bit_identical(&g_before) && d.state.bit_identical(&d_before),
        "generator or discriminator changed during projection training"
    );
    Ok((p, log))
}

/// One probe of the latent-distance study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub shape: usize,
    pub radius: f64,
    pub distance: f64,
    pub dissimilarity: f64,
}

/// Uniform direction on the unit sphere in `d` dimensions.
pub fn unit_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// For each shape and radius, `n_probe` latents at that distance from
/// `P_n(x)` and the dissimilarity of their generations to `x`.
pub fn latent_distance_correlation<R: Rng + ?Sized>(
    xs: &[VoxelGrid],
    models: &Models,
    n_probe: usize,
    radii: &[f64],
    rng: &mut R,
) -> Result<Vec<CorrelationRow>> {
    let (g, d, p) = (&models.generator, &models.discriminator, &models.projection);
    let dim = models.latent_dim();
    let mut rows = Vec::with_capacity(xs.len() * radii.len() * n_probe);
    for (shape, x) in xs.iter().enumerate() {
        let fx = features(d, x)?;
        let center = project_network(p, x)?;
        for &radius in radii {
            let mut z = Vec::with_capacity(n_probe * dim);
            for _ in 0..n_probe {
                let u = unit_direction(dim, rng);
                z.extend(center.iter().zip(&u).map(|(c, u)| c + radius * u));
            }
            for row in z.chunks(dim) {
                let gen = generate_one(g, row)?;
                let distance = row.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                rows.push(CorrelationRow {
                    shape,
                    radius,
                    distance,
                    dissimilarity: feature_distance(&features(d, &gen)?, &fx),
                });
            }
        }
    }
    Ok(rows)
}
