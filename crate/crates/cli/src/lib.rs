//! The `voxsnap` command line.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxsnap_core::bundle::{
    checkpoint_path, load_gan_checkpoint, load_model_dir, register_bundle, save_gan_checkpoint, ModelBundle,
    BUNDLE_FILE,
};
use voxsnap_core::dataset::{Category, Dataset, DatasetConfig, Split, MANIFEST_NAME};
use voxsnap_core::eval::{eval_baseline, eval_correlation, eval_projection_report, write_csv};
use voxsnap_core::gan::{interpolate, sample_shapes, GanTrainConfig, GanTrainer, StepRecord};
use voxsnap_core::io::{write_atomic, write_json};
use voxsnap_core::projection::{
    finish_grid, project_network, snap, train_projection, Models, ProjTrainConfig, SnapConfig, SnapOverrides,
};
use voxsnap_core::stats::mean;
use voxsnap_core::voxel::{binarize, decode, encode, VoxelGrid};
use voxsnap_service::config::ServiceConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const TRAIN_LOG: &str = "train.log";
pub const DEFAULT_LOG_EVERY: u64 = 10;

#[derive(Parser, Debug)]
#[command(name = "voxsnap", version, about = "Voxel GAN training, projection and SNAP")]
struct Cli {
    /// TOML file; flags override environment, which overrides the file.
    #[arg(long, global = true, env = "VOXSNAP_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "VOXSNAP_SEED")]
    seed: Option<u64>,
    /// Worker threads of the service runtime; numerical work runs on one thread per request.
    #[arg(long, global = true, env = "VOXSNAP_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a procedural dataset directory.
    MakeDataset(MakeDatasetArgs),
    /// Train the GAN, writing a checkpoint after every epoch.
    TrainGan(TrainGanArgs),
    /// Train the projection network against a GAN checkpoint and write a model bundle.
    TrainProj(TrainProjArgs),
    /// Snap one grid onto the learned shape manifold.
    Snap(SnapArgs),
    /// Sample random shapes.
    Generate(GenerateArgs),
    /// Generate shapes along a straight latent path.
    Interpolate(InterpolateArgs),
    /// Latent distance against dissimilarity around projected shapes.
    EvalCorrelation(EvalCorrelationArgs),
    /// Network-only against refined projection of partial shapes.
    EvalProjection(EvalProjectionArgs),
    /// SNAP against plain gradient descent on shapes missing their top third.
    EvalBaseline(EvalBaselineArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct MakeDatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_category)]
    category: Option<Category>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_heldout: Option<usize>,
    #[arg(long)]
    dims: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainGanArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Total epochs, counting those already in a resumed checkpoint.
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Progress line interval in steps.
    #[arg(long)]
    log_every: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainProjArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// GAN checkpoint, or a directory whose latest checkpoint is used.
    #[arg(long)]
    gan: PathBuf,
    /// Model directory; the bundle goes to `<out>/<category>/`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Bundle directory, or model directory with `models.json`.
    #[arg(long)]
    model: PathBuf,
    /// Required when a model directory holds several bundles.
    #[arg(long, value_parser = parse_category)]
    category: Option<Category>,
}

#[derive(Args, Debug, Default)]
struct SnapFlags {
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    refine_steps: Option<usize>,
    #[arg(long)]
    refine_lr: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    no_symmetrize: bool,
    #[arg(long)]
    no_component_removal: bool,
}

impl SnapFlags {
    fn overrides(&self) -> SnapOverrides {
        SnapOverrides {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            refine_steps: self.refine_steps,
            refine_lr: self.refine_lr,
            threshold: self.threshold,
            component_removal: self.no_component_removal.then_some(false),
            symmetrize: self.no_symmetrize.then_some(false),
        }
    }
}

#[derive(Args, Debug)]
struct SnapArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    snap: SnapFlags,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Start grid, projected with the network; a random latent when absent.
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long)]
    to: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalData {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset whose held-out split is evaluated.
    #[arg(long)]
    dataset: PathBuf,
    /// CSV destination.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalCorrelationArgs {
    #[command(flatten)]
    data: EvalData,
    #[arg(long, default_value_t = 16)]
    n_shapes: usize,
    #[arg(long, default_value_t = 32)]
    n_probe: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0, 4.0])]
    radii: Vec<f64>,
}

#[derive(Args, Debug)]
struct EvalProjectionArgs {
    #[command(flatten)]
    data: EvalData,
    #[arg(long, default_value_t = 64)]
    n_shapes: usize,
    #[arg(long, default_value_t = 0.5)]
    drop_fraction: f64,
}

#[derive(Args, Debug)]
struct EvalBaselineArgs {
    #[command(flatten)]
    data: EvalData,
    #[arg(long, default_value_t = 32)]
    n_shapes: usize,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    model_dir: Option<PathBuf>,
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn parse_category(s: &str) -> std::result::Result<Category, String> {
    s.parse().map_err(|e: voxsnap_core::Error| e.to_string())
}

/// Contents of the `--config` file.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub log_every: Option<u64>,
    pub dataset: DatasetConfig,
    pub gan: GanTrainConfig,
    pub projection: ProjTrainConfig,
    /// Applied over a bundle's stored snap settings.
    pub snap: SnapOverrides,
    pub serve: ServiceConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Settings after merging file, environment and flags.
struct Settings {
    file: FileConfig,
    seed: Option<u64>,
    threads: Option<usize>,
}

impl Settings {
    fn seed_or(&self, default: u64) -> u64 {
        self.seed.unwrap_or(default)
    }
}

/// Parses `argv` (program name first) and runs the subcommand; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let ctx = Settings {
        seed: cli.seed.or(file.seed),
        threads: cli.threads.or(file.threads),
        file,
    };
    if ctx.threads == Some(0) {
        bail!("--threads must be >= 1");
    }
    match cli.command {
        Command::MakeDataset(a) => make_dataset(&ctx, a),
        Command::TrainGan(a) => train_gan_cmd(&ctx, a),
        Command::TrainProj(a) => train_proj_cmd(&ctx, a),
        Command::Snap(a) => snap_cmd(&ctx, a),
        Command::Generate(a) => generate_cmd(&ctx, a),
        Command::Interpolate(a) => interpolate_cmd(&ctx, a),
        Command::EvalCorrelation(a) => eval_correlation_cmd(&ctx, a),
        Command::EvalProjection(a) => eval_projection_cmd(&ctx, a),
        Command::EvalBaseline(a) => eval_baseline_cmd(&ctx, a),
        Command::Serve(a) => serve_cmd(&ctx, a),
    }
}

fn make_dataset(ctx: &Settings, a: MakeDatasetArgs) -> Result<()> {
    let mut cfg = ctx.file.dataset.clone();
    cfg.seed = ctx.seed_or(cfg.seed);
    if let Some(c) = a.category {
        cfg.category = c;
    }
    cfg.n_train = a.n_train.unwrap_or(cfg.n_train);
    cfg.n_heldout = a.n_heldout.unwrap_or(cfg.n_heldout);
    cfg.dims = a.dims.unwrap_or(cfg.dims);
    let ds = cfg.build()?;
    ds.save(&a.out)?;
    println!("wrote {} grids to {}", ds.len(), a.out.display());
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    Ok(Dataset::load_manifest(&manifest)?)
}

fn dataset_category(ds: &Dataset) -> Result<Category> {
    let first = ds.examples().first().ok_or_else(|| anyhow!("dataset is empty"))?;
    if ds.examples().iter().any(|e| e.category != first.category) {
        bail!("dataset mixes categories");
    }
    Ok(first.category)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn check_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => bail!("directory {} does not exist", p.display()),
        _ => Ok(()),
    }
}

/// `key=value` pairs, one line per logged step.
pub fn progress_line(r: &StepRecord) -> String {
    format!(
        "step={} epoch={} d_loss={:.6} g_loss={:.6} d_real_acc={:.4} d_fake_acc={:.4} d_updated={}",
        r.step, r.epoch, r.d_loss, r.g_loss, r.d_real_acc, r.d_fake_acc, r.d_updated
    )
}

fn train_gan_cmd(ctx: &Settings, a: TrainGanArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    create_dir(&a.out)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = load_gan_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            if let Some(e) = a.epochs {
                t.config.epochs = e;
            }
            t
        }
        None => {
            let mut cfg = ctx.file.gan.clone();
            cfg.seed = ctx.seed_or(cfg.seed);
            cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
            GanTrainer::new(ds.resolution(), cfg)?
        }
    };
    let every = a.log_every.or(ctx.file.log_every).unwrap_or(DEFAULT_LOG_EVERY).max(1);
    let log_path = a.out.join(TRAIN_LOG);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut io_err = None;
    while trainer.epoch < trainer.config.epochs {
        let mut on_step = |r: &StepRecord| {
            if r.step % every == 0 {
                let line = progress_line(r);
                println!("{line}");
                if let Err(e) = writeln!(log, "{line}") {
                    io_err.get_or_insert(e);
                }
            }
        };
        trainer.train_epoch(&ds, &mut on_step)?;
        if let Some(e) = io_err.take() {
            return Err(e).context(format!("writing {}", log_path.display()));
        }
        let path = checkpoint_path(&a.out, trainer.epoch);
        save_gan_checkpoint(&path, &trainer)?;
        let acc = trainer.log.epoch_d_acc(trainer.epoch - 1).unwrap_or(f64::NAN);
        println!("checkpoint={} epoch={} d_acc={acc:.4}", path.display(), trainer.epoch);
    }
    Ok(())
}

/// The highest-numbered `gan-epoch-*.vxsn` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let epoch = name
            .strip_prefix("gan-epoch-")
            .and_then(|s| s.strip_suffix(".vxsn"))
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| anyhow!("no GAN checkpoint in {}", dir.display()))
}

fn train_proj_cmd(ctx: &Settings, a: TrainProjArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let category = dataset_category(&ds)?;
    let ckpt = if a.gan.is_dir() { latest_checkpoint(&a.gan)? } else { a.gan.clone() };
    let gan = load_gan_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let mut cfg = ctx.file.projection.clone();
    cfg.seed = ctx.seed_or(cfg.seed);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    create_dir(&a.out)?;
    let (p, _) = train_projection(&ds, &gan.generator, &gan.discriminator, &cfg, |epoch, loss, _| {
        println!("epoch={epoch} loss={loss:.6}");
        Ok(())
    })?;
    let mut snap_cfg = SnapConfig::default();
    snap_cfg.apply(&ctx.file.snap);
    let bundle = ModelBundle::new(category, Models::new(gan.generator, gan.discriminator, p)?, snap_cfg)?;
    let dir = a.out.join(category.name());
    bundle.save(&dir)?;
    register_bundle(&a.out, category, category.name())?;
    println!("bundle={}", dir.display());
    Ok(())
}

/// Loads a bundle directory, or picks one bundle from a model directory.
pub fn load_bundle(path: &Path, category: Option<Category>) -> Result<ModelBundle> {
    if path.join(BUNDLE_FILE).is_file() {
        let b = ModelBundle::load(path)?;
        if let Some(c) = category {
            if c != b.category {
                bail!("{} holds {} models, not {c}", path.display(), b.category);
            }
        }
        return Ok(b);
    }
    let mut bundles = load_model_dir(path).with_context(|| format!("loading models from {}", path.display()))?;
    match category {
        Some(c) => {
            let i = bundles
                .iter()
                .position(|b| b.category == c)
                .ok_or_else(|| anyhow!("no {c} model in {}", path.display()))?;
            Ok(bundles.swap_remove(i))
        }
        None if bundles.len() == 1 => Ok(bundles.remove(0)),
        None => bail!("{} holds {} bundles; pass --category", path.display(), bundles.len()),
    }
}

fn read_grid(path: &Path) -> Result<VoxelGrid> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn snap_config(ctx: &Settings, bundle: &ModelBundle, flags: &SnapFlags) -> Result<SnapConfig> {
    let mut cfg = bundle.snap.clone();
    cfg.apply(&ctx.file.snap);
    cfg.apply(&flags.overrides());
    cfg.validate()?;
    Ok(cfg)
}

fn snap_cmd(ctx: &Settings, a: SnapArgs) -> Result<()> {
    check_parent(&a.out)?;
    let bundle = load_bundle(&a.model.model, a.model.category)?;
    let x = read_grid(&a.input)?;
    let cfg = snap_config(ctx, &bundle, &a.snap)?;
    let r = snap(&x, &bundle.models, &cfg)?;
    write_atomic(&a.out, &encode(&r.grid))?;
    let summary = serde_json::json!({
        "out": a.out,
        "z_initial": r.z_initial,
        "z_final": r.z_final,
        "metrics": r.metrics,
        "warnings": r.warnings,
    });
    println!("{summary}");
    Ok(())
}

#[derive(Serialize)]
struct LatentRecord {
    file: String,
    z: Vec<f64>,
}

fn generate_cmd(ctx: &Settings, a: GenerateArgs) -> Result<()> {
    if a.n == 0 {
        bail!("--n must be >= 1");
    }
    let bundle = load_bundle(&a.model.model, a.model.category)?;
    create_dir(&a.out)?;
    let mut cfg = bundle.snap.clone();
    cfg.apply(&ctx.file.snap);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed_or(0));
    let mut latents = Vec::with_capacity(a.n);
    for (i, (z, out)) in sample_shapes(&bundle.models.generator, a.n, &mut rng)?.into_iter().enumerate() {
        let file = format!("sample-{i:03}.vxgb");
        write_atomic(&a.out.join(&file), &encode(&finish_grid(&out, &cfg)?))?;
        latents.push(LatentRecord { file, z });
    }
    write_json(&a.out.join("latents.json"), &latents)?;
    println!("wrote {} grids to {}", a.n, a.out.display());
    Ok(())
}

fn interpolate_cmd(ctx: &Settings, a: InterpolateArgs) -> Result<()> {
    let bundle = load_bundle(&a.model.model, a.model.category)?;
    create_dir(&a.out)?;
    let m = &bundle.models;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed_or(0));
    let mut endpoint = |path: &Option<PathBuf>| -> Result<Vec<f64>> {
        match path {
            Some(p) => Ok(project_network(&m.projection, &read_grid(p)?)?),
            None => Ok(voxsnap_core::gan::sample_latents(1, m.latent_dim(), &mut rng).into_data()),
        }
    };
    let z_a = endpoint(&a.from)?;
    let z_b = endpoint(&a.to)?;
    // λ weights the first latent, so `to` goes first to start at `from`.
    let grids = interpolate(&m.generator, &z_b, &z_a, a.steps)?;
    for (i, out) in grids.iter().enumerate() {
        write_atomic(&a.out.join(format!("interp-{i:03}.vxgb")), &encode(&binarize(out, bundle.snap.threshold)?))?;
    }
    write_json(&a.out.join("latents.json"), &serde_json::json!({ "z_a": z_a, "z_b": z_b }))?;
    println!("wrote {} grids to {}", grids.len(), a.out.display());
    Ok(())
}

fn heldout(path: &Path, n: usize) -> Result<Vec<VoxelGrid>> {
    let ds = load_dataset(path)?;
    let xs: Vec<VoxelGrid> = ds.grids(Split::Heldout).into_iter().take(n).cloned().collect();
    if xs.is_empty() {
        bail!("{} has no held-out shapes", path.display());
    }
    Ok(xs)
}

fn eval_setup(ctx: &Settings, d: &EvalData, n: usize) -> Result<(ModelBundle, Vec<VoxelGrid>, ChaCha8Rng)> {
    check_parent(&d.out)?;
    let bundle = load_bundle(&d.model.model, d.model.category)?;
    let xs = heldout(&d.dataset, n)?;
    Ok((bundle, xs, ChaCha8Rng::seed_from_u64(ctx.seed_or(0))))
}

fn eval_correlation_cmd(ctx: &Settings, a: EvalCorrelationArgs) -> Result<()> {
    let (bundle, xs, mut rng) = eval_setup(ctx, &a.data, a.n_shapes)?;
    let (rows, rho) = eval_correlation(&bundle.models, &xs, a.n_probe, &a.radii, &mut rng)?;
    write_csv(&a.data.out, &rows)?;
    println!("rows={} spearman={rho:.4}", rows.len());
    Ok(())
}

fn eval_projection_cmd(ctx: &Settings, a: EvalProjectionArgs) -> Result<()> {
    let (bundle, xs, mut rng) = eval_setup(ctx, &a.data, a.n_shapes)?;
    let mut cfg = bundle.snap.clone();
    cfg.apply(&ctx.file.snap);
    let report = eval_projection_report(&bundle.models, &xs, &cfg, a.drop_fraction, &mut rng)?;
    write_csv(&a.data.out, &report.table())?;
    let s = &report.summary;
    println!(
        "shapes={} input_realism={:.4} ps_dissimilarity={:.4} ps_realism={:.4} p_dissimilarity={:.4} p_realism={:.4}",
        report.rows.len(),
        s.input_realism,
        s.ps_dissimilarity,
        s.ps_realism,
        s.p_dissimilarity,
        s.p_realism
    );
    Ok(())
}

fn eval_baseline_cmd(ctx: &Settings, a: EvalBaselineArgs) -> Result<()> {
    let (bundle, xs, _) = eval_setup(ctx, &a.data, a.n_shapes)?;
    let mut cfg = bundle.snap.clone();
    cfg.apply(&ctx.file.snap);
    let rows = eval_baseline(&bundle.models, &xs, &cfg)?;
    write_csv(&a.data.out, &rows)?;
    let col = |f: fn(&voxsnap_core::eval::BaselineRow) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    println!(
        "shapes={} snap_realism={:.4} baseline_realism={:.4} snap_dissimilarity={:.4} baseline_dissimilarity={:.4}",
        rows.len(),
        col(|r| r.snap_realism),
        col(|r| r.baseline_realism),
        col(|r| r.snap_dissimilarity),
        col(|r| r.baseline_dissimilarity)
    );
    Ok(())
}

fn serve_cmd(ctx: &Settings, a: ServeArgs) -> Result<()> {
    let mut cfg = ctx.file.serve.clone();
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(d) = a.model_dir {
        cfg.model_dir = Some(d);
    }
    if let Some(b) = a.bind {
        cfg.bind = b;
    }
    if let Some(s) = a.static_dir {
        cfg.static_dir = Some(s);
    }
    cfg.validate()?;
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = ctx.threads {
        rt.worker_threads(n);
    }
    rt.enable_all().build()?.block_on(voxsnap_service::serve(cfg))?;
    Ok(())
}
