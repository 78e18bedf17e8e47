//! Training checkpoints and the model bundles the service loads.
//!
//! A checkpoint is a `VXSN` tensor file plus a JSON sidecar with the same
//! stem. A bundle is a directory holding one `VXSN` file per network and a
//! `bundle.json` describing them; a model directory lists its bundles in
//! `models.json`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use voxsnap_tensor::{checkpoint, Adam, Tensor};

use crate::dataset::Category;
use crate::error::{Error, Result};
use crate::gan::{GanTrainConfig, GanTrainer};
use crate::io::{read_json, write_atomic, write_json};
use crate::nets::{Architecture, Discriminator, Generator, NetState, ProjectionNet};
use crate::projection::{Models, SnapConfig};

pub const BUNDLE_FILE: &str = "bundle.json";
pub const MODELS_MANIFEST: &str = "models.json";

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, lowercase hex.
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot carry a u128.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::invalid(format!("malformed rng seed {:?}", self.seed));
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::invalid(format!("malformed rng word_pos {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Channels {
    pub generator: Vec<usize>,
    pub discriminator: Vec<usize>,
}

/// JSON sidecar of a GAN training checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub resolution: usize,
    pub latent_dim: usize,
    pub channels: Channels,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub config: GanTrainConfig,
    pub rng_state: RngState,
}

fn prefixed(prefix: &str, tensors: Vec<(String, Tensor)>) -> Vec<(String, Tensor)> {
    tensors.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

fn strip<'a>(all: &'a HashMap<String, Tensor>, prefix: &str) -> HashMap<String, Tensor> {
    let p = format!("{prefix}.");
    all.iter()
        .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
        .collect()
}

fn write_vxsn(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_atomic(path, &checkpoint::to_bytes(&refs))
}

fn read_vxsn(path: &Path) -> Result<HashMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(checkpoint::from_bytes(&bytes)?.into_iter().collect())
}

pub fn sidecar_path(vxsn: &Path) -> PathBuf {
    vxsn.with_extension("json")
}

/// `dir/gan-epoch-NNN.vxsn` and its sidecar.
pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("gan-epoch-{epoch:03}.vxsn"))
}

/// Writes networks, optimizer state and RNG position of `trainer`.
pub fn save_gan_checkpoint(path: &Path, trainer: &GanTrainer) -> Result<()> {
    let g = &trainer.generator;
    let d = &trainer.discriminator;
    let mut tensors = prefixed("generator", g.state.named_tensors());
    tensors.extend(prefixed("discriminator", d.state.named_tensors()));
    tensors.extend(prefixed("adam_g", trainer.adam_g.named_state(g.params())));
    tensors.extend(prefixed("adam_d", trainer.adam_d.named_state(d.params())));
    write_vxsn(path, &tensors)?;
    let meta = CheckpointMeta {
        resolution: g.arch.resolution,
        latent_dim: g.arch.latent_dim,
        channels: Channels {
            generator: g.arch.gen_channels.clone(),
            discriminator: g.arch.disc_channels.clone(),
        },
        epoch: trainer.epoch,
        step: trainer.step,
        config: trainer.config.clone(),
        rng_state: RngState::capture(&trainer.rng),
    };
    write_json(&sidecar_path(path), &meta)
}

/// Rebuilds a trainer that continues exactly where the checkpoint stopped.
/// The step log is not part of the checkpoint and starts empty.
pub fn load_gan_checkpoint(path: &Path) -> Result<GanTrainer> {
    let meta: CheckpointMeta = read_json(&sidecar_path(path))?;
    let tensors = read_vxsn(path)?;
    let mut t = GanTrainer::new(meta.resolution, meta.config.clone())?;
    t.generator.state.load(&strip(&tensors, "generator"))?;
    t.discriminator.state.load(&strip(&tensors, "discriminator"))?;
    let ag = strip(&tensors, "adam_g");
    let ad = strip(&tensors, "adam_d");
    t.adam_g = Adam::restore(t.adam_g.config, t.generator.params(), |n| ag.get(n))?;
    t.adam_d = Adam::restore(t.adam_d.config, t.discriminator.params(), |n| ad.get(n))?;
    t.rng = meta.rng_state.restore()?;
    t.epoch = meta.epoch;
    t.step = meta.step;
    Ok(t)
}

pub fn save_net(path: &Path, state: &NetState) -> Result<()> {
    write_vxsn(path, &state.named_tensors())
}

pub fn load_net_state(path: &Path, state: &mut NetState) -> Result<()> {
    state.load(&read_vxsn(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleFiles {
    pub generator: String,
    pub discriminator: String,
    pub projection: String,
}

impl Default for BundleFiles {
    fn default() -> Self {
        Self {
            generator: "generator.vxsn".into(),
            discriminator: "discriminator.vxsn".into(),
            projection: "projection.vxsn".into(),
        }
    }
}

/// Contents of `bundle.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub category: Category,
    pub architecture: Architecture,
    pub snap: SnapConfig,
    pub files: BundleFiles,
}

/// Trained G, D and P_n for one category plus its default snap settings.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub category: Category,
    pub models: Models,
    pub snap: SnapConfig,
}

impl ModelBundle {
    pub fn new(category: Category, models: Models, snap: SnapConfig) -> Result<Self> {
        snap.validate()?;
        Ok(Self { category, models, snap })
    }

    pub fn resolution(&self) -> usize {
        self.models.resolution()
    }

    pub fn latent_dim(&self) -> usize {
        self.models.latent_dim()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = BundleFiles::default();
        save_net(&dir.join(&files.generator), &self.models.generator.state)?;
        save_net(&dir.join(&files.discriminator), &self.models.discriminator.state)?;
        save_net(&dir.join(&files.projection), &self.models.projection.state)?;
        let meta = BundleMeta {
            category: self.category,
            architecture: self.models.generator.arch.clone(),
            snap: SnapConfig {
                category: Some(self.category),
                ..self.snap.clone()
            },
            files,
        };
        write_json(&dir.join(BUNDLE_FILE), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: BundleMeta = read_json(&dir.join(BUNDLE_FILE))?;
        let arch = &meta.architecture;
        arch.validate()?;
        // Initial values are overwritten; the seed only has to be fixed.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Generator::new(arch, &mut rng)?;
        let mut d = Discriminator::new(arch, &mut rng)?;
        let mut p = ProjectionNet::new(arch, &mut rng)?;
        load_net_state(&dir.join(&meta.files.generator), &mut g.state)?;
        load_net_state(&dir.join(&meta.files.discriminator), &mut d.state)?;
        load_net_state(&dir.join(&meta.files.projection), &mut p.state)?;
        Self::new(meta.category, Models::new(g, d, p)?, meta.snap)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub category: Category,
    /// Bundle directory, relative to the model directory.
    pub path: String,
}

/// Contents of `models.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelsManifest {
    pub bundles: Vec<ManifestEntry>,
}

/// Adds or replaces the entry for `category` in `dir/models.json`.
pub fn register_bundle(dir: &Path, category: Category, bundle_dir: &str) -> Result<()> {
    let path = dir.join(MODELS_MANIFEST);
    let mut manifest: ModelsManifest = if path.exists() {
        read_json(&path)?
    } else {
        ModelsManifest::default()
    };
    manifest.bundles.retain(|e| e.category != category);
    manifest.bundles.push(ManifestEntry {
        category,
        path: bundle_dir.to_string(),
    });
    manifest.bundles.sort_by_key(|e| e.category.name());
    write_json(&path, &manifest)
}

/// Loads every bundle listed in `dir/models.json`.
pub fn load_model_dir(dir: &Path) -> Result<Vec<ModelBundle>> {
    let manifest: ModelsManifest = read_json(&dir.join(MODELS_MANIFEST))?;
    let mut out = Vec::with_capacity(manifest.bundles.len());
    for entry in &manifest.bundles {
        let bundle = ModelBundle::load(&dir.join(&entry.path))?;
        if bundle.category != entry.category {
            return Err(Error::invalid(format!(
                "{}: bundle is {} but the manifest says {}",
                entry.path, bundle.category, entry.category
            )));
        }
        out.push(bundle);
    }
    Ok(out)
}
