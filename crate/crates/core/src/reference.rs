//! The fixed-seed desk-scale pipeline: dataset, GAN, projection network.

use serde::{Deserialize, Serialize};

use crate::bundle::ModelBundle;
use crate::dataset::{Dataset, DatasetConfig};
use crate::error::Result;
use crate::gan::{train_gan, GanTrainConfig, GanTrainer, TrainHooks, TrainLog};
use crate::nets::{Generator, ProjectionNet};
use crate::projection::{train_projection, Models, ProjLog, ProjTrainConfig, SnapConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    pub dataset: DatasetConfig,
    pub gan: GanTrainConfig,
    pub projection: ProjTrainConfig,
    pub snap: SnapConfig,
}

pub struct ReferenceRun {
    pub dataset: Dataset,
    /// The generator at initialization, before any GAN step.
    pub untrained: Generator,
    pub gan_log: TrainLog,
    pub proj_log: ProjLog,
    pub bundle: ModelBundle,
}

pub fn run_reference(
    cfg: &ReferenceConfig,
    hooks: TrainHooks<'_>,
    on_proj_epoch: impl FnMut(usize, f64, &ProjectionNet) -> Result<()>,
) -> Result<ReferenceRun> {
    let dataset = cfg.dataset.build()?;
    let untrained = GanTrainer::new(dataset.resolution(), cfg.gan.clone())?.generator;
    let gan = train_gan(&dataset, &cfg.gan, hooks)?;
    let (projection, proj_log) =
        train_projection(&dataset, &gan.generator, &gan.discriminator, &cfg.projection, on_proj_epoch)?;
    let models = Models::new(gan.generator, gan.discriminator, projection)?;
    let bundle = ModelBundle::new(cfg.dataset.category, models, cfg.snap.clone())?;
    Ok(ReferenceRun {
        dataset,
        untrained,
        gan_log: gan.log,
        proj_log,
        bundle,
    })
}
