//! Evaluation experiments over a trained model set; every report is a CSV.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::projection::{
    dissimilarity, feature_distance, features, generate_one, gradient_baseline_project, latent_distance_correlation,
    project_network, realism, refine_latent, CorrelationRow, Models, SnapConfig,
};
use crate::stats::{mean, median, spearman};
use crate::voxel::{drop_voxels, VoxelGrid};

/// Serializes `rows` with a header row and writes the file atomically.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::invalid(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    write_atomic(path, &bytes)
}

fn nonempty(xs: &[VoxelGrid]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::invalid("no held-out shapes"));
    }
    Ok(())
}

/// One input of the two-stage projection table. `ps_*` describe
/// `G(P_n(x))`, `p_*` describe `G(P(x))` after refinement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub shape: String,
    pub input_realism: f64,
    pub ps_dissimilarity: f64,
    pub ps_realism: f64,
    pub p_dissimilarity: f64,
    pub p_realism: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionReport {
    pub rows: Vec<ProjectionRow>,
    pub summary: ProjectionRow,
}

impl ProjectionReport {
    /// Data rows followed by the `mean` row.
    pub fn table(&self) -> Vec<ProjectionRow> {
        let mut t = self.rows.clone();
        t.push(self.summary.clone());
        t
    }

    /// Fraction of inputs whose refined output is at least as realistic.
    pub fn realism_win_rate(&self) -> f64 {
        let wins = self.rows.iter().filter(|r| r.p_realism >= r.ps_realism).count();
        wins as f64 / self.rows.len() as f64
    }
}

/// Drops `drop_fraction` of each held-out shape's voxels, then scores the
/// network-only and the refined projection against the dropped input.
pub fn eval_projection_report<R: Rng + ?Sized>(
    models: &Models,
    heldout: &[VoxelGrid],
    cfg: &SnapConfig,
    drop_fraction: f64,
    rng: &mut R,
) -> Result<ProjectionReport> {
    nonempty(heldout)?;
    let (g, d) = (&models.generator, &models.discriminator);
    let mut rows = Vec::with_capacity(heldout.len());
    for (i, original) in heldout.iter().enumerate() {
        let x = drop_voxels(original, drop_fraction, rng)?;
        let z_s = project_network(&models.projection, &x)?;
        let r = refine_latent(&z_s, &x, g, d, cfg)?;
        rows.push(ProjectionRow {
            shape: i.to_string(),
            input_realism: realism(d, &x)?,
            ps_dissimilarity: r.initial.dissimilarity,
            ps_realism: r.initial.realism,
            p_dissimilarity: r.last.dissimilarity,
            p_realism: r.last.realism,
        });
    }
    let col = |f: fn(&ProjectionRow) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    let summary = ProjectionRow {
        shape: "mean".into(),
        input_realism: col(|r| r.input_realism),
        ps_dissimilarity: col(|r| r.ps_dissimilarity),
        ps_realism: col(|r| r.ps_realism),
        p_dissimilarity: col(|r| r.p_dissimilarity),
        p_realism: col(|r| r.p_realism),
    };
    Ok(ProjectionReport { rows, summary })
}

/// Network projection against random latents for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomBaselineRow {
    pub shape: usize,
    pub projected_dissimilarity: f64,
    pub random_median_dissimilarity: f64,
}

impl RandomBaselineRow {
    pub fn beats_random(&self) -> bool {
        self.projected_dissimilarity < self.random_median_dissimilarity
    }
}

/// `dissimilarity(x, G(P_n(x)))` next to the median over `n_random`
/// standard-normal latents, per input.
pub fn eval_random_baseline<R: Rng + ?Sized>(
    models: &Models,
    xs: &[VoxelGrid],
    n_random: usize,
    rng: &mut R,
) -> Result<Vec<RandomBaselineRow>> {
    nonempty(xs)?;
    if n_random == 0 {
        return Err(Error::invalid("n_random must be >= 1"));
    }
    let (g, d) = (&models.generator, &models.discriminator);
    let dim = models.latent_dim();
    let z = crate::gan::sample_latents(n_random, dim, rng);
    let random_features: Vec<Vec<f64>> = crate::gan::generate_grids(g, &z)?
        .iter()
        .map(|out| features(d, out))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(xs.len());
    for (shape, x) in xs.iter().enumerate() {
        let fx = features(d, x)?;
        let projected = generate_one(g, &project_network(&models.projection, x)?)?;
        let random: Vec<f64> = random_features.iter().map(|f| feature_distance(f, &fx)).collect();
        rows.push(RandomBaselineRow {
            shape,
            projected_dissimilarity: dissimilarity(d, x, &projected)?,
            random_median_dissimilarity: median(&random),
        });
    }
    Ok(rows)
}

/// Probes around `P_n(x)` and the rank correlation of distance against
/// dissimilarity over all probes.
pub fn eval_correlation<R: Rng + ?Sized>(
    models: &Models,
    xs: &[VoxelGrid],
    n_probe: usize,
    radii: &[f64],
    rng: &mut R,
) -> Result<(Vec<CorrelationRow>, f64)> {
    nonempty(xs)?;
    let rows = latent_distance_correlation(xs, models, n_probe, radii, rng)?;
    let dist: Vec<f64> = rows.iter().map(|r| r.distance).collect();
    let dis: Vec<f64> = rows.iter().map(|r| r.dissimilarity).collect();
    let rho = spearman(&dist, &dis);
    Ok((rows, rho))
}

/// Removes every voxel in the top third of the occupied height range.
pub fn delete_top_third(x: &VoxelGrid) -> VoxelGrid {
    let d = x.dim();
    let ys: Vec<usize> = x.occupied().map(|i| x.coords(i).1).collect();
    let (Some(&lo), Some(&hi)) = (ys.iter().min(), ys.iter().max()) else {
        return x.clone();
    };
    let cut = lo + (2 * (hi - lo + 1)).div_ceil(3);
    VoxelGrid::from_fn(d, |xx, y, z| y < cut && x.get(xx, y, z))
}

/// SNAP against plain dissimilarity descent on one edited input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub shape: usize,
    pub snap_dissimilarity: f64,
    pub snap_realism: f64,
    pub baseline_dissimilarity: f64,
    pub baseline_realism: f64,
}

/// Edits each original by deleting its top third, then projects the edit
/// with SNAP and with the gradient baseline. The baseline starts where the
/// user was before the edit, `P_n(original)`, and gets the same step budget
/// and learning rate as refinement.
pub fn eval_baseline(models: &Models, originals: &[VoxelGrid], cfg: &SnapConfig) -> Result<Vec<BaselineRow>> {
    nonempty(originals)?;
    cfg.validate()?;
    let (g, d, p) = (&models.generator, &models.discriminator, &models.projection);
    let mut rows = Vec::with_capacity(originals.len());
    for (shape, original) in originals.iter().enumerate() {
        let edited = delete_top_third(original);
        let snapped = refine_latent(&project_network(p, &edited)?, &edited, g, d, cfg)?;
        let z_init = project_network(p, original)?;
        let base = gradient_baseline_project(&edited, g, d, &z_init, cfg.refine_steps, cfg.refine_lr)?;
        let base_out = generate_one(g, &base.z)?;
        rows.push(BaselineRow {
            shape,
            snap_dissimilarity: snapped.last.dissimilarity,
            snap_realism: snapped.last.realism,
            baseline_dissimilarity: base.last.dissimilarity,
            baseline_realism: realism(d, &base_out)?,
        });
    }
    Ok(rows)
}
