//! Gates measured on the fixed-seed desk-scale reference run.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxsnap_acceptance::{ensure, within, Outcome};
use voxsnap_core::dataset::Split;
use voxsnap_core::eval::{eval_baseline, eval_correlation, eval_projection_report, eval_random_baseline};
use voxsnap_core::gan::{generate_grids, sample_latents, TrainHooks};
use voxsnap_core::projection::{features, project_network, realism, refine_latent, snap, Models, SnapConfig};
use voxsnap_core::reference::{run_reference, ReferenceConfig, ReferenceRun};
use voxsnap_core::stats::{kmeans, mean};
use voxsnap_core::voxel::{drop_voxels, VoxelGrid};

pub struct Reference {
    pub run: ReferenceRun,
    pub elapsed: Duration,
}

impl Reference {
    pub fn train() -> Result<Self, String> {
        let t = Instant::now();
        let mut on_epoch = |tr: &voxsnap_core::gan::GanTrainer| {
            let acc = tr.log.epoch_d_acc(tr.epoch - 1).unwrap_or(f64::NAN);
            eprintln!("  gan epoch {:>2}: d accuracy {acc:.3} ({:.0}s)", tr.epoch, t.elapsed().as_secs_f64());
            Ok(())
        };
        let hooks = TrainHooks { on_step: None, on_epoch: Some(&mut on_epoch) };
        let run = run_reference(&ReferenceConfig::default(), hooks, |e, l, _| {
            eprintln!("  projection epoch {e:>2}: loss {l:.4} ({:.0}s)", t.elapsed().as_secs_f64());
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        Ok(Self { run, elapsed: t.elapsed() })
    }

    pub fn models(&self) -> &Models {
        &self.run.bundle.models
    }

    fn heldout(&self) -> Vec<VoxelGrid> {
        self.run.dataset.grids(Split::Heldout).into_iter().cloned().collect()
    }
}

fn err(e: voxsnap_core::Error) -> String {
    e.to_string()
}

pub fn gan(r: &Reference) -> Outcome {
    let m = r.models();
    let last = r.run.gan_log.last_epoch().ok_or("empty training log")?;
    let acc = r.run.gan_log.epoch_d_acc(last).ok_or("no final-epoch records")?;
    let z = sample_latents(64, m.latent_dim(), &mut ChaCha8Rng::seed_from_u64(64));
    let trained = generate_grids(&m.generator, &z).map_err(err)?;
    let untrained = generate_grids(&r.run.untrained, &z).map_err(err)?;
    let score = |gs: &[voxsnap_core::voxel::ContinuousGrid]| -> Result<f64, String> {
        let s: Vec<f64> = gs.iter().map(|g| realism(&m.discriminator, g)).collect::<Result<_, _>>().map_err(err)?;
        Ok(mean(&s))
    };
    let (rt, ru) = (score(&trained)?, score(&untrained)?);
    let feats: Vec<Vec<f64>> =
        trained.iter().map(|g| features(&m.discriminator, g)).collect::<Result<_, _>>().map_err(err)?;
    let sizes = kmeans(&feats, 2, 10, 0).cluster_sizes();
    let detail = format!(
        "final-epoch d accuracy {acc:.3}, realism {rt:.4} vs untrained {ru:.2e} ({:.1}x), k-means clusters {sizes:?}, trained in {:.0}s",
        rt / ru,
        r.elapsed.as_secs_f64()
    );
    ensure((0.55..=0.95).contains(&acc), || format!("d accuracy out of [0.55, 0.95]; {detail}"))?;
    ensure(rt >= 2.0 * ru, || format!("realism below 2x untrained; {detail}"))?;
    ensure(sizes.iter().all(|&s| s * 10 >= feats.len()), || format!("cluster under 10%; {detail}"))?;
    within(r.elapsed, Duration::from_secs(30 * 60)).map_err(|e| format!("{e}; {detail}"))?;
    Ok(detail)
}

pub fn projection_loss(r: &Reference) -> Outcome {
    let l = &r.run.proj_log.epoch_losses;
    let (first, last) = (*l.first().ok_or("no projection epochs")?, *l.last().unwrap());
    let detail = format!("first-epoch loss {first:.4}, final {last:.4}, ratio {:.3} (gate < 0.5)", last / first);
    ensure(last < 0.5 * first, || detail.clone())?;
    Ok(detail)
}

pub fn projection_quality(r: &Reference) -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dropped: Vec<VoxelGrid> =
        r.heldout().iter().map(|x| drop_voxels(x, 0.5, &mut rng)).collect::<Result<_, _>>().map_err(err)?;
    let rows = eval_random_baseline(r.models(), &dropped, 100, &mut rng).map_err(err)?;
    let wins = rows.iter().filter(|row| row.beats_random()).count();
    let p = mean(&rows.iter().map(|row| row.projected_dissimilarity).collect::<Vec<_>>());
    let q = mean(&rows.iter().map(|row| row.random_median_dissimilarity).collect::<Vec<_>>());
    let detail = format!(
        "{wins}/{} beat the random median (mean dissimilarity {p:.3} vs {q:.3})",
        rows.len()
    );
    ensure(rows.len() == 64 && wins * 10 >= rows.len() * 9, || detail.clone())?;
    within(t.elapsed(), Duration::from_secs(300))?;
    Ok(detail)
}

pub fn two_stage(r: &Reference) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rep = eval_projection_report(r.models(), &r.heldout(), &r.run.bundle.snap, 0.5, &mut rng).map_err(err)?;
    let s = &rep.summary;
    let rate = rep.realism_win_rate();
    let detail = format!(
        "realism(P) >= realism(P_S) on {:.1}% of {}; mean realism {:.4} -> {:.4}; mean dissimilarity {:.3} -> {:.3} (increase {:+.3})",
        100.0 * rate,
        rep.rows.len(),
        s.ps_realism,
        s.p_realism,
        s.ps_dissimilarity,
        s.p_dissimilarity,
        s.p_dissimilarity - s.ps_dissimilarity
    );
    ensure(rate >= 0.7, || detail.clone())?;
    Ok(detail)
}

pub fn correlation(r: &Reference) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let held = r.heldout();
    let (rows, rho) =
        eval_correlation(r.models(), &held[..16], 32, &[0.5, 1.0, 2.0, 4.0], &mut rng).map_err(err)?;
    let detail = format!("Spearman rho {rho:.3} over {} probes (gate > 0.5)", rows.len());
    ensure(rho > 0.5, || detail.clone())?;
    Ok(detail)
}

pub fn baseline(r: &Reference) -> Outcome {
    let held = r.heldout();
    let rows = eval_baseline(r.models(), &held[..32], &r.run.bundle.snap).map_err(err)?;
    let col = |f: fn(&voxsnap_core::eval::BaselineRow) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    let (sr, br) = (col(|x| x.snap_realism), col(|x| x.baseline_realism));
    let detail = format!(
        "mean realism snap {sr:.4} vs gradient baseline {br:.4}; dissimilarity {:.3} vs {:.3}",
        col(|x| x.snap_dissimilarity),
        col(|x| x.baseline_dissimilarity)
    );
    ensure(sr > br, || detail.clone())?;
    Ok(detail)
}

pub fn latency(r: &Reference) -> Outcome {
    let held = r.heldout();
    let mut worst = Duration::ZERO;
    for x in &held[..8] {
        let t = Instant::now();
        snap(x, r.models(), &r.run.bundle.snap).map_err(err)?;
        worst = worst.max(t.elapsed());
    }
    within(worst, Duration::from_secs(2))?;
    Ok(format!("slowest of 8 snaps {:.3}s (gate < 2s)", worst.as_secs_f64()))
}

pub fn realism_only(r: &Reference) -> Outcome {
    let m = r.models();
    let cfg = SnapConfig { lambda1: 0.0, lambda2: 1.0, refine_steps: 30, ..r.run.bundle.snap.clone() };
    let held = r.heldout();
    let mut gains = Vec::with_capacity(held.len());
    for (i, x) in held.iter().enumerate() {
        let z0 = project_network(&m.projection, x).map_err(err)?;
        let out = refine_latent(&z0, x, &m.generator, &m.discriminator, &cfg).map_err(err)?;
        ensure(out.last.realism >= out.initial.realism, || {
            format!("held-out {i}: realism {} -> {}", out.initial.realism, out.last.realism)
        })?;
        gains.push(out.last.realism - out.initial.realism);
    }
    Ok(format!("realism never drops on {} held-out inputs (mean gain {:.4})", held.len(), mean(&gains)))
}
