//! Monotone refinement and postprocess invariants.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxsnap_acceptance::{ensure, Outcome};
use voxsnap_core::nets::{Architecture, Discriminator, Generator, ProjectionNet};
use voxsnap_core::projection::{gradient_baseline_project, refine_latent, Models, SnapConfig};
use voxsnap_core::voxel::{remove_small_components, symmetrize, Axis, Connectivity, Keep, VoxelGrid};

const TRIALS: usize = 1000;

fn tiny(seed: u64) -> Models {
    let arch = Architecture {
        resolution: 8,
        latent_dim: 4,
        gen_channels: vec![6, 4],
        disc_channels: vec![4, 6],
        leaky_slope: 0.2,
        dropout: 0.5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Models::new(
        Generator::new(&arch, &mut rng).unwrap(),
        Discriminator::new(&arch, &mut rng).unwrap(),
        ProjectionNet::new(&arch, &mut rng).unwrap(),
    )
    .unwrap()
}

pub fn monotonicity() -> Outcome {
    let nets: Vec<Models> = (0..5).map(|s| tiny(300 + s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut accepted = 0;
    for trial in 0..TRIALS {
        let m = &nets[trial % nets.len()];
        let p = rng.random_range(0.0..0.6);
        let x = VoxelGrid::from_fn(8, |_, _, _| rng.random_bool(p));
        let z0: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let steps = rng.random_range(0..8);
        let lr = 10f64.powf(rng.random_range(-3.0..1.5));
        let cfg = SnapConfig {
            lambda1: rng.random_range(0.0..2.0),
            lambda2: rng.random_range(0.0..2.0),
            refine_steps: steps,
            refine_lr: lr,
            ..SnapConfig::default()
        };
        let r = refine_latent(&z0, &x, &m.generator, &m.discriminator, &cfg).map_err(|e| e.to_string())?;
        ensure(r.last.value <= r.initial.value, || {
            format!("trial {trial}: refine_latent {} -> {}", r.initial.value, r.last.value)
        })?;
        let b = gradient_baseline_project(&x, &m.generator, &m.discriminator, &z0, steps, lr)
            .map_err(|e| e.to_string())?;
        ensure(b.last.value <= b.initial.value, || {
            format!("trial {trial}: baseline {} -> {}", b.initial.value, b.last.value)
        })?;
        accepted += r.steps_taken + b.steps_taken;
    }
    Ok(format!("{TRIALS} trials, {accepted} accepted steps, no objective increase"))
}

/// Component sizes by flood fill over the 26-neighbourhood.
fn components(g: &VoxelGrid) -> Vec<Vec<usize>> {
    let d = g.dim() as isize;
    let mut seen = vec![false; g.cells()];
    let mut out = Vec::new();
    for start in g.occupied() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (x, y, z) = g.coords(i);
            for dx in -1..=1isize {
                for dy in -1..=1isize {
                    for dz in -1..=1isize {
                        let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                        if [nx, ny, nz].iter().any(|&c| c < 0 || c >= d) {
                            continue;
                        }
                        let j = g.index(nx as usize, ny as usize, nz as usize);
                        if g.get_index(j) && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

fn grid() -> impl Strategy<Value = VoxelGrid> {
    (prop::sample::select(vec![4usize, 8, 16]), 0.02f64..0.6, any::<u64>()).prop_map(|(dim, p, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VoxelGrid::from_fn(dim, |_, _, _| rng.random_bool(p))
    })
}

pub fn postprocess() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: TRIALS as u32,
        failure_persistence: None,
        ..Config::default()
    });
    let axes = prop::sample::select(vec![Axis::X, Axis::Y, Axis::Z]);
    let strategy = (grid(), 0.0f64..=1.0, axes, any::<bool>());
    let checked = std::cell::Cell::new(0);
    runner
        .run(&strategy, |(g, frac, axis, high)| {
            checked.set(checked.get() + 1);
            let conn = Connectivity::TwentySix;
            let out = remove_small_components(&g, frac, conn).unwrap();
            prop_assert!(out.is_subset_of(&g));
            prop_assert_eq!(&remove_small_components(&out, frac, conn).unwrap(), &out);
            let comps = components(&g);
            if let Some(largest) = comps.iter().map(Vec::len).max() {
                for c in comps.iter().filter(|c| c.len() == largest) {
                    prop_assert!(c.iter().all(|&i| out.get_index(i)), "largest component removed");
                }
            }

            let keep = if high { Keep::High } else { Keep::Low };
            let s = symmetrize(&g, axis, keep).unwrap();
            for i in 0..s.cells() {
                prop_assert_eq!(s.get_index(i), s.get_index(s.mirror_index(i, axis)));
            }
            prop_assert!(s.is_mirror_symmetric(axis));
            prop_assert_eq!(&symmetrize(&s, axis, keep).unwrap(), &s);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{} random grids: component removal subset, fixed point, largest kept; symmetrize mirror-exact and idempotent", checked.get()))
}
