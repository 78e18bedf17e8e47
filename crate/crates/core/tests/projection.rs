use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxsnap_core::dataset::{build_dataset, Category};
use voxsnap_core::nets::{Architecture, Discriminator, Generator, ProjectionNet};
use voxsnap_core::projection::*;
use voxsnap_core::voxel::{from_base64, Axis, ContinuousGrid, VoxelGrid};
use voxsnap_core::Error;

fn tiny() -> Architecture {
    Architecture {
        resolution: 8,
        latent_dim: 4,
        gen_channels: vec![6, 4],
        disc_channels: vec![4, 6],
        leaky_slope: 0.2,
        dropout: 0.5,
    }
}

fn small16() -> Architecture {
    Architecture::desk(8).narrowed(4)
}

fn models(arch: &Architecture, seed: u64) -> Models {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Models::new(
        Generator::new(arch, &mut rng).unwrap(),
        Discriminator::new(arch, &mut rng).unwrap(),
        ProjectionNet::new(arch, &mut rng).unwrap(),
    )
    .unwrap()
}

fn random_grid(dim: usize, p: f64, rng: &mut impl Rng) -> VoxelGrid {
    VoxelGrid::from_fn(dim, |_, _, _| rng.random_bool(p))
}

#[test]
fn dissimilarity_is_a_pseudometric() {
    let m = models(&small16(), 1);
    let d = &m.discriminator;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let a = random_grid(16, rng.random_range(0.05..0.5), &mut rng);
        let b = random_grid(16, rng.random_range(0.05..0.5), &mut rng);
        let c = random_grid(16, rng.random_range(0.05..0.5), &mut rng);
        let ab = dissimilarity(d, &a, &b).unwrap();
        assert_eq!(dissimilarity(d, &a, &a).unwrap(), 0.0);
        assert_eq!(ab, dissimilarity(d, &b, &a).unwrap());
        let ac = dissimilarity(d, &a, &c).unwrap();
        let cb = dissimilarity(d, &c, &b).unwrap();
        assert!(ab <= ac + cb + 1e-12);
        assert!(ab >= 0.0);
    }
}

#[test]
fn realism_and_features_match_batch_evaluation() {
    let m = models(&small16(), 3);
    let d = &m.discriminator;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grids: Vec<VoxelGrid> = (0..3).map(|_| random_grid(16, 0.2, &mut rng)).collect();
    let batch = voxsnap_core::dataset::grids_to_tensor(grids.iter());
    let (scores, feats) = evaluate_batch(d, &batch).unwrap();
    for (i, g) in grids.iter().enumerate() {
        let r = realism(d, g).unwrap();
        assert!(r > 0.0 && r < 1.0);
        assert!((r - scores[i]).abs() < 1e-12);
        let f = features(d, g).unwrap();
        assert_eq!(f.len(), d.arch.feature_len());
        assert!(feature_distance(&f, &feats[i]) < 1e-9);
    }
    let wrong = VoxelGrid::empty(8);
    assert!(matches!(realism(d, &wrong), Err(Error::ResolutionMismatch { expected: 16, got: 8 })));
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let arch = tiny();
    let m = models(&arch, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_grid(8, 0.3, &mut rng);
    let obj = Objective::new(&m.generator, &m.discriminator, &x, 0.7, 0.3).unwrap();
    let z: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (v, g) = obj.value_and_grad(&z).unwrap();
    assert_eq!(v, obj.value(&z).unwrap());
    let expect = 0.7 * v.dissimilarity - 0.3 * v.realism.ln();
    assert!((v.value - expect).abs() < 1e-12);
    let h = 1e-6;
    for i in 0..4 {
        let mut up = z.clone();
        up[i] += h;
        let mut down = z.clone();
        down[i] -= h;
        let fd = (obj.value(&up).unwrap().value - obj.value(&down).unwrap().value) / (2.0 * h);
        let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
        assert!(rel < 1e-4, "dz[{i}]: {} vs {fd}", g[i]);
    }
}

#[test]
fn refinement_never_increases_objective() {
    let arch = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let nets: Vec<Models> = (0..5).map(|s| models(&arch, 100 + s)).collect();
    for trial in 0..1000 {
        let m = &nets[trial % nets.len()];
        let x = random_grid(8, rng.random_range(0.0..0.6), &mut rng);
        let z0: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let steps = rng.random_range(0..6);
        let lr = 10f64.powf(rng.random_range(-3.0..1.5));
        let cfg = SnapConfig {
            lambda1: rng.random_range(0.0..2.0),
            lambda2: rng.random_range(0.0..2.0),
            refine_steps: steps,
            refine_lr: lr,
            ..SnapConfig::default()
        };
        let r = refine_latent(&z0, &x, &m.generator, &m.discriminator, &cfg).unwrap();
        assert!(r.last.value <= r.initial.value, "trial {trial}");
        assert!(r.steps_taken <= steps);
        let obj = Objective::new(&m.generator, &m.discriminator, &x, cfg.lambda1, cfg.lambda2).unwrap();
        assert_eq!(obj.value(&r.z).unwrap(), r.last);

        let b = gradient_baseline_project(&x, &m.generator, &m.discriminator, &z0, steps, lr).unwrap();
        assert!(b.last.value <= b.initial.value, "baseline trial {trial}");
        assert!(b.last.dissimilarity <= b.initial.dissimilarity);
    }
}

#[test]
fn zero_steps_return_start() {
    let m = models(&tiny(), 8);
    let x = random_grid(8, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
    let z0 = vec![0.1, -0.2, 0.3, 0.9];
    let cfg = SnapConfig { refine_steps: 0, ..SnapConfig::default() };
    let r = refine_latent(&z0, &x, &m.generator, &m.discriminator, &cfg).unwrap();
    assert_eq!(r.z, z0);
    assert_eq!(r.initial, r.last);
    assert_eq!(r.steps_taken, 0);
}

#[test]
fn single_term_objectives_move_the_right_quantity() {
    let m = models(&tiny(), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let x = random_grid(8, 0.3, &mut rng);
        let z0: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fit = SnapConfig { lambda1: 1.0, lambda2: 0.0, ..SnapConfig::default() };
        let r = refine_latent(&z0, &x, &m.generator, &m.discriminator, &fit).unwrap();
        assert!(r.last.dissimilarity <= r.initial.dissimilarity);
        let real = SnapConfig { lambda1: 0.0, lambda2: 1.0, ..SnapConfig::default() };
        let r = refine_latent(&z0, &x, &m.generator, &m.discriminator, &real).unwrap();
        assert!(r.last.realism >= r.initial.realism);
    }
}

#[test]
fn refinement_rejects_bad_input() {
    let m = models(&tiny(), 12);
    let x = VoxelGrid::empty(8);
    let cfg = SnapConfig::default();
    assert!(refine_latent(&[0.0; 3], &x, &m.generator, &m.discriminator, &cfg).is_err());
    assert!(refine_latent(&[f64::NAN; 4], &x, &m.generator, &m.discriminator, &cfg).is_err());
    let bad = SnapConfig { threshold: 1.0, ..cfg.clone() };
    assert!(refine_latent(&[0.0; 4], &x, &m.generator, &m.discriminator, &bad).is_err());
    assert!(gradient_baseline_project(&x, &m.generator, &m.discriminator, &[0.0; 4], 3, 0.0).is_err());
    let other = VoxelGrid::empty(16);
    assert!(matches!(
        refine_latent(&[0.0; 4], &other, &m.generator, &m.discriminator, &cfg),
        Err(Error::ResolutionMismatch { .. })
    ));
}

#[test]
fn snap_output_respects_postprocess_and_box() {
    let m = models(&small16(), 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let inputs = [VoxelGrid::empty(16), VoxelGrid::full(16), random_grid(16, 0.2, &mut rng)];
    let cfg = SnapConfig { refine_steps: 3, ..SnapConfig::default() };
    for x in &inputs {
        let r = snap(x, &m, &cfg).unwrap();
        assert!(r.z_initial.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(r.z_final.len(), 8);
        assert!(r.metrics.steps_taken <= 3);
        assert!(r.grid.is_mirror_symmetric(Axis::X));
        assert_eq!(r.grid.is_empty(), r.warnings.iter().any(|w| w == WARN_EMPTY_OUTPUT));
        let again = snap(x, &m, &cfg).unwrap();
        assert_eq!((again.grid, again.z_final), (r.grid.clone(), r.z_final.clone()));

        let json = serde_json::to_value(r.to_json()).unwrap();
        assert!(json["metrics"].get("wall_time").is_none());
        let back = from_base64(json["grid"].as_str().unwrap()).unwrap();
        assert_eq!(back, r.grid);
    }
    assert!(matches!(snap(&VoxelGrid::empty(8), &m, &cfg), Err(Error::ResolutionMismatch { .. })));
}

#[test]
fn finish_grid_honours_switches() {
    let d = 8;
    let mut values = vec![0.0; d * d * d];
    values[0] = 0.9;
    let c = ContinuousGrid::new(d, values).unwrap();
    let off = SnapConfig { component_removal: false, symmetrize: false, ..SnapConfig::default() };
    assert_eq!(finish_grid(&c, &off).unwrap().count(), 1);
    let sym = SnapConfig { component_removal: false, ..SnapConfig::default() };
    assert_eq!(finish_grid(&c, &sym).unwrap().count(), 2);
    let high = SnapConfig { threshold: 0.95, ..off };
    assert!(finish_grid(&c, &high).unwrap().is_empty());
}

#[test]
fn overrides_apply_and_reject_unknown_fields() {
    let o: SnapOverrides = serde_json::from_str(r#"{"lambda2": 0, "refine_steps": 5}"#).unwrap();
    let mut cfg = SnapConfig::default();
    cfg.apply(&o);
    assert_eq!((cfg.lambda2, cfg.refine_steps, cfg.lambda1), (0.0, 5, 1.0));
    assert!(serde_json::from_str::<SnapOverrides>(r#"{"lambda3": 1}"#).is_err());
}

#[test]
fn projection_training_leaves_gan_untouched_and_learns() {
    let arch = small16();
    let m = models(&arch, 15);
    let ds = build_dataset(Category::Chair, 32, 4, 16, 3).unwrap();
    let cfg = ProjTrainConfig { batch_size: 8, epochs: 4, lr: 2e-3, seed: 1, ..ProjTrainConfig::default() };
    let mut seen = Vec::new();
    let (p, log) = train_projection(&ds, &m.generator, &m.discriminator, &cfg, |e, loss, _| {
        seen.push((e, loss));
        Ok(())
    })
    .unwrap();
    assert_eq!(log.epoch_losses.len(), 4);
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    assert!(log.epoch_losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    assert!(log.epoch_losses[3] < log.epoch_losses[0], "{:?}", log.epoch_losses);
    let (p2, log2) = train_projection(&ds, &m.generator, &m.discriminator, &cfg, |_, _, _| Ok(())).unwrap();
    assert!(p.state.bit_identical(&p2.state));
    assert_eq!(log, log2);
}

#[test]
fn correlation_probes_sit_at_requested_radii() {
    let m = models(&small16(), 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let xs: Vec<VoxelGrid> = (0..2).map(|_| random_grid(16, 0.2, &mut rng)).collect();
    let radii = [0.5, 2.0];
    let rows = latent_distance_correlation(&xs, &m, 3, &radii, &mut rng).unwrap();
    assert_eq!(rows.len(), 12);
    for r in &rows {
        assert!((r.distance - r.radius).abs() < 1e-9);
        assert!(r.dissimilarity >= 0.0);
    }
    let u = unit_direction(8, &mut rng);
    assert!((u.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
}
