use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxsnap_core::dataset::*;
use voxsnap_core::voxel::{remove_small_components, Axis, Connectivity, VoxelGrid};

fn chair(seat_height: f64, armrests: bool, swivel: bool) -> ShapeSpec {
    ShapeSpec::Chair(ChairParams {
        seat_height,
        seat_width: 0.625,
        seat_depth: 0.625,
        seat_thickness: 0.125,
        back_height: 0.25,
        back_thickness: 0.0625,
        leg_thickness: 0.0625,
        arm_height: 0.125,
        armrests,
        swivel,
    })
}

#[test]
fn plain_chair_volume_matches_box_arithmetic() {
    // At 16³: legs 1×8×1, seat 10×2×10, back 10×4×1 on top of the seat.
    let g = gen_procedural_shape(&chair(0.5, false, false), 16).unwrap();
    let legs = 4 * (1 * 1 * 8);
    let seat = 10 * 10 * 2;
    let back = 10 * 4 * 1;
    assert_eq!(g.count(), legs + seat + back);
    // Seat occupies y = 8..10 over x = 3..13, z = 3..13.
    assert!(g.get(3, 8, 3) && g.get(12, 9, 12) && !g.get(2, 8, 3));
    // Back sits at the rear edge above the seat.
    assert!(g.get(3, 10, 12) && g.get(12, 13, 12) && !g.get(3, 14, 12) && !g.get(3, 10, 11));
    // Legs at the four corners.
    for (x, z) in [(3, 3), (12, 3), (3, 12), (12, 12)] {
        assert!((0..8).all(|y| g.get(x, y, z)));
    }
}

#[test]
fn part_volumes_sum_when_disjoint() {
    for (arms, swivel) in [(false, false), (true, false), (false, true), (true, true)] {
        let spec = chair(0.4, arms, swivel);
        let parts = layout(&spec, 32).unwrap();
        let g = gen_procedural_shape(&spec, 32).unwrap();
        let mut union = VoxelGrid::empty(32);
        let mut overlap_free = true;
        for p in &parts {
            let mut this = VoxelGrid::empty(32);
            this.fill_box(p.lo, p.hi);
            assert_eq!(this.count(), p.volume());
            overlap_free &= this.occupied().all(|i| !union.get_index(i));
            for i in this.occupied() {
                union.set_index(i, true);
            }
        }
        assert_eq!(union, g);
        if overlap_free {
            assert_eq!(g.count(), parts.iter().map(Part::volume).sum::<usize>());
        }
    }
}

#[test]
fn shapes_connected_symmetric_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for category in Category::ALL {
        for _ in 0..150 {
            let spec = sample_spec(category, &mut rng);
            spec.validate().unwrap();
            for dim in SUPPORTED_DIMS {
                if dim == 64 && rand::Rng::random_bool(&mut rng, 0.8) {
                    continue;
                }
                let g = gen_procedural_shape(&spec, dim).unwrap();
                assert!(g.is_mirror_symmetric(Axis::X), "{spec:?} at {dim}");
                assert_eq!(voxsnap_core::voxel::count_components(&g, Connectivity::Six), 1, "{spec:?} at {dim}");
                assert_eq!(gen_procedural_shape(&spec, dim).unwrap(), g);
            }
        }
    }
}

#[test]
fn sample_spec_is_reproducible_and_flag_rates_hold() {
    let a = sample_spec(Category::Chair, &mut ChaCha8Rng::seed_from_u64(9));
    let b = sample_spec(Category::Chair, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);

    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut arms, mut swivel) = (0usize, 0usize);
    for _ in 0..n {
        let ShapeSpec::Chair(p) = sample_spec(Category::Chair, &mut rng) else {
            unreachable!()
        };
        ShapeSpec::Chair(p).validate().unwrap();
        arms += p.armrests as usize;
        swivel += p.swivel as usize;
    }
    let within = |count: usize, p: f64| {
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        (count as f64 - n as f64 * p).abs() <= 3.0 * sd
    };
    assert!(within(arms, ARMREST_PROBABILITY), "armrests {arms}");
    assert!(within(swivel, SWIVEL_PROBABILITY), "swivel {swivel}");
}

#[test]
fn build_dataset_counts_determinism_connectivity() {
    let ds = build_dataset(Category::Chair, 512, 64, 16, 7).unwrap();
    assert_eq!(ds.len(), 576);
    assert_eq!(ds.split(Split::Train).count(), 512);
    assert_eq!(ds.split(Split::Heldout).count(), 64);
    assert_eq!(ds, build_dataset(Category::Chair, 512, 64, 16, 7).unwrap());
    let modified = ds
        .examples()
        .iter()
        .filter(|e| remove_small_components(&e.grid, 0.1, Connectivity::TwentySix).unwrap() != e.grid)
        .count();
    assert_eq!(modified, 0);
    let distinct: std::collections::HashSet<_> = ds.examples().iter().map(|e| &e.grid).collect();
    assert!(distinct.len() > 400, "only {} distinct chairs", distinct.len());
    assert!(build_dataset(Category::Chair, 0, 4, 16, 7).is_err());
}

#[test]
fn batching_contract() {
    let ds = build_dataset(Category::Table, 512, 4, 8, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches: Vec<_> = ds.batches(Split::Train, 100, false, &mut rng).unwrap().collect();
    assert_eq!(batches.len(), 5);
    assert!(batches.iter().all(|b| b.shape() == [100, 1, 8, 8, 8]));
    let train = ds.grids(Split::Train);
    assert_eq!(batches[1].data()[..512], train[100].to_values()[..]);
    assert!(batches[0].data().iter().all(|&v| v == 0.0 || v == 1.0));

    let shuffled: Vec<_> = ds.batches(Split::Train, 100, true, &mut rng).unwrap().collect();
    let again: Vec<_> = ds.batches(Split::Train, 100, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().collect();
    let first: Vec<_> = ds.batches(Split::Train, 100, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().collect();
    assert_eq!(again, first);
    assert_ne!(shuffled[0], batches[0]);

    // Every example appears exactly once across an epoch of full batches
    // plus the dropped remainder.
    let key = |v: &[f64]| v.iter().map(|&x| x as u8).collect::<Vec<u8>>();
    let mut seen: Vec<Vec<u8>> = first.iter().flat_map(|b| b.data().chunks(512).map(key).collect::<Vec<_>>()).collect();
    assert_eq!(seen.len(), 500);
    let mut all: Vec<Vec<u8>> = train.iter().map(|g| key(&g.to_values())).collect();
    seen.sort();
    all.sort();
    let mut rest = all.clone();
    for s in &seen {
        let pos = rest.iter().position(|r| r == s).expect("batch item from the train split");
        rest.remove(pos);
    }
    assert_eq!(rest.len(), 12);

    let unshuffled_items: Vec<Vec<u8>> = batches.iter().flat_map(|b| b.data().chunks(512).map(key).collect::<Vec<_>>()).collect();
    let first_500: Vec<Vec<u8>> = train[..500].iter().map(|g| key(&g.to_values())).collect();
    assert_eq!(unshuffled_items, first_500);

    let empty = Dataset::new(8, vec![]).unwrap();
    assert!(empty.batches(Split::Train, 1, false, &mut rng).is_err());
    assert!(ds.batches(Split::Train, 0, false, &mut rng).is_err());
}

#[test]
fn manifest_round_trip_keeps_splits() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build_dataset(Category::Airplane, 6, 3, 16, 2).unwrap();
    ds.save(dir.path()).unwrap();
    let loaded = Dataset::load_manifest(&dir.path().join(MANIFEST_NAME)).unwrap();
    assert_eq!(loaded.len(), 9);
    for (a, b) in ds.examples().iter().zip(loaded.examples()) {
        assert_eq!((a.split, a.category, &a.grid), (b.split, b.category, &b.grid));
    }
    assert_eq!(loaded.split(Split::Heldout).count(), 3);

    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "x.vxgb\tchair\n").unwrap();
    assert!(Dataset::load_manifest(&bad).is_err());
}

#[test]
fn config_json_round_trip() {
    let cfg = DatasetConfig::default();
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<DatasetConfig>(&json).unwrap(), cfg);
    assert_eq!(cfg.build().unwrap().len(), 576);
}
