mod common;

use common::{oracle_dice, random_mask, rng};
use lesionseg::phantom::{generate_case, PhantomConfig};
use lesionseg::preprocess::*;
use lesionseg::training::Role;
use lesionseg::volume::{BinaryMask, Geometry, Volume};
use rand::Rng;

/// Puts resized mask slices back on the original grid.
fn reassemble(slices: &[TrainingSlice], g: Geometry) -> BinaryMask {
    let mut vox = vec![false; g.len()];
    let plane = g.nx() * g.ny();
    for s in slices {
        let back = unresize_to_original(&s.mask, &s.image.provenance, Interp::Nearest).unwrap();
        let z = s.image.provenance.z;
        for (i, &v) in back.data().iter().enumerate() {
            vox[z * plane + i] = v >= 0.5;
        }
    }
    BinaryMask::new(g, vox).unwrap()
}

#[test]
fn mask_round_trip_through_network_window() {
    let cfg = PreprocessConfig {
        target_rows: 48,
        target_cols: 36,
        ..PreprocessConfig::default()
    };
    for (i, label) in [Role::Normal, Role::Covid].into_iter().enumerate() {
        let case = generate_case(&PhantomConfig::default(), label, i as u64).unwrap();
        for target in [cfg.clone(), PreprocessConfig::default()] {
            let slices = extract_training_slices(&case.ct, &case.lung_mask, &target, "c").unwrap();
            let back = reassemble(&slices, *case.lung_mask.geometry());
            let d = oracle_dice(&case.lung_mask, &back);
            assert!(d >= 0.95, "dice {d} at {}x{}", target.target_rows, target.target_cols);
        }
    }
}

#[test]
fn window_endpoints_are_exact() {
    let cfg = PreprocessConfig::default();
    let g = Geometry::with_dims([2, 1, 1]).unwrap();
    let v = Volume::new(g, vec![-1000, 200]).unwrap();
    assert_eq!(normalize_hu(&v, &cfg).unwrap().voxels(), &[0.0, 1.0]);
}

#[test]
fn identity_resize_is_bit_exact() {
    let mut r = rng(8);
    for _ in 0..20 {
        let (rows, cols) = (r.random_range(2..40), r.random_range(2..40));
        let s = Slice2d::new(rows, cols, (0..rows * cols).map(|_| r.random()).collect()).unwrap();
        assert_eq!(resize_bilinear(&s, rows, cols).unwrap(), s);
        assert_eq!(resize_nearest(&s, rows, cols).unwrap(), s);
    }
}

#[test]
fn bounding_boxes_match_scans() {
    let mut r = rng(9);
    let mut checked = 0;
    while checked < 100 {
        let dims = [r.random_range(1..12), r.random_range(1..12), r.random_range(1..6)];
        let p = r.random_range(0.001..0.2);
        let m = random_mask(&mut r, dims, p);
        if m.count() == 0 {
            assert!(bounding_box(&m, 0).is_err());
            continue;
        }
        let (mut lo, mut hi) = ([usize::MAX; 3], [0usize; 3]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    if m.get(x, y, z) {
                        for (a, v) in [x, y, z].into_iter().enumerate() {
                            lo[a] = lo[a].min(v);
                            hi[a] = hi[a].max(v);
                        }
                    }
                }
            }
        }
        let b = bounding_box(&m, 0).unwrap();
        assert_eq!([b.x, b.y, b.z], [(lo[0], hi[0]), (lo[1], hi[1]), (lo[2], hi[2])]);
        checked += 1;
    }
}
