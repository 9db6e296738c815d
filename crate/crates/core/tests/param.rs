mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sfkit::camera::{unproject as unproject_grid, CameraIntrinsics, Interpolation};
use sfkit::param::{cso_to_ddof, cso_to_ep, ddof_to_cso, ep_to_cso, from_cso, to_cso, SfRepresentation};
use sfkit::synthworld::{render, SceneSpec};
use sfkit::tensors::{FieldGrid, SfKind, ValidityMask};

use common::*;

#[test]
fn ep_is_start_plus_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let sf = random_grid(&mut rng, h, w, 3, -3.0, 3.0);
        // |x| < 8 keeps the f32 rounding of the sum below 1e-6.
        let x1 = random_grid(&mut rng, h, w, 3, -8.0, 8.0);
        let ep = cso_to_ep(&sf, &x1).unwrap();
        let back = ep_to_cso(&ep, &x1).unwrap();
        for i in 0..h * w {
            assert!(norm(sub(point(&ep, i), add(point(&x1, i), point(&sf, i)))) <= 1e-6);
            assert!(norm(sub(point(&back, i), point(&sf, i))) <= 1e-6);
        }
    }
    let a = FieldGrid::zeros(2, 2, 3);
    assert!(cso_to_ep(&a, &FieldGrid::zeros(2, 3, 3)).is_err());
}

#[test]
fn ddof_components_match_projection_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k = CameraIntrinsics::new(80.0, 75.0, 6.0, 5.0).unwrap();
    let depth = random_grid(&mut rng, 11, 13, 1, 2.0, 9.0);
    let x1 = unproject_grid(&depth, &k);
    let sf = random_grid(&mut rng, 11, 13, 3, -0.5, 0.5);
    let mask = random_mask(&mut rng, 11, 13, 0.8);
    let (mu, dd, m) = cso_to_ddof(&sf, &x1, &mask, &k).unwrap();
    for i in 0..11 * 13 {
        assert_eq!(m.is_valid(i), mask.is_valid(i));
        if !mask.is_valid(i) {
            continue;
        }
        let start = point(&x1, i);
        let end = add(start, point(&sf, i));
        let (a, b) = (project(&k, start).unwrap(), project(&k, end).unwrap());
        assert!((mu.data()[2 * i] as f64 - (b[0] - a[0])).abs() < 1e-4);
        assert!((mu.data()[2 * i + 1] as f64 - (b[1] - a[1])).abs() < 1e-4);
        assert!((dd.data()[i] as f64 - (end[2] - start[2])).abs() < 1e-5);
    }
}

#[test]
fn end_points_behind_the_camera_are_invalid_in_ddof() {
    let k = CameraIntrinsics::new(10.0, 10.0, 0.0, 0.0).unwrap();
    let x1 = FieldGrid::new(1, 1, 3, vec![0.0, 0.0, 1.0]).unwrap();
    let sf = FieldGrid::new(1, 1, 3, vec![0.0, 0.0, -2.0]).unwrap();
    let (_, _, m) = cso_to_ddof(&sf, &x1, &ValidityMask::ones(1, 1), &k).unwrap();
    assert_eq!(m.count_valid(), 0);
}

#[test]
fn ddof_round_trip_is_exact_on_integer_flow_scenes() {
    for seed in 0..10 {
        let (sample, gt) = render(&SceneSpec::integer_flow(seed, 20, 20)).unwrap();
        let k = sample.intrinsics;
        let x1 = unproject_grid(&sample.d1, &k);
        let (mu, dd, m) = cso_to_ddof(&gt.sf, &x1, &gt.mask_sf, &k).unwrap();
        for mode in [Interpolation::Bilinear, Interpolation::Nearest] {
            let (back, m_back) = ddof_to_cso(&mu, &dd, &x1, &m, &k, mode).unwrap();
            let mut checked = 0;
            for i in 0..400 {
                assert!(!m_back.is_valid(i) || m.is_valid(i));
                if m_back.is_valid(i) {
                    checked += 1;
                    assert!(norm(sub(point(&back, i), point(&gt.sf, i))) <= 1e-5);
                }
            }
            assert!(checked > 0);
        }
    }
}

#[test]
fn generic_conversion_dispatch_is_consistent() {
    let (sample, gt) = render(&SceneSpec::integer_flow(3, 16, 16)).unwrap();
    let k = sample.intrinsics;
    let x1 = unproject_grid(&sample.d1, &k);
    for kind in [SfKind::Cso, SfKind::Ep, SfKind::Ddof] {
        let (rep, m) = from_cso(&gt.sf, &x1, &gt.mask_sf, &k, kind).unwrap();
        assert_eq!(rep.kind, kind);
        let (cso, m2) = to_cso(&rep, &x1, &m, &k, Interpolation::Bilinear).unwrap();
        for i in 0..256 {
            if m2.is_valid(i) {
                assert!(norm(sub(point(&cso, i), point(&gt.sf, i))) <= 1e-5, "{kind:?}");
            }
        }
    }
    let bogus = SfRepresentation {
        kind: SfKind::Ddof,
        payload: FieldGrid::zeros(16, 16, 2),
    };
    assert!(to_cso(&bogus, &x1, &gt.mask_sf, &k, Interpolation::Bilinear).is_err());
}
