mod common;

use std::fs;

use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sfkit::camera::{CameraIntrinsics, RelativePose};
use sfkit::tensors::{read_meta, read_sample, write_sample, FieldGrid, SampleRecord, SfKind, ValidityMask};
use sfkit::Error;

use common::*;

fn record(seed: u64) -> SampleRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
    let sf = rng.gen_bool(0.5);
    SampleRecord {
        d1: random_grid(&mut rng, h, w, 1, 0.0, 50.0),
        m_d1: random_mask(&mut rng, h, w, 0.5),
        d2: random_grid(&mut rng, h, w, 1, 0.0, 50.0),
        m_d2: random_mask(&mut rng, h, w, 0.5),
        flow_fwd: random_grid(&mut rng, h, w, 2, -9.0, 9.0),
        m_flow_fwd: random_mask(&mut rng, h, w, 0.5),
        flow_bwd: rng.gen_bool(0.5).then(|| {
            (
                random_grid(&mut rng, h, w, 2, -9.0, 9.0),
                random_mask(&mut rng, h, w, 0.5),
            )
        }),
        sf: sf.then(|| {
            (
                random_grid(&mut rng, h, w, 3, -2.0, 2.0),
                random_mask(&mut rng, h, w, 0.5),
            )
        }),
        sf_kind: if sf && rng.gen_bool(0.5) {
            SfKind::Ep
        } else {
            SfKind::Cso
        },
        intrinsics: CameraIntrinsics::new(rng.gen_range(1.0..999.0), rng.gen_range(1.0..999.0), 0.1, -3.7).unwrap(),
        pose_1_to_2: RelativePose::from_axis_angle(
            Vector3::new(rng.gen_range(-1.0..1.0), 0.3, -0.2),
            Vector3::new(0.1, rng.gen_range(-5.0..5.0), 1e-9),
        ),
        metric: rng.gen_bool(0.5),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_read_write_is_byte_identical(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let rec = record(seed);
        write_sample(&rec, &dir.path().join("a")).unwrap();
        let back = read_sample(&dir.path().join("a")).unwrap();
        prop_assert_eq!(&back, &rec);
        write_sample(&back, &dir.path().join("b")).unwrap();
        for entry in fs::read_dir(dir.path().join("a")).unwrap() {
            let name = entry.unwrap().file_name();
            let a = fs::read(dir.path().join("a").join(&name)).unwrap();
            let b = fs::read(dir.path().join("b").join(&name)).unwrap();
            prop_assert!(a == b, "{:?} differs", name);
        }
    }
}

#[test]
fn tensors_are_raw_little_endian_row_major() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = record(1);
    rec.d1 = FieldGrid::from_fn(2, 3, 1, |r, c, o| o[0] = (r * 3 + c) as f32 * 1.5);
    let (h, w) = (2, 3);
    rec.m_d1 = ValidityMask::from_fn(h, w, |r, c| (r + c) % 2 == 0);
    rec.d2 = FieldGrid::zeros(h, w, 1);
    rec.m_d2 = ValidityMask::ones(h, w);
    rec.flow_fwd = FieldGrid::from_fn(h, w, 2, |r, c, o| {
        o[0] = c as f32;
        o[1] = -(r as f32);
    });
    rec.m_flow_fwd = ValidityMask::ones(h, w);
    rec.flow_bwd = None;
    rec.sf = None;
    rec.sf_kind = SfKind::Cso;
    write_sample(&rec, dir.path()).unwrap();

    let mut expected = Vec::new();
    for x in [0.0f32, 1.5, 3.0, 4.5, 6.0, 7.5] {
        expected.extend_from_slice(&x.to_le_bytes());
    }
    assert_eq!(fs::read(dir.path().join("d1.f32")).unwrap(), expected);
    assert_eq!(fs::read(dir.path().join("m_d1.u8")).unwrap(), vec![1, 0, 1, 0, 1, 0]);
    let flow = fs::read(dir.path().join("flow_fwd.f32")).unwrap();
    let second: [u8; 4] = flow[8..12].try_into().unwrap();
    assert_eq!(f32::from_le_bytes(second), 1.0, "pixel (row 0, col 1) channel 0");
    assert!(!dir.path().join("sf.f32").exists());

    let meta = read_meta(dir.path()).unwrap();
    assert_eq!((meta.height, meta.width), (2, 3));
    let text = fs::read_to_string(dir.path().join("meta.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(
        json["intrinsics"][0].is_string(),
        "intrinsics stored as decimal strings"
    );
    assert!(json["pose_1_to_2"][15].is_string());
}

#[test]
fn corrupt_containers_are_rejected_with_field_names() {
    let dir = tempfile::tempdir().unwrap();
    let rec = record(2);
    write_sample(&rec, dir.path()).unwrap();
    let path = dir.path().join("d2.f32");
    let mut bytes = fs::read(&path).unwrap();
    bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&path, &bytes).unwrap();
    match read_sample(dir.path()) {
        Err(Error::NonFinite { field, index }) => assert_eq!((field.as_str(), index), ("d2", 0)),
        other => panic!("expected NonFinite, got {other:?}"),
    }
    fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(read_sample(dir.path()).is_err());

    write_sample(&rec, dir.path()).unwrap();
    fs::write(dir.path().join("m_d1.u8"), vec![2u8; rec.d1.len_pixels()]).unwrap();
    assert!(read_sample(dir.path()).is_err());

    write_sample(&rec, dir.path()).unwrap();
    fs::remove_file(dir.path().join("flow_fwd.f32")).unwrap();
    assert!(read_sample(dir.path()).is_err());
}

#[test]
fn stale_optional_fields_are_removed_on_rewrite() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = record(3);
    let (h, w) = (rec.d1.height(), rec.d1.width());
    rec.sf = Some((FieldGrid::zeros(h, w, 3), ValidityMask::ones(h, w)));
    write_sample(&rec, dir.path()).unwrap();
    rec.sf = None;
    rec.sf_kind = SfKind::Cso;
    write_sample(&rec, dir.path()).unwrap();
    assert_eq!(read_sample(dir.path()).unwrap().sf, None);
    assert!(!dir.path().join("sf.f32").exists());
}
