use std::path::{Path, PathBuf};

use compnn_core::store::{
    decode_tensor, encode_tensor, ingest, ingest_with, read_tensor, write_tensor, IngestOptions, Manifest,
};
use compnn_core::tensor::ActivationTensor;
use compnn_core::Error;
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn corrupt_tensor_fixtures_raise_their_kinds() {
    assert!(matches!(read_tensor(&fixture("bad_magic.chpt")), Err(Error::BadMagic { found, .. }) if &found == b"XXXX"));
    assert!(matches!(
        read_tensor(&fixture("bad_version.chpt")),
        Err(Error::BadVersion { version: 7, .. })
    ));
    assert!(matches!(
        read_tensor(&fixture("truncated.chpt")),
        Err(Error::Truncated { .. })
    ));
    assert!(matches!(
        read_tensor(&fixture("short_header.chpt")),
        Err(Error::Truncated { .. })
    ));
    assert!(matches!(
        read_tensor(&fixture("trailing.chpt")),
        Err(Error::TrailingData { .. })
    ));
    assert!(matches!(
        read_tensor(&fixture("non_finite.chpt")),
        Err(Error::NonFinite { index: 5, .. })
    ));
    assert!(matches!(
        read_tensor(&fixture("absent.chpt")),
        Err(Error::MissingFile { .. })
    ));
}

#[test]
fn unit_fixture_matches_reference_bytes() {
    let t = read_tensor(&fixture("unit.chpt")).unwrap();
    assert_eq!(t.dims(), (1, 1, 1));
    assert_eq!(t.values(), &[1.0]);
    let bytes = std::fs::read(fixture("unit.chpt")).unwrap();
    assert_eq!(encode_tensor(&t), bytes);
    assert_eq!(&bytes[20..], &[0x00, 0x00, 0x80, 0x3f]);
}

#[test]
fn write_then_read_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.chpt");
    let t = ActivationTensor::new("x", 2, 3, 4, (0..24).map(|v| v as f32 * -0.25).collect()).unwrap();
    write_tensor(&t, &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 116);
    let back = read_tensor(&path).unwrap();
    assert_eq!(back.dims(), t.dims());
    assert_eq!(back.values(), t.values());
    let missing_dir = dir.path().join("no/such/dir/t.chpt");
    assert!(matches!(write_tensor(&t, &missing_dir), Err(Error::Io { .. })));
}

proptest! {
    #[test]
    fn tensor_bytes_round_trip(
        (h, w, d, bits) in (1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(h, w, d)| {
            (Just(h), Just(w), Just(d), proptest::collection::vec(any::<u32>(), h * w * d))
        })
    ) {
        let values: Vec<f32> = bits.iter().map(|&b| {
            let v = f32::from_bits(b);
            if v.is_finite() { v } else { f32::from_bits(b & 0x3fff_ffff) }
        }).collect();
        let t = ActivationTensor::new("p", h, w, d, values).unwrap();
        let bytes = encode_tensor(&t);
        let back = decode_tensor(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.dims(), t.dims());
        let same_bits = back.values().iter().zip(t.values()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same_bits);
        prop_assert_eq!(encode_tensor(&back), bytes);
    }
}

#[test]
fn minimal_manifest_ingests() {
    let (db, report) = ingest_with(&fixture("minimal.json"), &IngestOptions::default()).unwrap();
    assert_eq!(db.len(), 1);
    assert_eq!(report.pairs, 1);
    assert_eq!(report.layers, vec!["enc".to_string()]);
    assert_eq!(report.descriptor_layer, None);
    assert_eq!(db.layer_dims("enc"), Some((4, 4, 2)));
    assert_eq!(db.pair(0).unwrap().input_image.get_pixel(1, 2).0, [0, 255, 0]);
    assert!(report.bytes > 148);
}

#[test]
fn ingest_is_idempotent() {
    let a = ingest(&fixture("minimal.json")).unwrap();
    let b = ingest(&fixture("minimal.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ingest_error_fixtures() {
    let err = |name: &str| ingest(&fixture(name)).unwrap_err();
    match err("missing_tensor.json") {
        Error::MissingFile { entry, path } => {
            assert!(entry.contains("pair 0"), "{entry}");
            assert!(path.ends_with("does_not_exist.chpt"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(err("missing_image.json"), Error::MissingFile { .. }));
    match err("depth_mismatch.json") {
        Error::ShapeMismatch { pair, layer, found, .. } => {
            assert_eq!((pair, layer.as_str(), found.as_str()), (0, "enc", "4x4x2"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(err("duplicate_id.json"), Error::DuplicateId(0)));
    assert!(matches!(err("sparse_ids.json"), Error::Manifest { .. }));
    assert!(matches!(err("missing_layer.json"), Error::Manifest { .. }));
    assert!(matches!(err("corrupt_tensor.json"), Error::BadMagic { .. }));
    assert!(matches!(err("image_size_mismatch.json"), Error::ShapeMismatch { .. }));
    assert!(matches!(err("two_descriptors.json"), Error::Manifest { .. }));
    assert!(matches!(err("not_json.json"), Error::Manifest { .. }));
    assert!(matches!(err("no_such_manifest.json"), Error::MissingFile { .. }));
}

#[test]
fn manifest_round_trips_through_json() {
    let m = Manifest::load(&fixture("minimal.json")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    m.save(&path).unwrap();
    assert_eq!(Manifest::load(&path).unwrap(), m);
}

#[test]
fn selective_ingest_still_checks_files() {
    let options = IngestOptions { layers: Some(vec![]) };
    let (db, report) = ingest_with(&fixture("minimal.json"), &options).unwrap();
    assert!(report.loaded_layers.is_empty());
    assert!(db.layer("enc").is_err());
    assert!(matches!(
        ingest_with(&fixture("missing_tensor.json"), &options),
        Err(Error::MissingFile { .. })
    ));
    let unknown = IngestOptions {
        layers: Some(vec!["nope".into()]),
    };
    assert!(matches!(
        ingest_with(&fixture("minimal.json"), &unknown),
        Err(Error::Config(_))
    ));
}
