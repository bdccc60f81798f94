mod common;

use common::*;
use prnu_match::fingerprint::{
    estimate_from_residuals, load_fingerprint, load_residual, read_fingerprint, save_fingerprint, save_residual,
    write_fingerprint, FingerprintDb,
};
use prnu_match::imaging::ImageMeta;
use prnu_match::pcn::{load_model, read_model, save_model, ArchDescriptor, PcnModel};
use prnu_match::residual::NoiseResidual;
use prnu_match::{Error, Plane};

fn fingerprint(id: &str, seed: u64) -> prnu_match::fingerprint::Fingerprint {
    let mut r = rng(seed);
    let w: Vec<Plane> = (0..3).map(|_| random_plane(12, 10, &mut r)).collect();
    let i: Vec<Plane> = (0..3).map(|_| random_plane(12, 10, &mut r).map(|v| 120.0 + 20.0 * v)).collect();
    let pairs: Vec<(&Plane, &Plane)> = w.iter().zip(&i).collect();
    estimate_from_residuals(id, &pairs)
}

#[test]
fn fingerprint_files_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let fp = fingerprint("cam-a", 1);
    let path = dir.path().join("a.prnu");
    save_fingerprint(&fp, &path).unwrap();
    let back = load_fingerprint(&path).unwrap();
    assert_eq!(back, fp);
    let bits = |p: &Plane| p.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.k), bits(&fp.k));
}

#[test]
fn corrupt_fingerprints_are_rejected() {
    let fp = fingerprint("cam-b", 2);
    let mut buf = Vec::new();
    write_fingerprint(&mut buf, &fp).unwrap();

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_fingerprint(&mut bad.as_slice()), Err(Error::Format(_))));

    let mut bad = buf.clone();
    bad[4] = 255;
    match read_fingerprint(&mut bad.as_slice()) {
        Err(Error::Format(msg)) => assert!(msg.contains("unsupported container version 255"), "{msg}"),
        other => panic!("expected a format error, got {other:?}"),
    }

    let short = &buf[..buf.len() - 3];
    assert!(matches!(read_fingerprint(&mut &short[..]), Err(Error::Io(_))));
}

#[test]
fn residual_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(3);
    let w = NoiseResidual::new(random_plane(8, 9, &mut r).map(|v| v as f32 as f64), ImageMeta::for_device("cam-c"));
    let path = dir.path().join("w.prnu");
    save_residual(&w, &path).unwrap();
    let back = load_residual(&path).unwrap();
    assert_eq!(back.values, w.values);
    assert_eq!(back.source_meta.device_id.as_deref(), Some("cam-c"));
}

#[test]
fn database_directories_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let db = FingerprintDb::from_entries([fingerprint("b", 4), fingerprint("a", 5)]).unwrap();
    db.save_dir(dir.path()).unwrap();
    let back = FingerprintDb::load_dir(dir.path()).unwrap();
    assert_eq!(back.ids(), vec!["a", "b"]);
    assert_eq!(back.get("b"), db.get("b"));
    assert!(matches!(
        FingerprintDb::from_entries([fingerprint("a", 6), fingerprint("a", 7)]),
        Err(Error::Duplicate(_))
    ));
}

#[test]
fn model_files_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let model = PcnModel::<f32>::init(ArchDescriptor::default(), 9).unwrap();
    let path = dir.path().join("m.pcnw");
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    let bits = |m: &PcnModel<f32>| m.segments().iter().flat_map(|s| s.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&model));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 2;
    assert!(matches!(read_model(&mut bytes.as_slice()), Err(Error::Format(_))));
    bytes[4] = 1;
    bytes[..4].copy_from_slice(b"PRNU");
    assert!(matches!(read_model(&mut bytes.as_slice()), Err(Error::Format(_))));
}
