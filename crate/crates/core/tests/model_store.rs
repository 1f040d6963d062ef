use std::fs;
use std::path::Path;

use wbaug::feature::HistogramParams;
use wbaug::mapping::{ColorTransform, TransformTag};
use wbaug::model::{
    build_model, load_model, save_model, BuildParams, DatasetManifest, Direction, ManifestGroup, WbModel,
    FORMAT_VERSION,
};
use wbaug::synth::{generate_base, make_manifest, CameraEmulation, SyntheticDataset};
use wbaug::Error;

fn small_params(direction: Direction) -> BuildParams {
    BuildParams {
        direction,
        histogram: HistogramParams::with_bins(16),
        feature_dim: 8,
        ..BuildParams::default()
    }
}

fn dataset(dir: &Path, n: u64) -> SyntheticDataset {
    let bases: Vec<_> = (0..n)
        .map(|i| (format!("scene{i:02}"), generate_base(300 + i, 48, 32)))
        .collect();
    make_manifest(&bases, &CameraEmulation::default(), dir).unwrap()
}

fn build(ds: &DatasetManifest, direction: Direction) -> WbModel {
    build_model(ds, &small_params(direction)).unwrap().0
}

#[test]
fn save_load_round_trip_is_lossless() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(tmp.path(), 12);
    for (manifest, direction) in [
        (&ds.manifest, Direction::Emulation),
        (&ds.correction_manifest, Direction::Correction),
    ] {
        let model = build(manifest, direction);
        let path = tmp.path().join("m.wbm");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_bytes(), fs::read(&path).unwrap());
        assert_eq!(back.checksum_hex(), model.checksum_hex());
    }
}

#[test]
fn corrupted_bytes_are_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(tmp.path(), 12);
    let bytes = build(&ds.manifest, Direction::Emulation).to_bytes();

    for pos in [20, bytes.len() / 2, bytes.len() - 9, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x01;
        assert!(matches!(WbModel::from_bytes(&bad), Err(Error::Corrupt(_))), "flip at {pos}");
    }
    for cut in [0, 3, 23, bytes.len() / 3, bytes.len() - 1] {
        assert!(matches!(WbModel::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "cut at {cut}");
    }
    let mut future = bytes.clone();
    future[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match WbModel::from_bytes(&future) {
        Err(Error::UnsupportedVersion { found, supported }) => {
            assert_eq!((found, supported), (FORMAT_VERSION + 1, FORMAT_VERSION));
        }
        other => panic!("expected a version error, got {other:?}"),
    }

    let truncated = tmp.path().join("truncated.wbm");
    fs::write(&truncated, &bytes[..bytes.len() - 100]).unwrap();
    assert!(matches!(load_model(&truncated), Err(Error::Corrupt(_))));
    assert!(matches!(load_model(&tmp.path().join("absent.wbm")), Err(Error::Io { .. })));
}

#[test]
fn manifest_order_does_not_change_the_model() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(tmp.path(), 12);
    let mut shuffled = ds.manifest.clone();
    shuffled.groups.reverse();
    shuffled.groups.swap(1, 7);
    for g in &mut shuffled.groups {
        g.variants.reverse();
    }
    let a = build(&ds.manifest, Direction::Emulation).to_bytes();
    let b = build(&shuffled, Direction::Emulation).to_bytes();
    assert_eq!(a, b);
}

#[test]
fn identity_group_yields_identity_transforms() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(tmp.path(), 12);
    // a group whose "casts" are the correct image itself
    let mut manifest = ds.manifest.clone();
    let first = manifest.groups[0].clone();
    let copy = tmp.path().join("copy.png");
    fs::copy(tmp.path().join(&first.correct), &copy).unwrap();
    manifest.groups[0] = ManifestGroup {
        correct: "copy.png".into(),
        variants: first.variants.iter().map(|(s, _)| (*s, first.correct.clone())).collect(),
    };
    let model = build(&manifest, Direction::Emulation);
    let record = model.record(wbaug::model::record_id("copy.png")).unwrap();
    for stored in &record.transforms {
        let id = ColorTransform::identity(stored.transform.tag());
        for (a, b) in stored.transform.matrix().iter().flatten().zip(id.matrix().iter().flatten()) {
            assert!((a - b).abs() < 1e-9, "{} differs from identity", stored.transform.tag());
        }
        assert!(stored.residual < 1e-9);
    }
}

#[test]
fn build_rejects_bad_groups_and_reports_them() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(tmp.path(), 12);
    let mut manifest = ds.manifest.clone();
    // a missing file and a group with fewer settings than the rest
    manifest.groups[0].variants[3].1 = "nowhere.png".into();
    manifest.groups[1].variants.truncate(4);
    let (model, report) = build_model(&manifest, &small_params(Direction::Emulation)).unwrap();
    assert_eq!(report.accepted_groups, 10);
    assert_eq!(report.rejected.len(), 2);
    assert_eq!(model.records.len(), 10);
    assert_eq!(model.vocabulary.len(), 10);

    // too few records left for the requested PCA dimension
    let few = DatasetManifest {
        base_dir: manifest.base_dir.clone(),
        groups: ds.manifest.groups[..5].to_vec(),
    };
    assert!(matches!(
        build_model(&few, &small_params(Direction::Emulation)),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn correction_model_holds_one_record_per_cast() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(tmp.path(), 12);
    let model = build(&ds.correction_manifest, Direction::Correction);
    assert_eq!(model.records.len(), 120);
    assert_eq!(model.vocabulary.len(), 10);
    for r in &model.records {
        assert_eq!(r.transforms.len(), 1);
        assert_eq!(r.transforms[0].transform.tag(), TransformTag::Corrected);
        assert!(r.source_setting.is_some());
    }
}
