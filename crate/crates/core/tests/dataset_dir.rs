use std::fs;
use std::path::Path;

use berrypose::dataset_io::{
    read_heatmap_stack, read_records, write_dataset, write_heatmap_stack, write_records, Dataset,
    DatasetManifest, MANIFEST_FILE, RECORDS_FILE,
};
use berrypose::heatmap::decode;
use berrypose::synthgen::{generate_dataset, heatmaps_for_record, ProfileRanges, RenderSpec};
use berrypose::{default_shape_params, AnnotationRecord, Error, ImageGrid, KeyPoint, KeypointKind};

fn small_dataset(dir: &Path, seed: u64) {
    let spec = RenderSpec {
        seed,
        noise_px: 0.5,
        ..RenderSpec::default()
    };
    let records = generate_dataset(3, 4, &spec, &ProfileRanges::default()).unwrap();
    let mut manifest = DatasetManifest::new(spec.grid, records.len());
    manifest.seed = Some(seed);
    write_dataset(dir, &records, &manifest).unwrap();
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), 4);
    let ds = Dataset::open(tmp.path()).unwrap();
    assert_eq!(ds.records.len(), 12);
    assert_eq!(ds.manifest.seed, Some(4));

    let spec = RenderSpec {
        seed: 4,
        noise_px: 0.5,
        ..RenderSpec::default()
    };
    let fresh = generate_dataset(3, 4, &spec, &ProfileRanges::default()).unwrap();
    let loaded = ds.load_all().unwrap();
    for (orig, (record, mask)) in fresh.iter().zip(&loaded) {
        assert_eq!(&orig.record, record);
        assert_eq!(&orig.mask, mask);
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    small_dataset(a.path(), 9);
    small_dataset(b.path(), 9);
    assert_eq!(tree(a.path()), tree(b.path()));
    let c = tempfile::tempdir().unwrap();
    small_dataset(c.path(), 10);
    assert_ne!(tree(a.path()), tree(c.path()));
}

#[test]
fn manifest_count_must_match() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), 1);
    let path = tmp.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("\"record_count\": 12", "\"record_count\": 13");
    fs::write(&path, text).unwrap();
    assert!(matches!(
        Dataset::open(tmp.path()),
        Err(Error::MalformedFile { .. })
    ));
}

#[test]
fn unknown_version_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), 1);
    let path = tmp.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("\"version\": \"1\"", "\"version\": \"7\"");
    fs::write(&path, text).unwrap();
    assert!(matches!(
        Dataset::open(tmp.path()),
        Err(Error::MalformedFile { .. })
    ));
}

#[test]
fn key_points_off_the_grid_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), 2);
    let path = tmp.path().join(RECORDS_FILE);
    let mut records = read_records(&path).unwrap();
    records[5].tip = KeyPoint::tip(300.0, 10.0);
    write_records(&path, &records).unwrap();
    match Dataset::open(tmp.path()) {
        Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 6),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_mask_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), 2);
    let ds = Dataset::open(tmp.path()).unwrap();
    fs::remove_file(ds.mask_path(&ds.records[3])).unwrap();
    let (id, _) = ds.load_all().unwrap_err();
    assert_eq!(id, ds.records[3].id);
}

#[test]
fn hundred_records_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("r.jsonl");
    let records: Vec<AnnotationRecord> = (0..100)
        .map(|i| {
            let f = i as f64;
            AnnotationRecord {
                id: format!("rec{i:03}"),
                top: KeyPoint::top(f * 2.5, 255.0 - f * 1.25),
                tip: KeyPoint::tip((i * 123_457 % 255_000) as f64 / 1e6, f),
                phi_gt: (i % 3 != 0).then(|| -180.0 + f * 3.6),
                theta_gt: (i % 3 != 0).then_some(f * 0.9),
                mask_path: format!("masks/rec{i:03}.pgm"),
            }
        })
        .collect();
    write_records(&path, &records).unwrap();
    assert_eq!(read_records(&path).unwrap(), records);
}

#[test]
fn heatmap_stacks_survive_the_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let records =
        generate_dataset(1, 2, &RenderSpec::default(), &ProfileRanges::default()).unwrap();
    let (top, tip) = heatmaps_for_record(&records[1], &default_shape_params(), 0.0, 3).unwrap();
    let id = &records[1].record.id;
    write_heatmap_stack(tmp.path(), id, &top).unwrap();
    write_heatmap_stack(tmp.path(), id, &tip).unwrap();
    assert!(tmp.path().join(format!("{id}_tip_2.pfm")).exists());
    let back = read_heatmap_stack(tmp.path(), id, KeypointKind::Tip).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back.grid(), ImageGrid::default());
    assert_eq!(decode(&back).point, decode(&tip).point);
    assert!(matches!(
        read_heatmap_stack(tmp.path(), "nope", KeypointKind::Top),
        Err(Error::EmptyStack)
    ));
}
