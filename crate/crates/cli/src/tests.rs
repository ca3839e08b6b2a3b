use std::fs;
use std::path::Path;

use berrypose::calibration::inverse_model_samples;
use berrypose::dataset_io::{
    read_heatmap, read_params, read_predictions, read_records, write_predictions, write_records,
    write_samples, RECORDS_FILE,
};
use berrypose::evaluation::Prediction;
use berrypose::heatmap::decode;
use berrypose::{HeatmapStack, KeypointKind, ShapeParams};
use clap::error::ErrorKind;
use clap::Parser;

use crate::{run, Cli, Command};

fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
    Cli::try_parse_from(std::iter::once("berrypose").chain(args.iter().copied()))
}

fn cli(args: &[&str]) -> Result<(), String> {
    run(parse(args).expect("valid arguments").command)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, seed: u64) {
    cli(&[
        "generate",
        "--out",
        s(dir),
        "--berries",
        "3",
        "--views",
        "4",
        "--seed",
        &seed.to_string(),
    ])
    .unwrap();
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        let rel = entry
            .strip_prefix(dir)
            .unwrap()
            .to_string_lossy()
            .into_owned();
        out.push((rel, fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn zero_berries_is_a_usage_error() {
    let err = parse(&["generate", "--out", "x", "--berries", "0", "--views", "3"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn calibrate_needs_data_or_samples() {
    let err = parse(&["calibrate", "--out", "p.json"]).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::MissingRequiredArgument);
    assert_eq!(err.exit_code(), 2);
    assert!(parse(&["calibrate", "--out", "p.json", "--samples", "s.jsonl"]).is_ok());
}

#[test]
fn out_of_range_options_are_rejected() {
    for args in [
        &[
            "evaluate",
            "--data",
            "d",
            "--pred",
            "p",
            "--out-prefix",
            "r/",
            "--bins",
            "0",
        ][..],
        &[
            "evaluate",
            "--data",
            "d",
            "--pred",
            "p",
            "--out-prefix",
            "r/",
            "--bins",
            "91",
        ],
        &[
            "evaluate",
            "--data",
            "d",
            "--pred",
            "p",
            "--out-prefix",
            "r/",
            "--folds",
            "1",
        ],
        &[
            "calibrate",
            "--data",
            "d",
            "--out",
            "p",
            "--test-fraction",
            "1",
        ],
        &["calibrate", "--data", "d", "--out", "p", "--budget", "0"],
        &[
            "generate",
            "--out",
            "x",
            "--berries",
            "1",
            "--views",
            "1",
            "--noise-px",
            "-1",
        ],
        &[
            "encode", "--x", "1", "--y", "1", "--out", "m.pfm", "--sigma", "0",
        ],
    ] {
        let err = parse(args).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{args:?}");
    }
}

#[test]
fn thread_count_from_environment_and_flag() {
    std::env::set_var("BERRYPOSE_THREADS", "3");
    let from_env = parse(&["decode", "a.pfm"]).unwrap();
    let from_flag = parse(&["decode", "a.pfm", "--threads", "2"]).unwrap();
    std::env::remove_var("BERRYPOSE_THREADS");
    assert_eq!(from_env.threads, 3);
    assert_eq!(from_flag.threads, 2);
    assert!(matches!(from_flag.command, Command::Decode(_)));
}

#[test]
fn generate_is_reproducible_and_guards_its_output() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(a.path(), 5);
    generate(b.path(), 5);
    let lines = fs::read_to_string(a.path().join(RECORDS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 12);
    assert_eq!(files(a.path()), files(b.path()));

    let again = cli(&[
        "generate",
        "--out",
        s(a.path()),
        "--berries",
        "1",
        "--views",
        "1",
    ]);
    assert!(again.unwrap_err().contains("not empty"));
    cli(&[
        "generate",
        "--out",
        s(a.path()),
        "--berries",
        "1",
        "--views",
        "2",
        "--force",
    ])
    .unwrap();
    assert_eq!(read_records(&a.path().join(RECORDS_FILE)).unwrap().len(), 2);
}

#[test]
fn generate_can_write_heatmap_stacks() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("set");
    cli(&[
        "generate",
        "--out",
        s(&dir),
        "--berries",
        "1",
        "--views",
        "2",
        "--heatmaps",
        "--stages",
        "2",
    ])
    .unwrap();
    let records = read_records(&dir.join(RECORDS_FILE)).unwrap();
    let map = read_heatmap(
        &dir.join("heatmaps")
            .join(format!("{}_top_1.pfm", records[0].id)),
    )
    .unwrap();
    let d = decode(&HeatmapStack::new(KeypointKind::Top, vec![map]).unwrap());
    assert!(d.point.distance(&records[0].top) <= 1.0);
}

#[test]
fn encoded_map_decodes_to_the_point() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("maps/m.pfm");
    cli(&[
        "encode",
        "--x",
        "40",
        "--y",
        "50",
        "--kind",
        "tip",
        "--out",
        s(&out),
    ])
    .unwrap();
    let map = read_heatmap(&out).unwrap();
    let d = decode(&HeatmapStack::new(KeypointKind::Tip, vec![map]).unwrap());
    assert_eq!((d.point.x, d.point.y), (40.0, 50.0));
    cli(&["decode", s(&out), "--kind", "tip"]).unwrap();
}

#[test]
fn ground_truth_predictions_score_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 1);
    let records = read_records(&data.join(RECORDS_FILE)).unwrap();
    let preds: Vec<Prediction> = records
        .iter()
        .map(|r| Prediction::from_ground_truth(r).unwrap())
        .collect();
    let pred = tmp.path().join("gt.jsonl");
    write_predictions(&pred, &preds).unwrap();
    let prefix = format!("{}/", tmp.path().join("report").display());
    cli(&[
        "evaluate",
        "--data",
        s(&data),
        "--pred",
        s(&pred),
        "--out-prefix",
        &prefix,
        "--folds",
        "3",
    ])
    .unwrap();

    let csv = fs::read_to_string(format!("{prefix}angular_error.csv")).unwrap();
    let mut rows = csv.lines();
    assert_eq!(rows.next(), Some("bin_lo,bin_hi,count,median,mean,std,iqr"));
    let all: Vec<&str> = rows.next().unwrap().split(',').collect();
    assert_eq!(&all[..4], &["all", "all", "12", "0.000000"]);
    for row in rows.filter(|r| !r.ends_with(",0,,,,")) {
        assert_eq!(row.split(',').nth(3), Some("0.000000"), "{row}");
    }
    let summary = fs::read_to_string(format!("{prefix}summary.txt")).unwrap();
    assert_eq!(summary.matches("== fold ").count(), 3);
    let jsonl = fs::read_to_string(format!("{prefix}records.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 12);
}

#[test]
fn evaluate_reports_missing_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 1);
    let records = read_records(&data.join(RECORDS_FILE)).unwrap();
    let preds: Vec<Prediction> = records[1..]
        .iter()
        .map(|r| Prediction::from_ground_truth(r).unwrap())
        .collect();
    let pred = tmp.path().join("p.jsonl");
    write_predictions(&pred, &preds).unwrap();
    let prefix = format!("{}/r_", tmp.path().display());
    let err = cli(&[
        "evaluate",
        "--data",
        s(&data),
        "--pred",
        s(&pred),
        "--out-prefix",
        &prefix,
    ]);
    assert!(err.unwrap_err().contains("1 records have no prediction"));
}

#[test]
fn coincident_key_points_give_a_degenerate_prediction() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 2);
    let path = data.join(RECORDS_FILE);
    let mut records = read_records(&path).unwrap();
    records[4].tip = berrypose::KeyPoint::tip(records[4].top.x, records[4].top.y);
    write_records(&path, &records).unwrap();

    let out = tmp.path().join("pred.jsonl");
    cli(&["estimate", "--data", s(&data), "--out", s(&out)]).unwrap();
    let preds = read_predictions(&out).unwrap();
    assert_eq!(preds.len(), 12);
    let flagged: Vec<&str> = preds
        .iter()
        .filter(|p| p.degenerate)
        .map(|p| p.id.as_str())
        .collect();
    assert_eq!(flagged, [records[4].id.as_str()]);
    let p = preds.iter().find(|p| p.degenerate).unwrap();
    assert_eq!((p.phi, p.theta), (0.0, 90.0));
}

#[test]
fn missing_params_file_falls_back_to_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 3);
    let (a, b) = (tmp.path().join("a.jsonl"), tmp.path().join("b.jsonl"));
    cli(&["estimate", "--data", s(&data), "--out", s(&a)]).unwrap();
    let absent = tmp.path().join("nope.json");
    cli(&[
        "estimate",
        "--data",
        s(&data),
        "--params",
        s(&absent),
        "--out",
        s(&b),
    ])
    .unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn outputs_inside_the_dataset_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 3);
    let inside = data.join("sub/pred.jsonl");
    let err = cli(&["estimate", "--data", s(&data), "--out", s(&inside)]).unwrap_err();
    assert!(err.contains("refusing"), "{err}");
    assert!(!data.join("sub").exists());
    let err = cli(&[
        "calibrate",
        "--data",
        s(&data),
        "--out",
        s(&data.join("p.json")),
    ])
    .unwrap_err();
    assert!(err.contains("refusing"), "{err}");
}

#[test]
fn calibrate_recovers_parameters_from_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let truth = ShapeParams {
        threshold: 150.0,
        alpha: 60.0,
        omega: 45.0,
        sigma_offset: 30.0,
        ..ShapeParams::default()
    };
    let samples = tmp.path().join("s.jsonl");
    write_samples(&samples, &inverse_model_samples(&truth, 1000, 11).unwrap()).unwrap();
    let out = tmp.path().join("fit/params.json");
    let report = tmp.path().join("fit/report.txt");
    cli(&[
        "calibrate",
        "--samples",
        s(&samples),
        "--out",
        s(&out),
        "--report",
        s(&report),
        "--test-fraction",
        "0.2",
    ])
    .unwrap();
    let fitted = read_params(&out).unwrap();
    for (got, want) in [
        (fitted.threshold, truth.threshold),
        (fitted.alpha, truth.alpha),
        (fitted.omega, truth.omega),
        (fitted.sigma_offset, truth.sigma_offset),
    ] {
        assert!((got - want).abs() <= 0.02 * want, "{fitted:?}");
    }
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("training records    800"), "{text}");
    assert!(text.contains("held-out records    200"), "{text}");
}

#[test]
fn calibrate_rejects_data_without_orientation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 4);
    let path = data.join(RECORDS_FILE);
    let mut records = read_records(&path).unwrap();
    records[2].phi_gt = None;
    records[2].theta_gt = None;
    write_records(&path, &records).unwrap();
    let err = cli(&[
        "calibrate",
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("p.json")),
    ])
    .unwrap_err();
    assert!(err.contains(&records[2].id), "{err}");
}
