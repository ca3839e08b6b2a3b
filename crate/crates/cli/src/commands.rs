use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use berrypose::calibration::{fit, objective, split_by_id, CalibrationSample, FitBounds};
use berrypose::dataset_io::{
    read_heatmap, read_params, read_predictions, read_samples, write_dataset, write_heatmap,
    write_heatmap_stack, write_params, write_predictions, write_samples, Dataset, DatasetManifest,
    GeneratorInfo, FORMAT_VERSION, HEATMAP_DIR, PARAMS_FILE,
};
use berrypose::evaluation::{
    evaluate_predictions, kfold, EvalOptions, EvalSummary, Metric, Prediction,
};
use berrypose::synthgen::{generate_dataset, heatmaps_for_record, ProfileRanges, RenderSpec};
use berrypose::{
    decode as decode_stack, default_shape_params, encode as encode_map, estimate_pose,
    AnnotationRecord, HeatmapStack, ImageGrid, KeyPoint, KeypointKind, ShapeParams,
};
use clap::error::ErrorKind;
use rayon::prelude::*;

use crate::{CalibrateArgs, DecodeArgs, EncodeArgs, EstimateArgs, EvaluateArgs, GenerateArgs};

type CmdResult = Result<(), String>;

fn at(path: &Path) -> impl Fn(berrypose::Error) -> String + '_ {
    move |e| format!("{}: {e}", path.display())
}

fn plain(e: impl Display) -> String {
    e.to_string()
}

fn usage(msg: impl Display) -> ! {
    clap::Error::raw(ErrorKind::ValueValidation, format!("{msg}\n")).exit()
}

/// Refuses to write `output` anywhere inside the `input` dataset directory.
fn keep_out_of(input: &Path, output: &Path) -> CmdResult {
    let Ok(input) = input.canonicalize() else {
        return Ok(());
    };
    let absolute = std::env::current_dir()
        .map(|cwd| cwd.join(output))
        .unwrap_or_else(|_| output.to_path_buf());
    // nearest ancestor that exists
    let existing = absolute
        .ancestors()
        .skip(1)
        .find_map(|p| p.canonicalize().ok());
    if existing.is_some_and(|p| p.starts_with(&input)) {
        return Err(format!(
            "refusing to write {} inside the input dataset {}",
            output.display(),
            input.display()
        ));
    }
    Ok(())
}

fn create_parent(path: &Path) -> CmdResult {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).map_err(|e| format!("{}: {e}", p.display()))
        }
        _ => Ok(()),
    }
}

pub fn generate(a: GenerateArgs) -> CmdResult {
    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out)
            .map_err(|e| format!("{}: {e}", a.out.display()))?
            .next()
            .is_some();
        if non_empty && !a.force {
            return Err(format!(
                "{} is not empty (use --force to write into it)",
                a.out.display()
            ));
        }
    }
    let grid = ImageGrid::new(a.grid as usize, a.grid as usize).map_err(plain)?;
    let spec = RenderSpec {
        grid,
        scale: a.scale,
        noise_px: a.noise_px,
        seed: a.seed,
    };
    let ranges = ProfileRanges::default();
    let (berries, views) = (a.berries as usize, a.views as usize);
    let records = generate_dataset(berries, views, &spec, &ranges).map_err(plain)?;
    let manifest = DatasetManifest {
        version: FORMAT_VERSION.to_string(),
        grid,
        record_count: records.len(),
        seed: Some(a.seed),
        generator: Some(GeneratorInfo {
            name: "berrypose-synthgen".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            berries,
            views_per_berry: views,
            scale: a.scale,
            noise_px: a.noise_px,
            profile_ranges: ranges,
        }),
    };
    write_dataset(&a.out, &records, &manifest).map_err(at(&a.out))?;

    if a.heatmaps {
        let dir = a.out.join(HEATMAP_DIR);
        fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let params = default_shape_params();
        records.par_iter().try_for_each(|r| {
            let (top, tip) = heatmaps_for_record(r, &params, a.heatmap_noise_px, a.stages as usize)
                .map_err(|e| format!("record {}: {e}", r.record.id))?;
            write_heatmap_stack(&dir, &r.record.id, &top).map_err(at(&dir))?;
            write_heatmap_stack(&dir, &r.record.id, &tip).map_err(at(&dir))
        })?;
    }
    eprintln!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

pub fn encode(a: EncodeArgs) -> CmdResult {
    let grid = ImageGrid::new(a.width as usize, a.height as usize).map_err(plain)?;
    if !grid.contains(a.x, a.y) {
        usage(format!(
            "key point ({}, {}) lies outside the {}x{} grid",
            a.x, a.y, a.width, a.height
        ));
    }
    let kp = KeyPoint::new(a.x, a.y, a.kind.into());
    let map = encode_map(&kp, grid, a.sigma).map_err(plain)?;
    create_parent(&a.out)?;
    write_heatmap(&a.out, &map).map_err(at(&a.out))
}

pub fn decode(a: DecodeArgs) -> CmdResult {
    let maps = a
        .maps
        .iter()
        .map(|p| read_heatmap(p).map_err(at(p)))
        .collect::<Result<Vec<_>, _>>()?;
    let kind: KeypointKind = a.kind.into();
    let stack = HeatmapStack::new(kind, maps).map_err(plain)?;
    let d = decode_stack(&stack);
    if d.degenerate {
        eprintln!("warning: every map in the stack is zero");
    }
    println!(
        "{{\"kind\":\"{}\",\"x\":{},\"y\":{},\"peak\":{},\"degenerate\":{}}}",
        kind.as_str(),
        d.point.x,
        d.point.y,
        d.peak,
        d.degenerate
    );
    Ok(())
}

/// Explicit file, else `<data>/params.json`, else the built-in constants.
/// A named file that does not exist falls back with a warning.
fn load_params(explicit: Option<&Path>, data: &Path) -> Result<ShapeParams, String> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => data.join(PARAMS_FILE),
    };
    if path.exists() {
        return read_params(&path).map_err(at(&path));
    }
    if explicit.is_some() {
        eprintln!(
            "warning: {} not found, using the default shape parameters",
            path.display()
        );
    }
    Ok(default_shape_params())
}

fn sorted_records(ds: &Dataset) -> Vec<&AnnotationRecord> {
    let mut v: Vec<&AnnotationRecord> = ds.records.iter().collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

pub fn estimate(a: EstimateArgs) -> CmdResult {
    keep_out_of(&a.data, &a.out)?;
    let ds = Dataset::open(&a.data).map_err(at(&a.data))?;
    let params = load_params(a.params.as_deref(), &a.data)?;
    let preds = sorted_records(&ds)
        .par_iter()
        .map(|r| {
            let mask = ds
                .load_mask(r)
                .map_err(|e| format!("record {}: {e}", r.id))?;
            let pose = estimate_pose(&mask, &r.top, &r.tip, &params)
                .map_err(|e| format!("record {}: {e}", r.id))?;
            Ok(Prediction::from_pose(r, &r.top, &r.tip, &pose))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let degenerate = preds.iter().filter(|p| p.degenerate).count();
    if degenerate > 0 {
        eprintln!("warning: {degenerate} records have coincident key points");
    }
    create_parent(&a.out)?;
    write_predictions(&a.out, &preds).map_err(at(&a.out))?;
    eprintln!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn samples_from_dataset(dir: &Path) -> Result<Vec<CalibrationSample>, String> {
    let ds = Dataset::open(dir).map_err(at(dir))?;
    if let Some(r) = ds.records.iter().find(|r| !r.has_orientation()) {
        return Err(format!(
            "record {}: {}",
            r.id,
            berrypose::Error::NoGroundTruth
        ));
    }
    sorted_records(&ds)
        .par_iter()
        .map(|r| {
            let mask = ds
                .load_mask(r)
                .map_err(|e| format!("record {}: {e}", r.id))?;
            CalibrationSample::from_record(r, &mask).map_err(|e| format!("record {}: {e}", r.id))
        })
        .collect()
}

pub fn calibrate(a: CalibrateArgs) -> CmdResult {
    let samples = match (&a.data, &a.samples) {
        (Some(dir), _) => {
            keep_out_of(dir, &a.out)?;
            if let Some(r) = &a.report {
                keep_out_of(dir, r)?;
            }
            samples_from_dataset(dir)?
        }
        (None, Some(path)) => read_samples(path).map_err(at(path))?,
        (None, None) => unreachable!("clap requires one input"),
    };
    if samples.is_empty() {
        return Err(berrypose::Error::NoGroundTruth.to_string());
    }
    if let Some(path) = &a.export_samples {
        create_parent(path)?;
        write_samples(path, &samples).map_err(at(path))?;
    }
    let keyed: Vec<(String, CalibrationSample)> =
        samples.into_iter().map(|s| (s.id.clone(), s)).collect();
    let (train, test) = split_by_id(&keyed, a.test_fraction).map_err(plain)?;
    if train.is_empty() {
        return Err("no training records left after the split".into());
    }
    let init = default_shape_params();
    let report = fit(&train, &init, &FitBounds::default(), a.budget as usize).map_err(plain)?;

    create_parent(&a.out)?;
    write_params(&a.out, &report.fitted).map_err(at(&a.out))?;

    let mut text = format!("training records    {}\n{report}", train.len());
    if !test.is_empty() {
        let held = objective(&report.fitted, &test).map_err(plain)?;
        let base = objective(&init, &test).map_err(plain)?;
        text.push_str(&format!(
            "held-out records    {}\nheld-out objective  {held:.4} deg (initial params {base:.4} deg)\n",
            test.len()
        ));
    }
    match &a.report {
        Some(path) => {
            create_parent(path)?;
            fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => print!("{text}"),
    }
    if !report.converged {
        eprintln!("warning: budget exhausted before the step size converged");
    }
    Ok(())
}

fn prefixed(prefix: &str, name: &str) -> PathBuf {
    PathBuf::from(format!("{prefix}{name}"))
}

fn write_file(path: &Path, fill: impl FnOnce(&mut Vec<u8>) -> berrypose::Result<()>) -> CmdResult {
    let mut buf = Vec::new();
    fill(&mut buf).map_err(at(path))?;
    fs::write(path, buf).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn evaluate(a: EvaluateArgs) -> CmdResult {
    let summary_path = prefixed(&a.out_prefix, "summary.txt");
    keep_out_of(&a.data, &summary_path)?;
    let ds = Dataset::open(&a.data).map_err(at(&a.data))?;
    let preds = read_predictions(&a.pred).map_err(at(&a.pred))?;
    let opts = EvalOptions {
        bin_width: a.bins,
        require_orientation: a.require_orientation,
    };
    let summary = evaluate_predictions(&ds.records, &preds, &opts).map_err(plain)?;
    if summary.missing_ground_truth > 0 {
        eprintln!(
            "warning: {} records lack orientation ground truth; orientation metrics cover the rest",
            summary.missing_ground_truth
        );
    }

    let mut text = summary.to_string();
    if let Some(k) = a.folds {
        text.push_str(&fold_blocks(&ds.records, &preds, k as usize, &opts)?);
    }
    create_parent(&summary_path)?;
    fs::write(&summary_path, &text).map_err(|e| format!("{}: {e}", summary_path.display()))?;
    for m in Metric::ALL {
        if summary.metric(m).is_some() {
            let path = prefixed(&a.out_prefix, &format!("{}.csv", m.name()));
            write_file(&path, |buf| summary.write_csv(m, buf))?;
        }
    }
    let path = prefixed(&a.out_prefix, "records.jsonl");
    write_file(&path, |buf| summary.write_records_jsonl(buf))?;
    print!("{text}");
    Ok(())
}

fn fold_blocks(
    records: &[AnnotationRecord],
    preds: &[Prediction],
    k: usize,
    opts: &EvalOptions,
) -> Result<String, String> {
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let folds = kfold(&ids, k).map_err(plain)?;
    let mut out = String::new();
    for (i, fold) in folds.iter().enumerate() {
        let subset: Vec<AnnotationRecord> = fold.test.iter().map(|&j| records[j].clone()).collect();
        let wanted: std::collections::HashSet<&str> =
            subset.iter().map(|r| r.id.as_str()).collect();
        let sub_preds: Vec<Prediction> = preds
            .iter()
            .filter(|p| wanted.contains(p.id.as_str()))
            .cloned()
            .collect();
        let s: EvalSummary = evaluate_predictions(&subset, &sub_preds, opts).map_err(plain)?;
        out.push_str(&format!("\n== fold {} of {k} ==\n{s}", i + 1));
    }
    Ok(out)
}
