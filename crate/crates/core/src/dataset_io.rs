//! On-disk formats.
//!
//! A dataset directory looks like
//!
//! ```text
//! manifest.json
//! records.jsonl
//! masks/<id>.pgm
//! heatmaps/<id>_{top|tip}_<stage>.pfm   (optional)
//! params.json                           (optional)
//! ```
//!
//! Masks are binary PGM (`P5`, maxval 255, fruit = 255). Heat maps are
//! little-endian grayscale PFM with rows stored bottom to top, as the format
//! prescribes. Records are JSON lines with a fixed field order and key points
//! written with six fractional digits.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calibration::CalibrationSample;
use crate::error::{Error, Result};
use crate::evaluation::Prediction;
use crate::heatmap::{Heatmap, HeatmapStack};
use crate::synthgen::{ProfileRanges, SyntheticRecord};
use crate::types::{
    validate_record, AnnotationRecord, ImageGrid, KeyPoint, KeypointKind, ShapeParams,
    SilhouetteMask,
};

pub const FORMAT_VERSION: &str = "1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const PARAMS_FILE: &str = "params.json";
pub const MASK_DIR: &str = "masks";
pub const HEATMAP_DIR: &str = "heatmaps";

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Splits a Netpbm-style header into `count` whitespace separated tokens,
/// skipping `#` comments, and returns them with the offset of the first
/// data byte (one whitespace character after the last token).
fn netpbm_header(bytes: &[u8], count: usize) -> std::result::Result<(Vec<String>, usize), String> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        match bytes.get(i) {
            None => return Err("truncated header".into()),
            Some(b'#') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => i += 1,
            Some(_) => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
                    i += 1;
                }
                tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
            }
        }
    }
    match bytes.get(i) {
        Some(c) if c.is_ascii_whitespace() => Ok((tokens, i + 1)),
        _ => Err("header must end with a single whitespace byte".into()),
    }
}

fn parse_dims(w: &str, h: &str) -> std::result::Result<ImageGrid, String> {
    let w: usize = w.parse().map_err(|_| format!("bad width {w:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height {h:?}"))?;
    ImageGrid::new(w, h).map_err(|e| e.to_string())
}

pub fn encode_pgm(mask: &SilhouetteMask) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", mask.width(), mask.height());
    let mut out = Vec::with_capacity(header.len() + mask.bits().len());
    out.extend_from_slice(header.as_bytes());
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// `path` is only used for error messages.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<SilhouetteMask> {
    let (tokens, offset) = netpbm_header(bytes, 4).map_err(|r| malformed(path, r))?;
    if tokens[0] != "P5" {
        return Err(malformed(
            path,
            format!("expected P5, found {:?}", tokens[0]),
        ));
    }
    let grid = parse_dims(&tokens[1], &tokens[2]).map_err(|r| malformed(path, r))?;
    if tokens[3] != "255" {
        return Err(malformed(
            path,
            format!("maxval must be 255, found {}", tokens[3]),
        ));
    }
    let data = &bytes[offset..];
    if data.len() != grid.len() {
        return Err(malformed(
            path,
            format!("expected {} pixel bytes, found {}", grid.len(), data.len()),
        ));
    }
    let mut bits = Vec::with_capacity(grid.len());
    for (i, &v) in data.iter().enumerate() {
        match v {
            0 => bits.push(false),
            255 => bits.push(true),
            value => {
                return Err(Error::NonBinaryPixelValue {
                    offset: offset + i,
                    value,
                })
            }
        }
    }
    SilhouetteMask::new(grid, bits)
}

pub fn write_mask(path: &Path, mask: &SilhouetteMask) -> Result<()> {
    fs::write(path, encode_pgm(mask))?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<SilhouetteMask> {
    decode_pgm(&fs::read(path)?, path)
}

/// Encodes row-major values (top row first) as PFM. Values must lie in
/// [0, 1]; they are stored as 32-bit floats.
pub fn encode_pfm(grid: ImageGrid, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "expected {} values, got {}",
            grid.len(),
            values.len()
        )));
    }
    if let Some((index, &value)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::OutOfRangeValue { index, value });
    }
    let header = format!("Pf\n{} {}\n-1.0\n", grid.width, grid.height);
    let mut out = Vec::with_capacity(header.len() + 4 * values.len());
    out.extend_from_slice(header.as_bytes());
    for row in values.chunks(grid.width).rev() {
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Heatmap> {
    let (tokens, offset) = netpbm_header(bytes, 4).map_err(|r| malformed(path, r))?;
    if tokens[0] != "Pf" {
        return Err(malformed(
            path,
            format!("expected Pf, found {:?}", tokens[0]),
        ));
    }
    let grid = parse_dims(&tokens[1], &tokens[2]).map_err(|r| malformed(path, r))?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| malformed(path, format!("bad scale {:?}", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(malformed(path, "scale must be nonzero"));
    }
    let little = scale < 0.0;
    let data = &bytes[offset..];
    if data.len() != 4 * grid.len() {
        return Err(malformed(
            path,
            format!(
                "expected {} data bytes, found {}",
                4 * grid.len(),
                data.len()
            ),
        ));
    }
    let mut values = vec![0.0f64; grid.len()];
    for (file_row, chunk) in data.chunks(4 * grid.width).enumerate() {
        let y = grid.height - 1 - file_row;
        for (x, b) in chunk.chunks_exact(4).enumerate() {
            let b = [b[0], b[1], b[2], b[3]];
            let v = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
            values[y * grid.width + x] = v as f64;
        }
    }
    Heatmap::new(grid, values)
}

pub fn write_heatmap(path: &Path, map: &Heatmap) -> Result<()> {
    fs::write(path, encode_pfm(map.grid(), map.values())?)?;
    Ok(())
}

pub fn read_heatmap(path: &Path) -> Result<Heatmap> {
    decode_pfm(&fs::read(path)?, path)
}

pub fn heatmap_file_name(id: &str, kind: KeypointKind, stage: usize) -> String {
    format!("{id}_{}_{stage}.pfm", kind.as_str())
}

/// Writes every map of `stack` under `dir` using the dataset naming scheme.
pub fn write_heatmap_stack(dir: &Path, id: &str, stack: &HeatmapStack) -> Result<()> {
    for (s, map) in stack.maps().iter().enumerate() {
        write_heatmap(&dir.join(heatmap_file_name(id, stack.kind(), s)), map)?;
    }
    Ok(())
}

/// Reads `<id>_<kind>_0.pfm`, `<id>_<kind>_1.pfm`, ... until the next stage
/// is missing.
pub fn read_heatmap_stack(dir: &Path, id: &str, kind: KeypointKind) -> Result<HeatmapStack> {
    let mut maps = Vec::new();
    loop {
        let path = dir.join(heatmap_file_name(id, kind, maps.len()));
        if !path.exists() {
            break;
        }
        maps.push(read_heatmap(&path)?);
    }
    HeatmapStack::new(kind, maps)
}

fn fmt_coord(v: f64) -> String {
    format!("{v:.6}")
}

/// One JSON line for `record`, without the trailing newline.
pub fn record_line(record: &AnnotationRecord) -> String {
    let mut s = String::with_capacity(160);
    s.push_str("{\"id\":");
    s.push_str(&serde_json::to_string(&record.id).expect("strings serialize"));
    s.push_str(&format!(
        ",\"top\":[{},{}],\"tip\":[{},{}]",
        fmt_coord(record.top.x),
        fmt_coord(record.top.y),
        fmt_coord(record.tip.x),
        fmt_coord(record.tip.y)
    ));
    if let Some(phi) = record.phi_gt {
        s.push_str(",\"phi_gt\":");
        s.push_str(&serde_json::to_string(&phi).expect("finite floats serialize"));
    }
    if let Some(theta) = record.theta_gt {
        s.push_str(",\"theta_gt\":");
        s.push_str(&serde_json::to_string(&theta).expect("finite floats serialize"));
    }
    s.push_str(",\"mask\":");
    s.push_str(&serde_json::to_string(&record.mask_path).expect("strings serialize"));
    s.push('}');
    s
}

pub fn write_records(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        writeln!(out, "{}", record_line(r))?;
    }
    out.flush()?;
    Ok(())
}

fn bad_line(line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedLine {
        line,
        reason: reason.into(),
    }
}

fn field_point(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    kind: KeypointKind,
    line: usize,
) -> Result<KeyPoint> {
    let v = obj
        .get(key)
        .ok_or_else(|| bad_line(line, format!("missing \"{key}\"")))?;
    match v.as_array().map(|a| a.as_slice()) {
        Some([x, y]) => match (x.as_f64(), y.as_f64()) {
            (Some(x), Some(y)) => Ok(KeyPoint::new(x, y, kind)),
            _ => Err(bad_line(line, format!("\"{key}\" must hold two numbers"))),
        },
        _ => Err(bad_line(line, format!("\"{key}\" must be [x, y]"))),
    }
}

fn field_angle(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    line: usize,
) -> Result<Option<f64>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| bad_line(line, format!("\"{key}\" must be a number"))),
    }
}

/// Parses one record line. `line` is 1-based and only used in errors.
pub fn parse_record_line(text: &str, line: usize) -> Result<AnnotationRecord> {
    let value: Value = serde_json::from_str(text).map_err(|e| bad_line(line, e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| bad_line(line, "expected a JSON object"))?;
    let id = obj
        .get("id")
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| bad_line(line, "missing or empty \"id\""))?;
    let record = AnnotationRecord {
        id: id.to_string(),
        top: field_point(obj, "top", KeypointKind::Top, line)?,
        tip: field_point(obj, "tip", KeypointKind::Tip, line)?,
        phi_gt: field_angle(obj, "phi_gt", line)?,
        theta_gt: field_angle(obj, "theta_gt", line)?,
        mask_path: obj
            .get("mask")
            .and_then(Value::as_str)
            .ok_or_else(|| bad_line(line, "missing \"mask\""))?
            .to_string(),
    };
    match record.orientation() {
        Ok(_) => Ok(record),
        Err(Error::PartialGroundTruth) => Err(Error::PartialGroundTruth),
        Err(e) => Err(bad_line(line, e.to_string())),
    }
}

/// Reads a JSON-lines file, applying `parse` to every non-blank line.
fn read_jsonl<T>(path: &Path, mut parse: impl FnMut(&str, usize) -> Result<T>) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line, i + 1)?);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    read_jsonl(path, parse_record_line)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_serde_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(path, |text, line| {
        serde_json::from_str(text).map_err(|e| bad_line(line, e.to_string()))
    })
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    write_jsonl(path, preds)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    read_serde_jsonl(path)
}

pub fn write_samples(path: &Path, samples: &[CalibrationSample]) -> Result<()> {
    write_jsonl(path, samples)
}

pub fn read_samples(path: &Path) -> Result<Vec<CalibrationSample>> {
    let samples: Vec<CalibrationSample> = read_serde_jsonl(path)?;
    for (i, s) in samples.iter().enumerate() {
        if !(0.0..=90.0).contains(&s.theta_gt) || !s.phi_gt.is_finite() || !s.phi.is_finite() {
            return Err(bad_line(i + 1, "angles out of range"));
        }
    }
    Ok(samples)
}

pub fn write_params(path: &Path, params: &ShapeParams) -> Result<()> {
    params.validate()?;
    let mut text = serde_json::to_string_pretty(params)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<ShapeParams> {
    let text = fs::read_to_string(path)?;
    let params: ShapeParams =
        serde_json::from_str(&text).map_err(|e| malformed(path, e.to_string()))?;
    params.validate()?;
    Ok(params)
}

/// How a synthetic dataset was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub name: String,
    pub version: String,
    pub berries: usize,
    pub views_per_berry: usize,
    pub scale: f64,
    pub noise_px: f64,
    pub profile_ranges: ProfileRanges,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub grid: ImageGrid,
    pub record_count: usize,
    pub seed: Option<u64>,
    pub generator: Option<GeneratorInfo>,
}

impl DatasetManifest {
    pub fn new(grid: ImageGrid, record_count: usize) -> Self {
        Self {
            version: FORMAT_VERSION.to_string(),
            grid,
            record_count,
            seed: None,
            generator: None,
        }
    }
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| malformed(path, e.to_string()))?;
    if m.version != FORMAT_VERSION {
        return Err(malformed(
            path,
            format!("unsupported version {:?}", m.version),
        ));
    }
    ImageGrid::new(m.grid.width, m.grid.height).map_err(|e| malformed(path, e.to_string()))?;
    Ok(m)
}

/// Writes manifest, records and masks for `records` under `dir`, creating
/// it if needed. Records are written in id order.
pub fn write_dataset(
    dir: &Path,
    records: &[SyntheticRecord],
    manifest: &DatasetManifest,
) -> Result<()> {
    if manifest.record_count != records.len() {
        return Err(Error::InvalidParams(format!(
            "manifest announces {} records, got {}",
            manifest.record_count,
            records.len()
        )));
    }
    fs::create_dir_all(dir.join(MASK_DIR))?;
    let mut sorted: Vec<&SyntheticRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.record.id.cmp(&b.record.id));
    sorted
        .par_iter()
        .try_for_each(|r| write_mask(&dir.join(&r.record.mask_path), &r.mask))?;
    let annotations: Vec<AnnotationRecord> = sorted.iter().map(|r| r.record.clone()).collect();
    write_records(&dir.join(RECORDS_FILE), &annotations)?;
    write_manifest(&dir.join(MANIFEST_FILE), manifest)
}

/// A dataset directory with its records loaded and masks read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub records: Vec<AnnotationRecord>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
        let mut records = Vec::with_capacity(manifest.record_count);
        for (i, r) in read_records(&dir.join(RECORDS_FILE))?
            .into_iter()
            .enumerate()
        {
            records.push(validate_record(r, manifest.grid).map_err(|e| match e {
                Error::PartialGroundTruth => e,
                other => bad_line(i + 1, other.to_string()),
            })?);
        }
        if records.len() != manifest.record_count {
            return Err(malformed(
                &dir.join(MANIFEST_FILE),
                format!(
                    "record_count is {} but {} records were found",
                    manifest.record_count,
                    records.len()
                ),
            ));
        }
        let mut ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateId(w[0].to_string()));
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            records,
        })
    }

    pub fn mask_path(&self, record: &AnnotationRecord) -> PathBuf {
        self.root.join(&record.mask_path)
    }

    pub fn load_mask(&self, record: &AnnotationRecord) -> Result<SilhouetteMask> {
        let path = self.mask_path(record);
        let mask = read_mask(&path)?;
        if mask.grid() != self.manifest.grid {
            return Err(malformed(&path, "mask size differs from the manifest grid"));
        }
        Ok(mask)
    }

    /// Every record with its mask, in file order. Errors name the record.
    pub fn load_all(
        &self,
    ) -> std::result::Result<Vec<(AnnotationRecord, SilhouetteMask)>, (String, Error)> {
        self.records
            .par_iter()
            .map(|r| {
                self.load_mask(r)
                    .map(|m| (r.clone(), m))
                    .map_err(|e| (r.id.clone(), e))
            })
            .collect()
    }
}
