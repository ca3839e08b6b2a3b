//! Error metrics and their aggregation: key-point distance, wrapped phi
//! difference and angular error, summarized overall and per ground-truth
//! theta bin.
//!
//! Medians use the lower-of-two convention for even counts. All aggregates
//! are computed after ordering records by id, so they do not depend on the
//! input order.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orientation::{
    angular_error, direction_from_angles, estimate_pose, Branch, PoseEstimate,
};
use crate::types::{AnnotationRecord, KeyPoint, OrientationAngles, ShapeParams, SilhouetteMask};

pub const DEFAULT_BIN_WIDTH: f64 = 10.0;

pub fn keypoint_error(pred: &KeyPoint, gt: &KeyPoint) -> f64 {
    pred.distance(gt)
}

/// `min(|Δ|, 360 − |Δ|)`, in [0, 180].
pub fn phi_error(pred: f64, gt: f64) -> f64 {
    let d = (pred - gt).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Median (lower of the two middle values), mean, population standard
/// deviation and interquartile range of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub count: usize,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    pub iqr: f64,
}

impl MetricStats {
    /// `None` for an empty slice.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Some(Self {
            count: n,
            median: lower_median(&sorted),
            mean,
            std: var.sqrt(),
            iqr: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
        })
    }
}

fn lower_median(sorted: &[f64]) -> f64 {
    sorted[(sorted.len() - 1) / 2]
}

/// Nearest-rank quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Half-open `[lo, hi)` theta bins of `width` covering [0, 90]; the last bin
/// is closed and may be narrower.
pub fn theta_bins(width: f64) -> Result<Vec<(f64, f64)>> {
    if !(width > 0.0 && width <= 90.0) {
        return Err(Error::InvalidParams(format!(
            "bin width must lie in (0, 90], got {width}"
        )));
    }
    let n = (90.0 / width - 1e-9).ceil().max(1.0) as usize;
    Ok((0..n)
        .map(|k| (k as f64 * width, ((k + 1) as f64 * width).min(90.0)))
        .collect())
}

/// Index of the bin containing `theta`.
pub fn bin_index(theta: f64, bins: &[(f64, f64)]) -> Option<usize> {
    let last = bins.len().checked_sub(1)?;
    bins.iter()
        .position(|&(lo, hi)| theta >= lo && theta < hi)
        .or_else(|| (theta == bins[last].1).then_some(last))
}

/// Stats of every metric inside one theta bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub metrics: BTreeMap<Metric, MetricStats>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TopError,
    TipError,
    PhiError,
    AngularError,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::TopError,
        Metric::TipError,
        Metric::PhiError,
        Metric::AngularError,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::TopError => "top_error",
            Metric::TipError => "tip_error",
            Metric::PhiError => "phi_error",
            Metric::AngularError => "angular_error",
        }
    }

    pub fn unit(&self) -> &'static str {
        match self {
            Metric::TopError | Metric::TipError => "px",
            _ => "deg",
        }
    }

    fn of(&self, r: &RecordErrors) -> Option<f64> {
        match self {
            Metric::TopError => Some(r.top_error),
            Metric::TipError => Some(r.tip_error),
            Metric::PhiError => r.phi_error,
            Metric::AngularError => r.angular_error,
        }
    }
}

/// A pose prediction for one record, as written by the estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    /// Key points the pose was computed from.
    pub top: [f64; 2],
    pub tip: [f64; 2],
    pub phi: f64,
    pub theta: f64,
    pub direction: [f64; 3],
    pub branch: Branch,
    pub degenerate: bool,
}

impl Prediction {
    pub fn from_pose(
        record: &AnnotationRecord,
        top: &KeyPoint,
        tip: &KeyPoint,
        pose: &PoseEstimate,
    ) -> Self {
        Self {
            id: record.id.clone(),
            top: [top.x, top.y],
            tip: [tip.x, tip.y],
            phi: pose.angles.phi(),
            theta: pose.angles.theta(),
            direction: pose.direction.components(),
            branch: pose.branch,
            degenerate: pose.degenerate,
        }
    }

    /// A prediction that reproduces the record's ground truth exactly.
    pub fn from_ground_truth(record: &AnnotationRecord) -> Result<Self> {
        let angles = record.orientation()?.ok_or(Error::NoGroundTruth)?;
        Ok(Self {
            id: record.id.clone(),
            top: [record.top.x, record.top.y],
            tip: [record.tip.x, record.tip.y],
            phi: angles.phi(),
            theta: angles.theta(),
            direction: direction_from_angles(&angles).components(),
            branch: Branch::Tip,
            degenerate: false,
        })
    }

    pub fn angles(&self) -> Result<OrientationAngles> {
        OrientationAngles::new(self.phi, self.theta)
    }
}

/// Per-record row of the error table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordErrors {
    pub id: String,
    pub top_error: f64,
    pub tip_error: f64,
    pub d_tt: f64,
    pub phi_pred: f64,
    pub theta_pred: f64,
    pub phi_gt: Option<f64>,
    pub theta_gt: Option<f64>,
    pub phi_error: Option<f64>,
    pub angular_error: Option<f64>,
    pub branch: Branch,
    pub degenerate: bool,
}

fn record_errors(record: &AnnotationRecord, pred: &Prediction) -> Result<RecordErrors> {
    let top = KeyPoint::top(pred.top[0], pred.top[1]);
    let tip = KeyPoint::tip(pred.tip[0], pred.tip[1]);
    let angles = pred.angles()?;
    let gt = record.orientation()?;
    Ok(RecordErrors {
        id: record.id.clone(),
        top_error: keypoint_error(&top, &record.top),
        tip_error: keypoint_error(&tip, &record.tip),
        d_tt: top.distance(&tip),
        phi_pred: angles.phi(),
        theta_pred: angles.theta(),
        phi_gt: gt.map(|g| g.phi()),
        theta_gt: gt.map(|g| g.theta()),
        phi_error: gt.map(|g| phi_error(angles.phi(), g.phi())),
        angular_error: gt
            .map(|g| angular_error(&direction_from_angles(&angles), &direction_from_angles(&g))),
        branch: pred.branch,
        degenerate: pred.degenerate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub bin_width: f64,
    /// Fail with `NoGroundTruth` instead of emitting a key-point-only summary
    /// when any record lacks orientation ground truth.
    pub require_orientation: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            bin_width: DEFAULT_BIN_WIDTH,
            require_orientation: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    /// Records without orientation ground truth. Orientation metrics are
    /// computed over the remaining ones.
    pub missing_ground_truth: usize,
    pub overall: BTreeMap<Metric, MetricStats>,
    pub theta_bins: Vec<ThetaBin>,
    /// Sorted by id.
    pub records: Vec<RecordErrors>,
}

impl EvalSummary {
    pub fn from_records(mut records: Vec<RecordErrors>, opts: &EvalOptions) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidParams("nothing to evaluate".into()));
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let missing = records.iter().filter(|r| r.theta_gt.is_none()).count();
        if opts.require_orientation && missing > 0 {
            return Err(Error::NoGroundTruth);
        }
        let stats_of = |rows: &[&RecordErrors]| {
            Metric::ALL
                .iter()
                .filter_map(|m| {
                    let v: Vec<f64> = rows.iter().filter_map(|r| m.of(r)).collect();
                    MetricStats::from_values(&v).map(|s| (*m, s))
                })
                .collect::<BTreeMap<_, _>>()
        };
        let all: Vec<&RecordErrors> = records.iter().collect();
        let overall = stats_of(&all);

        let bins = theta_bins(opts.bin_width)?;
        let mut members: Vec<Vec<&RecordErrors>> = vec![Vec::new(); bins.len()];
        for r in &records {
            if let Some(i) = r.theta_gt.and_then(|t| bin_index(t, &bins)) {
                members[i].push(r);
            }
        }
        let theta_bins = if missing == records.len() {
            Vec::new()
        } else {
            bins.iter()
                .zip(&members)
                .map(|(&(lo, hi), rows)| ThetaBin {
                    lo,
                    hi,
                    count: rows.len(),
                    metrics: stats_of(rows),
                })
                .collect()
        };
        Ok(Self {
            count: records.len(),
            missing_ground_truth: missing,
            overall,
            theta_bins,
            records,
        })
    }

    pub fn metric(&self, m: Metric) -> Option<&MetricStats> {
        self.overall.get(&m)
    }

    /// Orientation stats, or `NoGroundTruth` for key-point-only data.
    pub fn angular(&self) -> Result<&MetricStats> {
        self.metric(Metric::AngularError)
            .ok_or(Error::NoGroundTruth)
    }

    /// One row per theta bin, preceded by an `all` row.
    pub fn write_csv(&self, metric: Metric, mut out: impl Write) -> Result<()> {
        writeln!(out, "bin_lo,bin_hi,count,median,mean,std,iqr")?;
        let row = |out: &mut dyn Write,
                   lo: &str,
                   hi: &str,
                   s: Option<&MetricStats>,
                   count: usize| {
            match s {
                Some(s) => writeln!(
                    out,
                    "{lo},{hi},{},{:.6},{:.6},{:.6},{:.6}",
                    s.count, s.median, s.mean, s.std, s.iqr
                ),
                None => writeln!(out, "{lo},{hi},{count},,,,"),
            }
        };
        row(&mut out, "all", "all", self.overall.get(&metric), 0)?;
        for b in &self.theta_bins {
            row(
                &mut out,
                &format!("{}", b.lo),
                &format!("{}", b.hi),
                b.metrics.get(&metric),
                b.count,
            )?;
        }
        Ok(())
    }

    /// Per-record errors as JSON lines, in id order.
    pub fn write_records_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            writeln!(out)?;
        }
        Ok(())
    }
}

impl fmt::Display for EvalSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records: {}", self.count)?;
        if self.missing_ground_truth > 0 {
            writeln!(
                f,
                "without orientation ground truth: {}",
                self.missing_ground_truth
            )?;
        }
        writeln!(
            f,
            "{:<14} {:>6} {:>10} {:>10} {:>10} {:>10}",
            "metric", "count", "median", "mean", "std", "iqr"
        )?;
        for m in Metric::ALL {
            if let Some(s) = self.overall.get(&m) {
                writeln!(
                    f,
                    "{:<14} {:>6} {:>10.3} {:>10.3} {:>10.3} {:>10.3}  {}",
                    m.name(),
                    s.count,
                    s.median,
                    s.mean,
                    s.std,
                    s.iqr,
                    m.unit()
                )?;
            }
        }
        if !self.theta_bins.is_empty() {
            writeln!(f, "median angular error by ground-truth theta:")?;
            for b in &self.theta_bins {
                let close = if b.hi >= 90.0 { ']' } else { ')' };
                match b.metrics.get(&Metric::AngularError) {
                    Some(s) => writeln!(
                        f,
                        "  [{:>4}, {:>4}{close} n={:<5} {:>8.3} deg",
                        b.lo, b.hi, b.count, s.median
                    )?,
                    None => writeln!(f, "  [{:>4}, {:>4}{close} n=0", b.lo, b.hi)?,
                }
            }
        }
        Ok(())
    }
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<HashSet<&'a str>> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    Ok(seen)
}

/// Scores predictions against records, matching them by id. Every record
/// needs exactly one prediction and vice versa.
pub fn evaluate_predictions(
    records: &[AnnotationRecord],
    predictions: &[Prediction],
    opts: &EvalOptions,
) -> Result<EvalSummary> {
    let record_ids = check_unique(records.iter().map(|r| r.id.as_str()))?;
    check_unique(predictions.iter().map(|p| p.id.as_str()))?;
    let by_id: BTreeMap<&str, &Prediction> =
        predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let missing = records
        .iter()
        .filter(|r| !by_id.contains_key(r.id.as_str()))
        .count();
    let unexpected = predictions
        .iter()
        .filter(|p| !record_ids.contains(p.id.as_str()))
        .count();
    if missing > 0 || unexpected > 0 {
        return Err(Error::IdMismatch {
            missing,
            unexpected,
        });
    }
    let rows = records
        .iter()
        .map(|r| record_errors(r, by_id[r.id.as_str()]))
        .collect::<Result<Vec<_>>>()?;
    EvalSummary::from_records(rows, opts)
}

/// Runs the estimator on every record (using its own key points) and
/// returns the predictions in input order.
pub fn estimate_all(
    inputs: &[(AnnotationRecord, SilhouetteMask)],
    params: &ShapeParams,
) -> Result<Vec<Prediction>> {
    inputs
        .par_iter()
        .map(|(record, mask)| {
            let pose = estimate_pose(mask, &record.top, &record.tip, params)?;
            Ok(Prediction::from_pose(
                record,
                &record.top,
                &record.tip,
                &pose,
            ))
        })
        .collect()
}

/// Estimates and scores in one go.
pub fn evaluate(
    inputs: &[(AnnotationRecord, SilhouetteMask)],
    params: &ShapeParams,
    opts: &EvalOptions,
) -> Result<EvalSummary> {
    let preds = estimate_all(inputs, params)?;
    let records: Vec<AnnotationRecord> = inputs.iter().map(|(r, _)| r.clone()).collect();
    evaluate_predictions(&records, &preds, opts)
}

/// Test-set membership for one fold, as indices into the input slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `k` folds over the ids sorted lexicographically. Test sets are contiguous
/// runs of the sorted order whose sizes differ by at most one; together they
/// cover every index exactly once.
pub fn kfold<S: AsRef<str>>(ids: &[S], k: usize) -> Result<Vec<Fold>> {
    if k < 2 || k > ids.len() {
        return Err(Error::InvalidParams(format!(
            "fold count must lie in [2, {}], got {k}",
            ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| ids[a].as_ref().cmp(ids[b].as_ref()));
    let n = ids.len();
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let (start, end) = (f * n / k, (f + 1) * n / k);
        let mut test: Vec<usize> = order[start..end].to_vec();
        let mut train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[end..])
            .copied()
            .collect();
        test.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, test });
    }
    Ok(folds)
}
