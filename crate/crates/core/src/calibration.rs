//! Fitting the pitch-formula parameters `(T, alpha, omega, sigma_offset)` by
//! minimizing the mean angular error over records with orientation ground
//! truth.
//!
//! The search is derivative-free: a coarse grid over the bounds box followed
//! by cyclic coordinate descent with a halving step. Distances depend only on
//! the mask and key points, so they are measured once per record and every
//! objective evaluation is just the formula plus an `acos`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, KeypointDistances};
use crate::orientation::{
    angular_error, direction_from_angles, phi_from_keypoints, pose_from_distances,
};
use crate::synthgen::SyntheticRecord;
use crate::types::{
    AnnotationRecord, DirectionVector, OrientationAngles, ShapeParams, SilhouetteMask,
};

/// Smallest step at which coordinate descent stops.
pub const MIN_STEP: f64 = 0.1;

/// Grid points per axis in the coarse search.
pub const GRID_POINTS: usize = 7;

/// Everything the objective needs from one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub id: String,
    pub phi: f64,
    pub distances: KeypointDistances,
    pub phi_gt: f64,
    pub theta_gt: f64,
    /// Coincident key points: the estimate is fixed regardless of params.
    #[serde(default)]
    pub degenerate: bool,
}

impl CalibrationSample {
    /// Measures a record against its mask. Records without orientation ground
    /// truth are rejected.
    pub fn from_record(record: &AnnotationRecord, mask: &SilhouetteMask) -> Result<Self> {
        let gt = record.orientation()?.ok_or(Error::NoGroundTruth)?;
        let id = record.id.clone();
        match phi_from_keypoints(&record.top, &record.tip) {
            Ok(phi) => Ok(Self {
                id: id.clone(),
                phi,
                distances: geometry::keypoint_distances(mask, &record.top, &record.tip)?,
                phi_gt: gt.phi(),
                theta_gt: gt.theta(),
                degenerate: false,
            }),
            Err(Error::CoincidentKeypoints) => Ok(Self {
                id: id.clone(),
                phi: 0.0,
                distances: KeypointDistances {
                    d_top: 0.0,
                    d_tip: 0.0,
                    d_topside: 0.0,
                    d_tipside: 0.0,
                    d_tt: 0.0,
                    dhat_top: 0.0,
                    dhat_tip: 0.0,
                },
                phi_gt: gt.phi(),
                theta_gt: gt.theta(),
                degenerate: true,
            }),
            Err(e) => Err(e),
        }
    }

    pub fn ground_truth(&self) -> DirectionVector {
        let angles = OrientationAngles::new(self.phi_gt, self.theta_gt)
            .expect("ground truth was validated on construction");
        direction_from_angles(&angles)
    }

    /// Angular error of the estimate under `params`.
    pub fn error(&self, params: &ShapeParams) -> f64 {
        let predicted = if self.degenerate {
            direction_from_angles(&OrientationAngles::new(0.0, 90.0).expect("valid"))
        } else {
            pose_from_distances(self.phi, &self.distances, params).direction
        };
        angular_error(&predicted, &self.ground_truth())
    }
}

/// Measures every synthetic record. Order is preserved.
pub fn samples_from_synthetic(records: &[SyntheticRecord]) -> Result<Vec<CalibrationSample>> {
    records
        .par_iter()
        .map(|r| CalibrationSample::from_record(&r.record, &r.mask))
        .collect()
}

/// Mean angular error in degrees. Per-sample errors may be computed in
/// parallel; they are summed sequentially in input order so the result is
/// bit-identical regardless of the thread count.
pub fn objective(params: &ShapeParams, samples: &[CalibrationSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let errors: Vec<f64> = if samples.len() >= 4096 {
        samples.par_iter().map(|s| s.error(params)).collect()
    } else {
        samples.iter().map(|s| s.error(params)).collect()
    };
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Closed search box for the four fitted parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitBounds {
    pub threshold: (f64, f64),
    pub alpha: (f64, f64),
    pub omega: (f64, f64),
    pub sigma_offset: (f64, f64),
}

impl Default for FitBounds {
    fn default() -> Self {
        Self {
            threshold: (60.0, 240.0),
            alpha: (20.0, 90.0),
            omega: (10.0, 70.0),
            sigma_offset: (0.0, 70.0),
        }
    }
}

impl FitBounds {
    fn axes(&self) -> [(f64, f64); 4] {
        [self.threshold, self.alpha, self.omega, self.sigma_offset]
    }

    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in self.axes() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidParams(format!("bad bound [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &ShapeParams) -> bool {
        self.axes()
            .iter()
            .zip(get_axes(p))
            .all(|(&(lo, hi), v)| (lo..=hi).contains(&v))
    }
}

fn get_axes(p: &ShapeParams) -> [f64; 4] {
    [p.threshold, p.alpha, p.omega, p.sigma_offset]
}

fn with_axis(p: &ShapeParams, axis: usize, value: f64) -> ShapeParams {
    let mut q = *p;
    match axis {
        0 => q.threshold = value,
        1 => q.alpha = value,
        2 => q.omega = value,
        _ => q.sigma_offset = value,
    }
    q
}

fn admissible(p: &ShapeParams, bounds: &FitBounds) -> bool {
    bounds.contains(p) && p.validate().is_ok()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub fitted: ShapeParams,
    pub objective_before: f64,
    pub objective_after: f64,
    /// Completed coordinate-descent sweeps.
    pub iterations: usize,
    pub evaluations: usize,
    /// The step fell below [`MIN_STEP`] before the budget ran out.
    pub converged: bool,
    /// Objective after each accepted move, starting with the best grid point.
    pub accepted: Vec<f64>,
}

impl fmt::Display for CalibrationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.fitted;
        writeln!(f, "fitted T            {:.4}", p.threshold)?;
        writeln!(f, "fitted alpha        {:.4}", p.alpha)?;
        writeln!(f, "fitted omega        {:.4}", p.omega)?;
        writeln!(f, "fitted sigma_offset {:.4}", p.sigma_offset)?;
        writeln!(f, "objective before    {:.4} deg", self.objective_before)?;
        writeln!(f, "objective after     {:.4} deg", self.objective_after)?;
        writeln!(f, "iterations          {}", self.iterations)?;
        writeln!(f, "evaluations         {}", self.evaluations)?;
        writeln!(f, "converged           {}", self.converged)
    }
}

struct Search<'a> {
    samples: &'a [CalibrationSample],
    budget: usize,
    evaluations: usize,
}

impl Search<'_> {
    fn exhausted(&self) -> bool {
        self.evaluations >= self.budget
    }

    fn eval(&mut self, p: &ShapeParams) -> Result<f64> {
        self.evaluations += 1;
        objective(p, self.samples)
    }
}

/// Grid search followed by cyclic coordinate descent, spending at most
/// `budget` objective evaluations (the first one is `init`).
///
/// `init` must lie inside `bounds`. `sigma_kernel` is carried through
/// unchanged. The result never has a higher objective than `init`.
pub fn fit(
    samples: &[CalibrationSample],
    init: &ShapeParams,
    bounds: &FitBounds,
    budget: usize,
) -> Result<CalibrationReport> {
    if budget == 0 {
        return Err(Error::InvalidParams("budget must be at least 1".into()));
    }
    bounds.validate()?;
    init.validate()?;
    if !bounds.contains(init) {
        return Err(Error::InvalidParams("init lies outside the bounds".into()));
    }
    let mut search = Search {
        samples,
        budget,
        evaluations: 0,
    };
    let before = search.eval(init)?;
    let mut best = (*init, before);

    // Coarse grid.
    let axes = bounds.axes();
    let ticks: Vec<Vec<f64>> = axes
        .iter()
        .map(|&(lo, hi)| {
            (0..GRID_POINTS)
                .map(|i| lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64)
                .collect()
        })
        .collect();
    'grid: for &t in &ticks[0] {
        for &a in &ticks[1] {
            for &w in &ticks[2] {
                for &s in &ticks[3] {
                    if search.exhausted() {
                        break 'grid;
                    }
                    let p = ShapeParams {
                        threshold: t,
                        alpha: a,
                        omega: w,
                        sigma_offset: s,
                        sigma_kernel: init.sigma_kernel,
                    };
                    if !admissible(&p, bounds) {
                        continue;
                    }
                    let v = search.eval(&p)?;
                    if v < best.1 {
                        best = (p, v);
                    }
                }
            }
        }
    }

    // Coordinate descent, one step size per axis starting at half the grid
    // spacing.
    let mut steps: Vec<f64> = axes
        .iter()
        .map(|&(lo, hi)| (hi - lo) / (GRID_POINTS - 1) as f64 / 2.0)
        .collect();
    let mut accepted = vec![best.1];
    let mut iterations = 0;
    let mut converged = false;
    while !search.exhausted() {
        if steps.iter().all(|&s| s < MIN_STEP) {
            converged = true;
            break;
        }
        let sweep_start = best.0;
        let mut improved = false;
        for axis in 0..4 {
            if steps[axis] < MIN_STEP {
                continue;
            }
            let (lo, hi) = axes[axis];
            let current = get_axes(&best.0)[axis];
            for dir in [1.0, -1.0] {
                if search.exhausted() {
                    break;
                }
                let value = (current + dir * steps[axis]).clamp(lo, hi);
                if value == current {
                    continue;
                }
                let candidate = with_axis(&best.0, axis, value);
                if !admissible(&candidate, bounds) {
                    continue;
                }
                let v = search.eval(&candidate)?;
                if v < best.1 {
                    best = (candidate, v);
                    accepted.push(v);
                    improved = true;
                    break;
                }
            }
        }
        // The objective is a mean of absolute-value-like terms, so single
        // coordinates can stall on a ridge that a joint move would cross.
        // Try the sweep's overall displacement once more before shrinking.
        if improved && !search.exhausted() {
            let (a, b) = (get_axes(&sweep_start), get_axes(&best.0));
            let mut p = best.0;
            for axis in 0..4 {
                let (lo, hi) = axes[axis];
                p = with_axis(&p, axis, (2.0 * b[axis] - a[axis]).clamp(lo, hi));
            }
            if p != best.0 && admissible(&p, bounds) {
                let v = search.eval(&p)?;
                if v < best.1 {
                    best = (p, v);
                    accepted.push(v);
                }
            }
        }
        if !improved {
            if !search.exhausted() && try_diagonals(&mut search, &mut best, &steps, bounds)? {
                accepted.push(best.1);
            } else {
                for s in &mut steps {
                    *s /= 2.0;
                }
            }
        }
        iterations += 1;
    }
    if !converged && steps.iter().all(|&s| s < MIN_STEP) {
        converged = true;
    }

    Ok(CalibrationReport {
        fitted: best.0,
        objective_before: before,
        objective_after: best.1,
        iterations,
        evaluations: search.evaluations,
        converged,
        accepted,
    })
}

/// Tries moving two coordinates at once by their current steps. Returns
/// whether a move was accepted.
fn try_diagonals(
    search: &mut Search<'_>,
    best: &mut (ShapeParams, f64),
    steps: &[f64],
    bounds: &FitBounds,
) -> Result<bool> {
    let axes = bounds.axes();
    for i in 0..4 {
        for j in i + 1..4 {
            if steps[i] < MIN_STEP || steps[j] < MIN_STEP {
                continue;
            }
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                if search.exhausted() {
                    return Ok(false);
                }
                let cur = get_axes(&best.0);
                let p = with_axis(
                    &with_axis(
                        &best.0,
                        i,
                        (cur[i] + si * steps[i]).clamp(axes[i].0, axes[i].1),
                    ),
                    j,
                    (cur[j] + sj * steps[j]).clamp(axes[j].0, axes[j].1),
                );
                if p == best.0 || !admissible(&p, bounds) {
                    continue;
                }
                let v = search.eval(&p)?;
                if v < best.1 {
                    *best = (p, v);
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

/// Samples whose ratios are obtained by inverting the pitch formula at
/// `truth`, so that the formula maps them back onto their ground truth.
///
/// Half of the samples sit on each branch with `d_tt` spread over
/// `T ± 25%`, which makes the threshold identifiable. The ratio of the
/// branch that is not selected is drawn at random, so moving `T` across a
/// sample costs error.
pub fn inverse_model_samples(
    truth: &ShapeParams,
    n: usize,
    seed: u64,
) -> Result<Vec<CalibrationSample>> {
    truth.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = truth.threshold;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let phi: f64 = rng.random_range(-180.0..180.0);
        let top_branch = i % 2 == 0;
        let (theta, d_tt, dhat_top, dhat_tip) = if top_branch {
            let theta: f64 = rng.random_range(0.0..=truth.alpha.min(90.0));
            let d_tt = t * (1.0 + rng.random_range(1e-3..0.25));
            (
                theta,
                d_tt,
                (theta / truth.alpha).powi(2),
                rng.random_range(0.0..=1.0),
            )
        } else {
            let lo = truth.sigma_offset;
            let hi = (truth.sigma_offset + truth.omega).min(90.0);
            let theta: f64 = rng.random_range(lo..=hi);
            let d_tt = t * (1.0 - rng.random_range(0.0..0.25));
            let r = ((theta - truth.sigma_offset) / truth.omega).powi(2);
            (theta, d_tt, rng.random_range(0.0..=1.0), r)
        };
        out.push(CalibrationSample {
            id: format!("inv{i:05}"),
            phi,
            distances: KeypointDistances {
                d_top: dhat_top,
                d_tip: dhat_tip,
                d_topside: 1.0,
                d_tipside: 1.0,
                d_tt,
                dhat_top,
                dhat_tip,
            },
            phi_gt: phi,
            theta_gt: theta,
            degenerate: false,
        });
    }
    Ok(out)
}

/// Deterministic train/test split: records are ordered by id and the last
/// `round(n · test_fraction)` go to the test set.
pub fn split_by_id<T: Clone>(
    items: &[(String, T)],
    test_fraction: f64,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidParams(format!(
            "test fraction must lie in [0, 1), got {test_fraction}"
        )));
    }
    let mut sorted: Vec<&(String, T)> = items.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let n_test = (sorted.len() as f64 * test_fraction).round() as usize;
    let cut = sorted.len() - n_test;
    let train = sorted[..cut].iter().map(|(_, v)| v.clone()).collect();
    let test = sorted[cut..].iter().map(|(_, v)| v.clone()).collect();
    Ok((train, test))
}
