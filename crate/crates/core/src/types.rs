//! Shared domain types and the coordinate-frame conventions used by every
//! other module.
//!
//! Image frame: origin at the top-left pixel, `x` grows to the right, `y`
//! grows downward (raster order) and `z` points out of the image toward the
//! camera. Pixel `(i, j)` has its centre at the integer coordinate `(i, j)`.
//!
//! Angles are stored in degrees everywhere; radians only appear inside trig
//! calls. `phi` is the in-image-plane angle of the tip→top axis and `theta`
//! the out-of-plane tilt (0° = axis parallel to the image plane, 90° = axis
//! along the viewing direction).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A sub-pixel 2D location in image coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Raster dimensions in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
}

impl Default for ImageGrid {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
        }
    }
}

impl ImageGrid {
    pub const MIN_SIDE: usize = 8;

    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < Self::MIN_SIDE || height < Self::MIN_SIDE {
            return Err(Error::InvalidGrid { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }

    /// Length of the grid diagonal measured between opposite pixel centres.
    pub fn diagonal(&self) -> f64 {
        ((self.width - 1) as f64).hypot((self.height - 1) as f64)
    }

    pub fn check_point(&self, x: f64, y: f64) -> Result<()> {
        if self.contains(x, y) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeypointKind {
    Top,
    Tip,
}

impl KeypointKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            KeypointKind::Top => "top",
            KeypointKind::Tip => "tip",
        }
    }
}

/// Projection of the stem attachment point (`Top`) or the distal extreme of
/// the fruit (`Tip`) onto the image plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyPoint {
    pub x: f64,
    pub y: f64,
    pub kind: KeypointKind,
}

impl KeyPoint {
    pub const fn new(x: f64, y: f64, kind: KeypointKind) -> Self {
        Self { x, y, kind }
    }

    pub const fn top(x: f64, y: f64) -> Self {
        Self::new(x, y, KeypointKind::Top)
    }

    pub const fn tip(x: f64, y: f64) -> Self {
        Self::new(x, y, KeypointKind::Tip)
    }

    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }

    pub fn distance(&self, other: &KeyPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.kind)
    }
}

/// Rounds a coordinate to six fractional digits, the precision key points
/// are persisted with.
pub fn round_to_micro(value: f64) -> f64 {
    format!("{value:.6}").parse().unwrap_or(value)
}

/// Binary fruit mask, `true` = fruit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SilhouetteMask {
    grid: ImageGrid,
    bits: Vec<bool>,
}

impl SilhouetteMask {
    /// Builds a mask from row-major bits. Fails on a wrong length or an
    /// all-background mask.
    pub fn new(grid: ImageGrid, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "expected {} pixels, got {}",
                grid.len(),
                bits.len()
            )));
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::EmptyMask);
        }
        Ok(Self { grid, bits })
    }

    pub fn from_fn(grid: ImageGrid, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut bits = Vec::with_capacity(grid.len());
        for y in 0..grid.height {
            for x in 0..grid.width {
                bits.push(f(x, y));
            }
        }
        Self::new(grid, bits)
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.grid.width + x]
    }

    /// Like [`get`](Self::get) but treats anything outside the grid as
    /// background.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.grid.width
            && (y as usize) < self.grid.height
            && self.get(x as usize, y as usize)
    }

    pub fn foreground_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Labels 4-connected foreground components. Returns the label image
    /// (0 = background, labels start at 1) and the size of each component.
    pub fn label_components(&self) -> (Vec<u32>, Vec<usize>) {
        let (w, h) = (self.grid.width, self.grid.height);
        let mut labels = vec![0u32; self.bits.len()];
        let mut sizes = Vec::new();
        let mut stack = Vec::new();
        for start in 0..self.bits.len() {
            if !self.bits[start] || labels[start] != 0 {
                continue;
            }
            let label = sizes.len() as u32 + 1;
            let mut size = 0;
            labels[start] = label;
            stack.push(start);
            while let Some(idx) = stack.pop() {
                size += 1;
                let (x, y) = (idx % w, idx / w);
                let mut visit = |n: usize| {
                    if self.bits[n] && labels[n] == 0 {
                        labels[n] = label;
                        stack.push(n);
                    }
                };
                if x > 0 {
                    visit(idx - 1);
                }
                if x + 1 < w {
                    visit(idx + 1);
                }
                if y > 0 {
                    visit(idx - w);
                }
                if y + 1 < h {
                    visit(idx + w);
                }
            }
            sizes.push(size);
        }
        (labels, sizes)
    }

    pub fn component_count(&self) -> usize {
        self.label_components().1.len()
    }

    pub fn is_four_connected(&self) -> bool {
        self.component_count() == 1
    }

    /// Keeps only the largest 4-connected component (lowest label on ties).
    pub fn largest_component(&self) -> SilhouetteMask {
        let (labels, sizes) = self.label_components();
        if sizes.len() <= 1 {
            return self.clone();
        }
        let mut best = 0;
        for (i, &s) in sizes.iter().enumerate() {
            if s > sizes[best] {
                best = i;
            }
        }
        let keep = best as u32 + 1;
        SilhouetteMask {
            grid: self.grid,
            bits: labels.iter().map(|&l| l == keep).collect(),
        }
    }
}

/// In-plane angle `phi` ∈ [−180, 180] and out-of-plane tilt `theta` ∈
/// [0, 90], both in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationAngles {
    phi: f64,
    theta: f64,
}

/// Wraps an angle into [−180, 180]. Values already in range are returned
/// unchanged, everything else lands in [−180, 180).
pub fn wrap_degrees(angle: f64) -> f64 {
    if (-180.0..=180.0).contains(&angle) {
        angle
    } else {
        (angle + 180.0).rem_euclid(360.0) - 180.0
    }
}

impl OrientationAngles {
    pub fn new(phi: f64, theta: f64) -> Result<Self> {
        if !phi.is_finite() || !theta.is_finite() {
            return Err(Error::InvalidAngle(format!(
                "non-finite angle phi={phi} theta={theta}"
            )));
        }
        if !(0.0..=90.0).contains(&theta) {
            return Err(Error::InvalidAngle(format!(
                "theta {theta} outside [0, 90]"
            )));
        }
        Ok(Self {
            phi: wrap_degrees(phi),
            theta,
        })
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
}

/// Unit 3-vector in the image frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionVector {
    vx: f64,
    vy: f64,
    vz: f64,
}

impl DirectionVector {
    /// Normalizes `(vx, vy, vz)`; zero and non-finite inputs are rejected.
    pub fn new(vx: f64, vy: f64, vz: f64) -> Result<Self> {
        let norm = (vx * vx + vy * vy + vz * vz).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(Self {
            vx: vx / norm,
            vy: vy / norm,
            vz: vz / norm,
        })
    }

    pub fn components(&self) -> [f64; 3] {
        [self.vx, self.vy, self.vz]
    }

    pub fn dot(&self, other: &DirectionVector) -> f64 {
        self.vx * other.vx + self.vy * other.vy + self.vz * other.vz
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Parameters of the piecewise pitch formula plus the heat-map kernel width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    /// Branch threshold on the top–tip pixel distance.
    #[serde(rename = "T")]
    pub threshold: f64,
    /// Scale of the top-ratio branch, degrees.
    pub alpha: f64,
    /// Scale of the tip-ratio branch, degrees.
    pub omega: f64,
    /// Offset of the tip-ratio branch, degrees.
    pub sigma_offset: f64,
    /// Gaussian kernel width for heat-map targets, pixels.
    pub sigma_kernel: f64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        default_shape_params()
    }
}

impl ShapeParams {
    const BRANCH_TOLERANCE: f64 = 1e-9;

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.threshold,
            self.alpha,
            self.omega,
            self.sigma_offset,
            self.sigma_kernel,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite value".into()));
        }
        if self.threshold <= 0.0 || self.alpha <= 0.0 || self.omega <= 0.0 {
            return Err(Error::InvalidParams(
                "T, alpha and omega must be positive".into(),
            ));
        }
        if self.sigma_offset < 0.0 {
            return Err(Error::InvalidParams("sigma_offset must be >= 0".into()));
        }
        if self.sigma_kernel <= 0.0 {
            return Err(Error::InvalidParams("sigma_kernel must be positive".into()));
        }
        if self.alpha > 90.0 {
            return Err(Error::InvalidParams("alpha must be <= 90".into()));
        }
        if self.omega + self.sigma_offset > 90.0 + Self::BRANCH_TOLERANCE {
            return Err(Error::InvalidParams(
                "omega + sigma_offset must be <= 90".into(),
            ));
        }
        Ok(())
    }
}

/// The constants the pitch formula was originally tuned to.
pub fn default_shape_params() -> ShapeParams {
    ShapeParams {
        threshold: 170.0,
        alpha: 54.0,
        omega: 50.0,
        sigma_offset: 40.0,
        sigma_kernel: 2.0,
    }
}

/// One annotated fruit crop. Orientation ground truth is optional, but if
/// present both angles must be.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub id: String,
    pub top: KeyPoint,
    pub tip: KeyPoint,
    pub phi_gt: Option<f64>,
    pub theta_gt: Option<f64>,
    pub mask_path: String,
}

impl AnnotationRecord {
    pub fn has_orientation(&self) -> bool {
        self.phi_gt.is_some() && self.theta_gt.is_some()
    }

    /// Ground-truth angles, if the record carries them.
    pub fn orientation(&self) -> Result<Option<OrientationAngles>> {
        match (self.phi_gt, self.theta_gt) {
            (Some(phi), Some(theta)) => OrientationAngles::new(phi, theta).map(Some),
            (None, None) => Ok(None),
            _ => Err(Error::PartialGroundTruth),
        }
    }
}

/// Returns the record unchanged if its key points lie on `grid` and its
/// ground truth is either complete or absent.
pub fn validate_record(record: AnnotationRecord, grid: ImageGrid) -> Result<AnnotationRecord> {
    grid.check_point(record.top.x, record.top.y)?;
    grid.check_point(record.tip.x, record.tip.y)?;
    record.orientation()?;
    Ok(record)
}
