//! Silhouette measurements: centroid, boundary contour, ray–contour
//! distances and the normalized key-point ratios the pitch formula uses.
//!
//! `d_topside` / `d_tipside` are measured along the ray that starts at the
//! silhouette centroid and passes through the respective key point, and the
//! crossing taken is the first one on the key point's side. A line through
//! both key points would not in general pass through the centroid, so the
//! per-key-point ray is the reading used throughout.

use crate::error::{Error, Result};
use crate::types::{KeyPoint, Point, SilhouetteMask};

/// Clockwise Moore neighbourhood in raster coordinates (y down), starting
/// from the west neighbour.
const MOORE: [(i64, i64); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

fn moore_index(dx: i64, dy: i64) -> usize {
    MOORE
        .iter()
        .position(|&d| d == (dx, dy))
        .expect("offset is a Moore neighbour")
}

/// Closed boundary loop of pixel centres.
///
/// The loop is counter-clockwise as seen on screen, which is a negative
/// shoelace area in raster coordinates. Consecutive points are 8-adjacent and
/// the last point connects back to the first.
#[derive(Clone, Debug, PartialEq)]
pub struct Contour {
    points: Vec<Point>,
    /// Number of 4-connected components in the mask the contour was traced
    /// from. Anything above one means only the largest was traced.
    pub component_count: usize,
}

impl Contour {
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_disconnected(&self) -> bool {
        self.component_count > 1
    }

    /// Shoelace area in raster coordinates.
    pub fn signed_area(&self) -> f64 {
        let n = self.points.len();
        let mut acc = 0.0;
        for i in 0..n {
            let a = self.points[i];
            let b = self.points[(i + 1) % n];
            acc += a.x * b.y - b.x * a.y;
        }
        acc / 2.0
    }

    fn segments(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.points.len();
        (0..n).map(move |i| (self.points[i], self.points[(i + 1) % n]))
    }
}

/// Distance along a ray, with a flag for the degenerate zero-length ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayDistance {
    pub distance: f64,
    pub degenerate: bool,
}

/// The four centroid-relative distances plus the key-point separation and
/// the normalized ratios, all in pixels of the native grid.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KeypointDistances {
    pub d_top: f64,
    pub d_tip: f64,
    pub d_topside: f64,
    pub d_tipside: f64,
    pub d_tt: f64,
    pub dhat_top: f64,
    pub dhat_tip: f64,
}

/// Rays shorter than this are treated as degenerate.
const DEGENERATE_RAY: f64 = 1e-9;

pub fn centroid(mask: &SilhouetteMask) -> Result<Point> {
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    let w = mask.width();
    for (idx, _) in mask.bits().iter().enumerate().filter(|(_, &b)| b) {
        sx += (idx % w) as f64;
        sy += (idx / w) as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(Point::new(sx / n as f64, sy / n as f64))
}

/// True for a foreground pixel with at least one background 4-neighbour
/// (pixels beyond the grid count as background).
pub fn is_boundary_pixel(mask: &SilhouetteMask, x: i64, y: i64) -> bool {
    mask.get_signed(x, y)
        && (!mask.get_signed(x - 1, y)
            || !mask.get_signed(x + 1, y)
            || !mask.get_signed(x, y - 1)
            || !mask.get_signed(x, y + 1))
}

/// Moore-neighbour tracing of the outer boundary of the largest 4-connected
/// component, with Jacob's stopping criterion.
pub fn trace_contour(mask: &SilhouetteMask) -> Result<Contour> {
    let component_count = mask.component_count();
    if component_count == 0 {
        return Err(Error::EmptyMask);
    }
    let owned;
    let mask = if component_count > 1 {
        owned = mask.largest_component();
        &owned
    } else {
        mask
    };

    let w = mask.width();
    let first = mask
        .bits()
        .iter()
        .position(|&b| b)
        .ok_or(Error::EmptyMask)?;
    let start = ((first % w) as i64, (first / w) as i64);
    // Raster-order first pixel: its west neighbour is background.
    let start_back = 0usize;

    let mut pixels = vec![start];
    let mut current = start;
    let mut back = start_back;
    let limit = 4 * mask.foreground_count() + 8;
    loop {
        let mut next = None;
        for step in 1..=8 {
            let k = (back + step) % 8;
            let (dx, dy) = MOORE[k];
            let cand = (current.0 + dx, current.1 + dy);
            if mask.get_signed(cand.0, cand.1) {
                let (bx, by) = MOORE[(k + 7) % 8];
                let prev = (current.0 + bx, current.1 + by);
                next = Some((cand, moore_index(prev.0 - cand.0, prev.1 - cand.1)));
                break;
            }
        }
        let Some((cand, new_back)) = next else {
            // isolated pixel
            break;
        };
        if cand == start && new_back == start_back {
            break;
        }
        current = cand;
        back = new_back;
        if current == start {
            // Re-entering the start from a different side (thin necks)
            // continues the loop; the start is not duplicated.
        } else {
            pixels.push(current);
        }
        if pixels.len() > limit {
            break;
        }
    }

    // Inner-corner pixels only touch the background diagonally; they are not
    // boundary pixels in the 4-neighbour sense.
    let mut points: Vec<Point> = pixels
        .into_iter()
        .filter(|&(x, y)| is_boundary_pixel(mask, x, y))
        .map(|(x, y)| Point::new(x as f64, y as f64))
        .collect();
    if points.is_empty() {
        points.push(Point::new(start.0 as f64, start.1 as f64));
    }

    let mut contour = Contour {
        points,
        component_count,
    };
    if contour.signed_area() > 0.0 {
        contour.points.reverse();
    }
    Ok(contour)
}

/// Smallest positive parameter at which the ray `origin + s * dir` (unit
/// `dir`) crosses the segment `a`–`b`.
fn ray_segment_hit(origin: Point, dir: (f64, f64), a: Point, b: Point) -> Option<f64> {
    let e = (b.x - a.x, b.y - a.y);
    let denom = dir.0 * e.1 - dir.1 * e.0;
    let w = (a.x - origin.x, a.y - origin.y);
    if denom.abs() < 1e-12 {
        // Parallel. Collinear overlap counts at its nearest endpoint.
        let cross = w.0 * dir.1 - w.1 * dir.0;
        if cross.abs() > 1e-9 {
            return None;
        }
        let sa = w.0 * dir.0 + w.1 * dir.1;
        let sb = (b.x - origin.x) * dir.0 + (b.y - origin.y) * dir.1;
        return [sa, sb]
            .into_iter()
            .filter(|s| *s > 1e-9)
            .min_by(|p, q| p.total_cmp(q));
    }
    let s = (w.0 * e.1 - w.1 * e.0) / denom;
    let u = (w.0 * dir.1 - w.1 * dir.0) / denom;
    const EDGE: f64 = 1e-9;
    if s > EDGE && (-EDGE..=1.0 + EDGE).contains(&u) {
        Some(s)
    } else {
        None
    }
}

/// Distance from `center` to the nearest contour crossing along the ray
/// through `through`.
pub fn ray_contour_distance(
    center: Point,
    through: Point,
    contour: &Contour,
) -> Result<RayDistance> {
    let (dx, dy) = (through.x - center.x, through.y - center.y);
    let len = dx.hypot(dy);
    if len < DEGENERATE_RAY {
        return Ok(RayDistance {
            distance: 0.0,
            degenerate: true,
        });
    }
    let dir = (dx / len, dy / len);
    let nearest = contour
        .segments()
        .filter_map(|(a, b)| ray_segment_hit(center, dir, a, b))
        .min_by(|p, q| p.total_cmp(q));
    match nearest {
        Some(distance) => Ok(RayDistance {
            distance,
            degenerate: false,
        }),
        None => Err(Error::NoIntersection),
    }
}

fn ratio(d: f64, side: f64) -> f64 {
    if side > 0.0 {
        (d / side).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Side distance for a key point sitting on the centroid: the ray direction
/// is undefined, so the nearest contour point is used instead.
fn inscribed_radius(center: Point, contour: &Contour) -> f64 {
    contour
        .points()
        .iter()
        .map(|p| p.distance(&center))
        .fold(f64::INFINITY, f64::min)
}

fn side_distance(center: Point, kp: &KeyPoint, contour: &Contour) -> Result<f64> {
    let ray = ray_contour_distance(center, kp.point(), contour)?;
    Ok(if ray.degenerate {
        inscribed_radius(center, contour)
    } else {
        ray.distance
    })
}

/// Measures a single mask / key-point pair. Ratios are clamped to [0, 1];
/// a key point on the centroid gets ratio 0.
pub fn keypoint_distances(
    mask: &SilhouetteMask,
    top: &KeyPoint,
    tip: &KeyPoint,
) -> Result<KeypointDistances> {
    let c = centroid(mask)?;
    let contour = trace_contour(mask)?;
    distances_with(c, &contour, top, tip)
}

/// [`keypoint_distances`] with a precomputed centroid and contour.
pub fn distances_with(
    c: Point,
    contour: &Contour,
    top: &KeyPoint,
    tip: &KeyPoint,
) -> Result<KeypointDistances> {
    let d_top = top.point().distance(&c);
    let d_tip = tip.point().distance(&c);
    let d_topside = side_distance(c, top, contour)?;
    let d_tipside = side_distance(c, tip, contour)?;
    Ok(KeypointDistances {
        d_top,
        d_tip,
        d_topside,
        d_tipside,
        d_tt: top.distance(tip),
        dhat_top: ratio(d_top, d_topside),
        dhat_tip: ratio(d_tip, d_tipside),
    })
}
