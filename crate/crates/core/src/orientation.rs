//! Key points + silhouette → (phi, theta), direction vectors and the angular
//! error between two of them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, KeypointDistances};
use crate::types::{DirectionVector, KeyPoint, OrientationAngles, ShapeParams, SilhouetteMask};

/// Which case of the piecewise pitch formula produced theta.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// `d_tt > T`: theta from the top ratio.
    Top,
    /// `d_tt <= T`: theta from the tip ratio.
    Tip,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseEstimate {
    pub angles: OrientationAngles,
    pub direction: DirectionVector,
    pub branch: Branch,
    /// Key points coincide; the pose was forced to phi = 0, theta = 90.
    pub degenerate: bool,
}

/// Key points closer than this are considered coincident.
pub const COINCIDENT_PX: f64 = 1e-6;

/// In-plane angle of the tip→top vector, `atan2(y_top - y_tip, x_top - x_tip)`
/// in degrees. With y pointing down, a fruit hanging tip-down gives −90°.
pub fn phi_from_keypoints(top: &KeyPoint, tip: &KeyPoint) -> Result<f64> {
    let (dx, dy) = (top.x - tip.x, top.y - tip.y);
    if dx.hypot(dy) < COINCIDENT_PX {
        return Err(Error::CoincidentKeypoints);
    }
    Ok(dy.atan2(dx).to_degrees())
}

/// The piecewise pitch formula, clamped to [0, 90].
pub fn theta_numeric(d: &KeypointDistances, p: &ShapeParams) -> (f64, Branch) {
    let (theta, branch) = if d.d_tt > p.threshold {
        (d.dhat_top.max(0.0).sqrt() * p.alpha, Branch::Top)
    } else {
        (
            d.dhat_tip.max(0.0).sqrt() * p.omega + p.sigma_offset,
            Branch::Tip,
        )
    };
    (theta.clamp(0.0, 90.0), branch)
}

/// `V = (cos θ cos φ, cos θ sin φ, sin θ)`: the in-plane part points along
/// phi, the out-of-plane part toward the camera. `V(−90°, 0°) = (0, −1, 0)`.
pub fn direction_from_angles(angles: &OrientationAngles) -> DirectionVector {
    let phi = angles.phi();
    let theta = angles.theta();
    // Exact values at the axis-aligned angles keep the neutral pose exact.
    let (sp, cp) = exact_sin_cos(phi);
    let (st, ct) = exact_sin_cos(theta);
    DirectionVector::new(ct * cp, ct * sp, st).expect("unit vector from trig is never zero")
}

fn exact_sin_cos(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        deg.to_radians().sin_cos()
    }
}

/// Angle between two unit vectors in degrees: `acos(a·b)`, evaluated as
/// `atan2(|a×b|, a·b)` so it stays accurate near 0° and 180°.
pub fn angular_error(a: &DirectionVector, b: &DirectionVector) -> f64 {
    let [ax, ay, az] = a.components();
    let [bx, by, bz] = b.components();
    let cross = (ay * bz - az * by)
        .hypot(az * bx - ax * bz)
        .hypot(ax * by - ay * bx);
    cross.atan2(a.dot(b)).to_degrees()
}

/// Composes the full pipeline for one fruit: distances → phi → theta →
/// direction. Coincident key points yield a degenerate theta = 90° pose.
pub fn estimate_pose(
    mask: &SilhouetteMask,
    top: &KeyPoint,
    tip: &KeyPoint,
    p: &ShapeParams,
) -> Result<PoseEstimate> {
    let centroid = geometry::centroid(mask)?;
    let phi = match phi_from_keypoints(top, tip) {
        Ok(phi) => phi,
        Err(Error::CoincidentKeypoints) => return Ok(degenerate_pose()),
        Err(e) => return Err(e),
    };
    let contour = geometry::trace_contour(mask)?;
    let d = geometry::distances_with(centroid, &contour, top, tip)?;
    Ok(pose_from_distances(phi, &d, p))
}

/// Pose for already-measured distances and phi.
pub fn pose_from_distances(phi: f64, d: &KeypointDistances, p: &ShapeParams) -> PoseEstimate {
    let (theta, branch) = theta_numeric(d, p);
    let angles = OrientationAngles::new(phi, theta).expect("phi is finite and theta is clamped");
    PoseEstimate {
        angles,
        direction: direction_from_angles(&angles),
        branch,
        degenerate: false,
    }
}

fn degenerate_pose() -> PoseEstimate {
    let angles = OrientationAngles::new(0.0, 90.0).expect("constant angles are valid");
    PoseEstimate {
        angles,
        direction: direction_from_angles(&angles),
        branch: Branch::Tip,
        degenerate: true,
    }
}
