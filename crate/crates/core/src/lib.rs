//! Key-point based 3D orientation estimation for strawberry-like fruit.
//!
//! The pipeline takes a binary silhouette mask plus two key points (the
//! projected stem attachment "top" and the distal "tip") and returns the
//! in-plane angle `phi` and the out-of-plane tilt `theta`:
//!
//! * [`heatmap`] encodes key points as Gaussian targets and decodes stacks of
//!   detector heat maps back to pixel locations.
//! * [`geometry`] measures centroid, contour and the centroid–key-point
//!   ratios.
//! * [`orientation`] turns those measurements into angles and direction
//!   vectors and scores them with the angular error.
//! * [`synthgen`] renders synthetic berries with exact ground truth,
//!   [`calibration`] fits the pitch-formula parameters against them and
//!   [`evaluation`] aggregates error statistics.
//! * [`dataset_io`] reads and writes the on-disk dataset layout.

pub mod calibration;
pub mod dataset_io;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod heatmap;
pub mod orientation;
pub mod synthgen;
pub mod types;

pub use calibration::{fit, objective, CalibrationReport, CalibrationSample, FitBounds};
pub use error::{Error, Result};
pub use evaluation::{
    evaluate, evaluate_predictions, keypoint_error, phi_error, EvalSummary, MetricStats, Prediction,
};
pub use geometry::{
    centroid, keypoint_distances, ray_contour_distance, trace_contour, Contour, KeypointDistances,
};
pub use heatmap::{bce_loss, decode, encode, Heatmap, HeatmapStack};
pub use orientation::{
    angular_error, direction_from_angles, estimate_pose, phi_from_keypoints, theta_numeric, Branch,
    PoseEstimate,
};
pub use types::{
    default_shape_params, validate_record, AnnotationRecord, DirectionVector, ImageGrid, KeyPoint,
    KeypointKind, OrientationAngles, Point, ShapeParams, SilhouetteMask,
};
