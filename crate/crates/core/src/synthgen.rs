//! Synthetic berry silhouettes with exact ground truth.
//!
//! A berry is a solid of revolution around a straight axis running from the
//! top (stem attachment, axial parameter `t = 0`) to the tip (`t = 1`). It is
//! oriented so that the projected tip→top direction has in-plane angle phi
//! and the axis is tilted out of the image plane by theta, then projected
//! orthographically along the viewing direction.
//!
//! Under orthographic projection the silhouette of a solid of revolution is
//! the union of the projected cross-section discs, which are ellipses with
//! semi-axes `r(t)` across the projected axis and `r(t)·sin θ` along it. The
//! union is therefore symmetric about the projected axis and is fully
//! described by a half-width profile `W(s)` along it, which is what the
//! rasterizer evaluates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{encode, HeatmapStack};
use crate::types::{
    round_to_micro, AnnotationRecord, ImageGrid, KeyPoint, KeypointKind, OrientationAngles,
    ShapeParams, SilhouetteMask,
};

/// Minimum distance in pixels between the silhouette and the frame border.
pub const FRAME_MARGIN_PX: f64 = 8.0;

/// Scale factor applied when a berry does not fit on the first attempt.
pub const SCALE_RETRY_FACTOR: f64 = 0.85;

const AXIS_SAMPLES: usize = 1024;
const PROFILE_STEP_PX: f64 = 0.125;

/// Radial profile of a berry, in world units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerryProfile {
    pub length: f64,
    pub r_max: f64,
    /// Exponent on the sine bump; larger values give a slimmer body.
    pub bulge: f64,
    /// Exponent on the axial parameter; skews the two halves of the body.
    pub taper: f64,
    /// Position of the widest cross-section as a fraction of the length,
    /// measured from the top.
    pub asymmetry: f64,
}

impl BerryProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidGenerator(what.to_string()));
        if !(self.length > 0.0 && self.length.is_finite()) {
            return bad("length must be positive");
        }
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return bad("r_max must be positive");
        }
        if !(0.5..=3.0).contains(&self.bulge) {
            return bad("bulge must lie in [0.5, 3]");
        }
        if !(0.5..=3.0).contains(&self.taper) {
            return bad("taper must lie in [0.5, 3]");
        }
        if !(0.2..=0.6).contains(&self.asymmetry) {
            return bad("asymmetry must lie in [0.2, 0.6]");
        }
        Ok(())
    }

    /// `r(t) = r_max · sin(π · u^taper)^bulge`, where `u` is `t` remapped
    /// piecewise-linearly so the maximum sits at `t = asymmetry`.
    pub fn radius(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        // Peak of sin(pi * u^taper) in u.
        let peak = 0.5f64.powf(1.0 / self.taper);
        let a = self.asymmetry;
        let u = if t <= a {
            t * peak / a
        } else {
            peak + (t - a) * (1.0 - peak) / (1.0 - a)
        };
        let bump = (std::f64::consts::PI * u.powf(self.taper)).sin().max(0.0);
        self.r_max * bump.powf(self.bulge)
    }
}

/// Ranges that [`generate_dataset`] samples profiles from uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRanges {
    pub length: (f64, f64),
    pub r_max: (f64, f64),
    pub bulge: (f64, f64),
    pub taper: (f64, f64),
    pub asymmetry: (f64, f64),
}

impl Default for ProfileRanges {
    fn default() -> Self {
        Self {
            length: (0.9, 1.1),
            r_max: (0.30, 0.40),
            bulge: (0.6, 1.2),
            taper: (0.8, 1.6),
            asymmetry: (0.3, 0.5),
        }
    }
}

impl ProfileRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> BerryProfile {
        let mut pick = |(lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        BerryProfile {
            length: pick(self.length),
            r_max: pick(self.r_max),
            bulge: pick(self.bulge),
            taper: pick(self.taper),
            asymmetry: pick(self.asymmetry),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub grid: ImageGrid,
    /// Pixels per world unit.
    pub scale: f64,
    /// Standard deviation of the Gaussian key-point jitter, pixels.
    pub noise_px: f64,
    pub seed: u64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            grid: ImageGrid::default(),
            scale: 170.0,
            noise_px: 0.0,
            seed: 0,
        }
    }
}

/// A rendered view: the mask and the projected key points.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub mask: SilhouetteMask,
    pub top: KeyPoint,
    pub tip: KeyPoint,
}

/// A generated, fully annotated view together with everything needed to
/// regenerate it.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticRecord {
    pub index: u64,
    pub record: AnnotationRecord,
    pub profile: BerryProfile,
    pub spec: RenderSpec,
    pub mask: SilhouetteMask,
}

impl SyntheticRecord {
    pub fn angles(&self) -> OrientationAngles {
        OrientationAngles::new(
            self.record
                .phi_gt
                .expect("synthetic records carry ground truth"),
            self.record
                .theta_gt
                .expect("synthetic records carry ground truth"),
        )
        .expect("generated angles are in range")
    }
}

/// splitmix64 finalizer, used to derive independent RNG streams.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RNG for stream `tag` / `index` under `seed`.
pub fn stream_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ mix(tag)) ^ index))
}

const STREAM_PROFILE: u64 = 1;
const STREAM_VIEW: u64 = 2;
const STREAM_HEATMAP: u64 = 3;

/// Half-width profile of the projected silhouette along the projected axis.
struct HalfWidthProfile {
    s_lo: f64,
    step: f64,
    widths: Vec<f64>,
}

impl HalfWidthProfile {
    fn build(profile: &BerryProfile, theta_deg: f64, scale: f64) -> Self {
        let (c, cos_t) = theta_deg.to_radians().sin_cos();
        let axis_len = profile.length * scale * cos_t;
        let n = AXIS_SAMPLES;
        let radii: Vec<f64> = (0..=n)
            .map(|k| profile.radius(k as f64 / n as f64) * scale)
            .collect();
        let r_max = radii.iter().copied().fold(0.0, f64::max);

        let mut s_lo = f64::INFINITY;
        let mut s_hi = f64::NEG_INFINITY;
        for (k, r) in radii.iter().enumerate() {
            let centre = k as f64 / n as f64 * axis_len;
            s_lo = s_lo.min(centre - c * r);
            s_hi = s_hi.max(centre + c * r);
        }
        let count = ((s_hi - s_lo) / PROFILE_STEP_PX).ceil() as usize + 1;
        let mut widths = Vec::with_capacity(count);
        for i in 0..count {
            let s = s_lo + i as f64 * PROFILE_STEP_PX;
            // Squared half-width: max over cross-sections of
            // r(t)^2 - ((s - t * axis_len) / sin(theta))^2.
            let mut best = f64::NEG_INFINITY;
            if axis_len > 1e-9 {
                let t = s / axis_len;
                if (0.0..=1.0).contains(&t) {
                    let r = profile.radius(t) * scale;
                    best = r * r;
                }
            }
            if c > 1e-12 {
                let (k_lo, k_hi) = if axis_len > 1e-9 {
                    let lo = ((s - c * r_max) / axis_len * n as f64).floor().max(0.0);
                    let hi = ((s + c * r_max) / axis_len * n as f64).ceil().min(n as f64);
                    (lo as usize, hi.max(lo) as usize)
                } else {
                    (0, n)
                };
                for (k, r) in radii.iter().enumerate().take(k_hi + 1).skip(k_lo) {
                    let off = (s - k as f64 / n as f64 * axis_len) / c;
                    let v = r * r - off * off;
                    if v > best {
                        best = v;
                    }
                }
            }
            widths.push(if best > 0.0 { best.sqrt() } else { 0.0 });
        }
        Self {
            s_lo,
            step: PROFILE_STEP_PX,
            widths,
        }
    }

    fn s_hi(&self) -> f64 {
        self.s_lo + (self.widths.len() - 1) as f64 * self.step
    }

    fn at(&self, s: f64) -> f64 {
        let pos = (s - self.s_lo) / self.step;
        if pos < 0.0 || pos > (self.widths.len() - 1) as f64 {
            return 0.0;
        }
        let i = pos.floor() as usize;
        if i + 1 >= self.widths.len() {
            return self.widths[self.widths.len() - 1];
        }
        let f = pos - i as f64;
        self.widths[i] * (1.0 - f) + self.widths[i + 1] * f
    }
}

fn render_exact(
    profile: &BerryProfile,
    angles: &OrientationAngles,
    spec: &RenderSpec,
) -> Result<RenderedView> {
    profile.validate()?;
    if !(spec.scale > 0.0 && spec.scale.is_finite()) {
        return Err(Error::InvalidGenerator("scale must be positive".into()));
    }
    let grid = spec.grid;
    let (sin_p, cos_p) = angles.phi().to_radians().sin_cos();
    let theta = angles.theta();
    // Unit vector from top toward tip, and the in-plane normal.
    let u = (-cos_p, -sin_p);
    let n = (-u.1, u.0);
    let axis_len = profile.length * spec.scale * theta.to_radians().cos();
    let widths = HalfWidthProfile::build(profile, theta, spec.scale);

    let centre = (
        (grid.width - 1) as f64 / 2.0,
        (grid.height - 1) as f64 / 2.0,
    );
    let s_mid = (widths.s_lo + widths.s_hi()) / 2.0;
    let top = (centre.0 - s_mid * u.0, centre.1 - s_mid * u.1);
    let tip = (top.0 + axis_len * u.0, top.1 + axis_len * u.1);

    // Bounding box from the half-width profile.
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for (i, &w) in widths.widths.iter().enumerate() {
        let s = widths.s_lo + i as f64 * widths.step;
        for sign in [-1.0, 1.0] {
            let x = top.0 + s * u.0 + sign * w * n.0;
            let y = top.1 + s * u.1 + sign * w * n.1;
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    let max_x = (grid.width - 1) as f64 - FRAME_MARGIN_PX;
    let max_y = (grid.height - 1) as f64 - FRAME_MARGIN_PX;
    if x0 < FRAME_MARGIN_PX || y0 < FRAME_MARGIN_PX || x1 > max_x || y1 > max_y {
        return Err(Error::BerryOutOfFrame);
    }

    let mut bits = vec![false; grid.len()];
    for y in (y0.floor() as usize)..=(y1.ceil() as usize) {
        for x in (x0.floor() as usize)..=(x1.ceil() as usize) {
            let (dx, dy) = (x as f64 - top.0, y as f64 - top.1);
            let s = dx * u.0 + dy * u.1;
            let w = dx * n.0 + dy * n.1;
            let half = widths.at(s);
            if half > 0.0 && w.abs() <= half {
                bits[y * grid.width + x] = true;
            }
        }
    }
    let mask = SilhouetteMask::new(grid, bits)?.largest_component();
    Ok(RenderedView {
        mask,
        top: KeyPoint::top(top.0, top.1),
        tip: KeyPoint::tip(tip.0, tip.1),
    })
}

fn jitter(kp: KeyPoint, noise_px: f64, grid: ImageGrid, rng: &mut impl Rng) -> KeyPoint {
    let (mut x, mut y) = (kp.x, kp.y);
    if noise_px > 0.0 {
        let normal = Normal::new(0.0, noise_px).expect("noise is positive and finite");
        x += normal.sample(rng);
        y += normal.sample(rng);
    }
    // keep strictly inside the grid after rounding to six digits
    let x = round_to_micro(x.clamp(0.0, grid.width as f64 - 1e-5));
    let y = round_to_micro(y.clamp(0.0, grid.height as f64 - 1e-5));
    KeyPoint::new(x, y, kp.kind)
}

fn render_with_rng(
    profile: &BerryProfile,
    angles: &OrientationAngles,
    spec: &RenderSpec,
    rng: &mut impl Rng,
) -> Result<RenderedView> {
    if !(spec.noise_px >= 0.0 && spec.noise_px.is_finite()) {
        return Err(Error::InvalidGenerator("noise_px must be >= 0".into()));
    }
    let view = render_exact(profile, angles, spec)?;
    Ok(RenderedView {
        top: jitter(view.top, spec.noise_px, spec.grid, rng),
        tip: jitter(view.tip, spec.noise_px, spec.grid, rng),
        mask: view.mask,
    })
}

/// Renders one berry at the given orientation. Key points are the exact
/// projections of the axis end points (rounded to 1e-6 px), jittered by
/// `spec.noise_px` using an RNG seeded from `spec.seed`.
pub fn silhouette(
    profile: &BerryProfile,
    angles: &OrientationAngles,
    spec: &RenderSpec,
) -> Result<RenderedView> {
    let mut rng = stream_rng(spec.seed, STREAM_VIEW, 0);
    render_with_rng(profile, angles, spec, &mut rng)
}

fn id_width(count: usize) -> usize {
    count.saturating_sub(1).to_string().len()
}

/// Generates `n_berries × views_per_berry` fully annotated views.
///
/// Profiles are drawn per berry and orientations per view (theta uniform on
/// [0, 90], phi uniform on [−180, 180]), each from its own RNG stream keyed
/// by `(spec.seed, index)`, so the output does not depend on the number of
/// worker threads.
pub fn generate_dataset(
    n_berries: usize,
    views_per_berry: usize,
    spec: &RenderSpec,
    ranges: &ProfileRanges,
) -> Result<Vec<SyntheticRecord>> {
    if n_berries == 0 || views_per_berry == 0 {
        return Err(Error::InvalidGenerator(
            "berry and view counts must be at least 1".into(),
        ));
    }
    let berry_width = id_width(n_berries).max(4);
    let view_width = id_width(views_per_berry).max(3);
    let profiles: Vec<BerryProfile> = (0..n_berries)
        .map(|b| ranges.sample(&mut stream_rng(spec.seed, STREAM_PROFILE, b as u64)))
        .collect();
    for p in &profiles {
        p.validate()?;
    }

    let total = n_berries * views_per_berry;
    (0..total)
        .into_par_iter()
        .map(|index| {
            let berry = index / views_per_berry;
            let view = index % views_per_berry;
            let mut rng = stream_rng(spec.seed, STREAM_VIEW, index as u64);
            let theta: f64 = rng.random_range(0.0..=90.0);
            let phi: f64 = rng.random_range(-180.0..=180.0);
            let angles = OrientationAngles::new(phi, theta)?;
            let profile = profiles[berry];

            let mut used = *spec;
            let rendered = match render_with_rng(&profile, &angles, &used, &mut rng.clone()) {
                Err(Error::BerryOutOfFrame) => {
                    used.scale *= SCALE_RETRY_FACTOR;
                    render_with_rng(&profile, &angles, &used, &mut rng)?
                }
                other => other?,
            };
            let id = format!("b{berry:0berry_width$}_v{view:0view_width$}");
            Ok(SyntheticRecord {
                index: index as u64,
                record: AnnotationRecord {
                    mask_path: format!("masks/{id}.pgm"),
                    id,
                    top: rendered.top,
                    tip: rendered.tip,
                    phi_gt: Some(angles.phi()),
                    theta_gt: Some(angles.theta()),
                },
                profile,
                spec: used,
                mask: rendered.mask,
            })
        })
        .collect()
}

/// Simulated detector output for one record: `stages` maps per key point,
/// all peaking at the same jittered location with random amplitudes in
/// [0.3, 1.0]; one map per stack has amplitude exactly 1.
pub fn heatmaps_for_record(
    record: &SyntheticRecord,
    params: &ShapeParams,
    noise_px: f64,
    stages: usize,
) -> Result<(HeatmapStack, HeatmapStack)> {
    if stages == 0 {
        return Err(Error::EmptyStack);
    }
    if !(noise_px >= 0.0 && noise_px.is_finite()) {
        return Err(Error::InvalidGenerator("noise_px must be >= 0".into()));
    }
    let grid = record.spec.grid;
    let mut rng = stream_rng(record.spec.seed, STREAM_HEATMAP, record.index);
    let mut stack_for = |kp: &KeyPoint, kind: KeypointKind| -> Result<HeatmapStack> {
        let loc = jitter(*kp, noise_px, grid, &mut rng);
        let base = encode(&loc, grid, params.sigma_kernel)?;
        let dominant = rng.random_range(0..stages);
        let maps = (0..stages)
            .map(|s| {
                let amp = if s == dominant {
                    1.0
                } else {
                    rng.random_range(0.3..1.0)
                };
                base.scaled(amp)
            })
            .collect();
        HeatmapStack::new(kind, maps)
    };
    let top = stack_for(&record.record.top, KeypointKind::Top)?;
    let tip = stack_for(&record.record.tip, KeypointKind::Tip)?;
    Ok((top, tip))
}
