//! Gaussian key-point heat maps: ground-truth encoding, argmax decoding over
//! a stack of detector outputs, and the per-pixel binary cross-entropy used
//! to compare predicted and target maps.

use crate::error::{Error, Result};
use crate::types::{ImageGrid, KeyPoint, KeypointKind};

/// Kernel support radius in units of sigma. Values further out are below
/// `exp(-8)` and are stored as exact zeros.
pub const KERNEL_SUPPORT_SIGMAS: f64 = 4.0;

/// Log clamp used by [`bce_loss`].
pub const BCE_EPSILON: f64 = 1e-7;

/// Per-pixel likelihood grid with every value in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    grid: ImageGrid,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(grid: ImageGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn filled(grid: ImageGrid, value: f64) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()])
    }

    pub fn new(grid: ImageGrid, values: Vec<f64>) -> Result<Self> {
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
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.grid.width + x]
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Multiplies every value by `amplitude` (clamped into [0, 1]).
    pub fn scaled(&self, amplitude: f64) -> Heatmap {
        let a = amplitude.clamp(0.0, 1.0);
        Heatmap {
            grid: self.grid,
            values: self.values.iter().map(|v| v * a).collect(),
        }
    }
}

/// `S` heat maps predicted for one key point, all on the same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    kind: KeypointKind,
    maps: Vec<Heatmap>,
}

impl HeatmapStack {
    pub fn new(kind: KeypointKind, maps: Vec<Heatmap>) -> Result<Self> {
        let first = maps.first().ok_or(Error::EmptyStack)?.grid();
        if maps.iter().any(|m| m.grid() != first) {
            return Err(Error::GridMismatch("stack maps differ in size".into()));
        }
        Ok(Self { kind, maps })
    }

    pub fn kind(&self) -> KeypointKind {
        self.kind
    }

    pub fn maps(&self) -> &[Heatmap] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn grid(&self) -> ImageGrid {
        self.maps[0].grid()
    }

    pub fn push(&mut self, map: Heatmap) -> Result<()> {
        if map.grid() != self.grid() {
            return Err(Error::GridMismatch("stack maps differ in size".into()));
        }
        self.maps.push(map);
        Ok(())
    }
}

/// Result of decoding a stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedKeypoint {
    pub point: KeyPoint,
    pub peak: f64,
    /// Set when every map in the stack is identically zero.
    pub degenerate: bool,
}

/// Renders an amplitude-1 Gaussian centred on `kp`.
pub fn encode(kp: &KeyPoint, grid: ImageGrid, sigma_kernel: f64) -> Result<Heatmap> {
    grid.check_point(kp.x, kp.y)?;
    if !(sigma_kernel > 0.0 && sigma_kernel.is_finite()) {
        return Err(Error::InvalidParams(format!(
            "sigma_kernel must be positive, got {sigma_kernel}"
        )));
    }
    let mut map = Heatmap::zeros(grid);
    let radius = KERNEL_SUPPORT_SIGMAS * sigma_kernel;
    let cutoff = radius * radius;
    let two_var = 2.0 * sigma_kernel * sigma_kernel;

    let x0 = (kp.x - radius).floor().max(0.0) as usize;
    let y0 = (kp.y - radius).floor().max(0.0) as usize;
    let x1 = ((kp.x + radius).ceil() as usize).min(grid.width - 1);
    let y1 = ((kp.y + radius).ceil() as usize).min(grid.height - 1);
    for y in y0..=y1 {
        let dy = y as f64 - kp.y;
        for x in x0..=x1 {
            let dx = x as f64 - kp.x;
            let d2 = dx * dx + dy * dy;
            if d2 <= cutoff {
                map.values[y * grid.width + x] = (-d2 / two_var).exp();
            }
        }
    }
    Ok(map)
}

/// Global argmax over all maps of the stack. Ties go to the lowest map index,
/// then the lowest row, then the lowest column.
pub fn decode(stack: &HeatmapStack) -> DecodedKeypoint {
    let width = stack.grid().width;
    let mut best = (0usize, 0.0f64);
    for map in stack.maps() {
        for (idx, &v) in map.values().iter().enumerate() {
            if v > best.1 {
                best = (idx, v);
            }
        }
    }
    let (idx, peak) = best;
    DecodedKeypoint {
        point: KeyPoint::new((idx % width) as f64, (idx / width) as f64, stack.kind()),
        peak,
        degenerate: peak <= 0.0,
    }
}

/// Mean binary cross-entropy between a predicted map and a target map, with
/// predictions clamped into `[BCE_EPSILON, 1 - BCE_EPSILON]`.
pub fn bce_loss(pred: &Heatmap, target: &Heatmap) -> Result<f64> {
    if pred.grid() != target.grid() {
        return Err(Error::GridMismatch(format!(
            "{:?} vs {:?}",
            pred.grid(),
            target.grid()
        )));
    }
    let total: f64 = pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(&f, &y)| {
            let f = f.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            -y * f.ln() - (1.0 - y) * (1.0 - f).ln()
        })
        .sum();
    Ok((total / pred.values().len() as f64).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> ImageGrid {
        ImageGrid::default()
    }

    #[test]
    fn peak_is_one_at_the_key_point() {
        let m = encode(&KeyPoint::top(128.0, 128.0), grid(), 2.0).unwrap();
        assert_eq!(m.get(128, 128), 1.0);
    }

    #[test]
    fn value_two_pixels_away() {
        let m = encode(&KeyPoint::top(128.0, 128.0), grid(), 2.0).unwrap();
        // exp(-4 / 8) by hand
        assert!((m.get(130, 128) - 0.606_530_659_712_633_4).abs() < 1e-12);
    }

    #[test]
    fn far_tail_is_negligible() {
        let m = encode(&KeyPoint::top(128.0, 128.0), grid(), 2.0).unwrap();
        assert!(m.get(128, 138) <= 4e-6);
        // truncated beyond 4 sigma
        assert_eq!(m.get(128, 137), 0.0);
        assert!(m.get(128, 136) > 0.0);
    }

    #[test]
    fn encode_rejects_out_of_bounds() {
        assert!(matches!(
            encode(&KeyPoint::top(256.0, 3.0), grid(), 2.0),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn decode_round_trip_single_map() {
        let kp = KeyPoint::tip(40.0, 50.0);
        let stack =
            HeatmapStack::new(KeypointKind::Tip, vec![encode(&kp, grid(), 2.0).unwrap()]).unwrap();
        let d = decode(&stack);
        assert_eq!((d.point.x, d.point.y), (40.0, 50.0));
        assert_eq!(d.peak, 1.0);
        assert!(!d.degenerate);
    }

    #[test]
    fn decode_picks_the_strongest_map() {
        let mut maps = Vec::new();
        for s in 0..8 {
            let kp = KeyPoint::top(30.0 + s as f64 * 20.0, 100.0);
            maps.push(encode(&kp, grid(), 2.0).unwrap().scaled(0.5));
        }
        maps[3] = encode(&KeyPoint::top(10.0, 20.0), grid(), 2.0)
            .unwrap()
            .scaled(0.9);
        let d = decode(&HeatmapStack::new(KeypointKind::Top, maps).unwrap());
        assert_eq!((d.point.x, d.point.y), (10.0, 20.0));
        assert_eq!(d.peak, 0.9);
    }

    #[test]
    fn decode_tie_break_prefers_first_map() {
        let a = encode(&KeyPoint::top(5.0, 5.0), grid(), 2.0)
            .unwrap()
            .scaled(0.8);
        let b = encode(&KeyPoint::top(6.0, 6.0), grid(), 2.0)
            .unwrap()
            .scaled(0.8);
        let d = decode(&HeatmapStack::new(KeypointKind::Top, vec![a.clone(), b.clone()]).unwrap());
        assert_eq!((d.point.x, d.point.y), (5.0, 5.0));
        // Within one map, the lower row wins, then the lower column.
        let mut values = vec![0.0; grid().len()];
        values[6 * 256 + 6] = 0.8;
        values[5 * 256 + 9] = 0.8;
        values[5 * 256 + 7] = 0.8;
        let m = Heatmap::new(grid(), values).unwrap();
        let d = decode(&HeatmapStack::new(KeypointKind::Top, vec![m]).unwrap());
        assert_eq!((d.point.x, d.point.y), (7.0, 5.0));
        // Swapping the map order changes the winner.
        let d = decode(&HeatmapStack::new(KeypointKind::Top, vec![b, a]).unwrap());
        assert_eq!((d.point.x, d.point.y), (6.0, 6.0));
    }

    #[test]
    fn zero_stack_is_degenerate() {
        let d =
            decode(&HeatmapStack::new(KeypointKind::Top, vec![Heatmap::zeros(grid())]).unwrap());
        assert_eq!((d.point.x, d.point.y, d.peak), (0.0, 0.0, 0.0));
        assert!(d.degenerate);
    }

    #[test]
    fn empty_stack_is_rejected() {
        assert!(matches!(
            HeatmapStack::new(KeypointKind::Top, vec![]),
            Err(Error::EmptyStack)
        ));
    }

    #[test]
    fn bce_of_perfect_binary_prediction_is_near_zero() {
        let mut values = vec![0.0; grid().len()];
        for v in values.iter_mut().step_by(3) {
            *v = 1.0;
        }
        let m = Heatmap::new(grid(), values).unwrap();
        assert!(bce_loss(&m, &m).unwrap() <= 1e-6);
    }

    #[test]
    fn bce_closed_forms() {
        let ones = Heatmap::filled(grid(), 1.0).unwrap();
        let half = Heatmap::filled(grid(), 0.5).unwrap();
        let zeros = Heatmap::zeros(grid());
        assert!((bce_loss(&half, &ones).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
        // -ln(1e-7)
        let clamp_cost = -(1e-7f64).ln();
        assert!((clamp_cost - 16.118_095_650_958_32).abs() < 1e-9);
        assert!((bce_loss(&ones, &zeros).unwrap() - clamp_cost).abs() < 1e-6);
    }

    #[test]
    fn bce_grid_mismatch() {
        let a = Heatmap::zeros(grid());
        let b = Heatmap::zeros(ImageGrid::new(64, 64).unwrap());
        assert!(matches!(bce_loss(&a, &b), Err(Error::GridMismatch(_))));
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(x in 0usize..256, y in 0usize..256) {
            let kp = KeyPoint::top(x as f64, y as f64);
            let stack = HeatmapStack::new(KeypointKind::Top, vec![encode(&kp, grid(), 2.0).unwrap()]).unwrap();
            let d = decode(&stack);
            prop_assert_eq!((d.point.x, d.point.y), (x as f64, y as f64));
        }

        #[test]
        fn encode_is_radially_symmetric(x in 20usize..236, y in 20usize..236, dx in -10i64..=10, dy in -10i64..=10) {
            let m = encode(&KeyPoint::top(x as f64, y as f64), grid(), 2.0).unwrap();
            let a = m.get((x as i64 + dx) as usize, (y as i64 + dy) as usize);
            let b = m.get((x as i64 - dx) as usize, (y as i64 - dy) as usize);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn weaker_maps_do_not_change_decode(x in 0usize..256, y in 0usize..256, ox in 0usize..256, oy in 0usize..256, amp in 0.0f64..0.99) {
            let kp = KeyPoint::top(x as f64, y as f64);
            let mut stack = HeatmapStack::new(KeypointKind::Top, vec![encode(&kp, grid(), 2.0).unwrap()]).unwrap();
            let before = decode(&stack);
            stack.push(encode(&KeyPoint::top(ox as f64, oy as f64), grid(), 2.0).unwrap().scaled(amp)).unwrap();
            prop_assert_eq!(decode(&stack), before);
        }

        #[test]
        fn bce_is_nonnegative_and_matches_constant_closed_form(f in 0.0f64..=1.0, y in 0.0f64..=1.0) {
            let pred = Heatmap::filled(ImageGrid::new(8, 8).unwrap(), f).unwrap();
            let target = Heatmap::filled(ImageGrid::new(8, 8).unwrap(), y).unwrap();
            let loss = bce_loss(&pred, &target).unwrap();
            prop_assert!(loss >= 0.0);
            let fc = f.clamp(1e-7, 1.0 - 1e-7);
            let expected = -y * fc.ln() - (1.0 - y) * (1.0 - fc).ln();
            prop_assert!((loss - expected.max(0.0)).abs() < 1e-9);
        }
    }
}
