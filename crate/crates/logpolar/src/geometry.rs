//! Keypoints and sampling-grid construction.
//!
//! Two grid constructions are provided around a keypoint with support
//! radius `r_i = lambda/2 * sigma`:
//!
//! - log-polar: column `x_t` samples radius `r_i^(x_t/L)` and row `y_t`
//!   samples angle `theta + 2*pi*y_t/L`, so rotations by whole row steps
//!   become cyclic row permutations and squaring the radius becomes a
//!   column dilation;
//! - cartesian: a rotated square of half-width `r_i`, regularly spaced.
//!
//! Angles are quantized to 2^-32 of a turn before evaluating cos/sin.
//! This keeps every rotation by a multiple of the row step an *exact* row
//! permutation of the source-coordinate arrays (for patch sides dividing
//! 2^32), at a resolution of ~1.5e-9 rad, far below any detector noise.
//! Radii are evaluated as `exp2(log2(r_i) * x_t/L)` so radius relations
//! that are exact in log2 stay exact in the grid.

use crate::error::{Error, Result};

pub const TAU: f64 = std::f64::consts::TAU;

/// A detected image location with scale and orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    pub theta: f64,
}

impl Keypoint {
    /// `theta` is wrapped into `[0, 2*pi)`; `sigma` must be positive.
    pub fn new(x: f64, y: f64, sigma: f64, theta: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "keypoint scale must be positive and finite, got {sigma}"
            )));
        }
        if !x.is_finite() || !y.is_finite() || !theta.is_finite() {
            return Err(Error::InvalidArgument(
                "keypoint fields must be finite".into(),
            ));
        }
        Ok(Keypoint {
            x,
            y,
            sigma,
            theta: wrap_angle(theta),
        })
    }

    /// Support-region radius in pixels for the given scale factor.
    pub fn support_radius(&self, lambda: f64) -> f64 {
        lambda * 0.5 * self.sigma
    }
}

/// Wrap an angle into `[0, 2*pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t == TAU {
        0.0
    } else {
        t
    }
}

/// Which coordinate transform produced a grid or patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridKind {
    Cartesian,
    LogPolar,
}

impl GridKind {
    pub fn name(self) -> &'static str {
        match self {
            GridKind::Cartesian => "cartesian",
            GridKind::LogPolar => "logpolar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cartesian" => Ok(GridKind::Cartesian),
            "logpolar" => Ok(GridKind::LogPolar),
            other => Err(Error::Config(format!(
                "unknown grid kind {other:?} (expected \"cartesian\" or \"logpolar\")"
            ))),
        }
    }
}

/// Target patch side, scale factor and grid kind shared by a batch of grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub size: usize,
    pub lambda: f64,
    pub kind: GridKind,
}

impl GridSpec {
    pub fn new(size: usize, lambda: f64, kind: GridKind) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!(
                "patch side must be at least 2, got {size}"
            )));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "lambda must be positive and finite, got {lambda}"
            )));
        }
        Ok(GridSpec { size, lambda, kind })
    }
}

/// Per-target-pixel source coordinates for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    size: usize,
    pub kind: GridKind,
    pub lambda: f64,
    /// Row-major `L*L` source x coordinates (pixels).
    pub src_x: Vec<f64>,
    /// Row-major `L*L` source y coordinates (pixels).
    pub src_y: Vec<f64>,
}

impl SamplingGrid {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn src(&self, row: usize, col: usize) -> (f64, f64) {
        let i = row * self.size + col;
        (self.src_x[i], self.src_y[i])
    }
}

const TURN: f64 = 4294967296.0; // 2^32

/// Quantize an angle in radians to 2^-32 turns.
fn angle_to_fixed(theta: f64) -> u32 {
    let t = theta / TAU;
    let frac = t - t.floor();
    let q = (frac * TURN).round();
    // frac in [0,1) can still round up to exactly 2^32; wrap to 0
    if q >= TURN {
        0
    } else {
        q as u32
    }
}

/// Fixed-point angle step for row `m` of an `l`-row grid: round(m*2^32/l).
fn row_step_fixed(m: usize, l: usize) -> u32 {
    let num = (m as u64) << 32;
    (((num + (l as u64) / 2) / l as u64) & 0xFFFF_FFFF) as u32
}

fn fixed_to_cos_sin(q: u32) -> (f64, f64) {
    let angle = q as f64 * (TAU / TURN);
    (angle.cos(), angle.sin())
}

/// Build a log-polar sampling grid around a keypoint.
///
/// Column `x_t` samples radius `exp2(log2(r_i) * x_t / L)` (column 0 is
/// the unit circle, spacing grows geometrically) and row `y_t` samples
/// angle `theta + 2*pi*y_t/L`.
pub fn logpolar_grid(kp: &Keypoint, spec: &GridSpec) -> Result<SamplingGrid> {
    if spec.kind != GridKind::LogPolar {
        return Err(Error::InvalidArgument(
            "logpolar_grid requires a log-polar grid spec".into(),
        ));
    }
    let r = kp.support_radius(spec.lambda);
    if !(r > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "support radius {r} must exceed 1 pixel for a log-polar grid \
             (lambda {} * sigma {} / 2)",
            spec.lambda, kp.sigma
        )));
    }
    let l = spec.size;
    let log2_r = r.log2();
    let radii: Vec<f64> = (0..l)
        .map(|x| (log2_r * (x as f64 / l as f64)).exp2())
        .collect();
    let base = angle_to_fixed(kp.theta);
    let mut src_x = Vec::with_capacity(l * l);
    let mut src_y = Vec::with_capacity(l * l);
    for y_t in 0..l {
        let q = base.wrapping_add(row_step_fixed(y_t, l));
        let (c, s) = fixed_to_cos_sin(q);
        for &rho in &radii {
            src_x.push(kp.x + rho * c);
            src_y.push(kp.y + rho * s);
        }
    }
    Ok(SamplingGrid {
        size: l,
        kind: GridKind::LogPolar,
        lambda: spec.lambda,
        src_x,
        src_y,
    })
}

/// Build a cartesian sampling grid: a rotated square of half-width `r_i`
/// centered on the keypoint, covered by a regularly spaced `L x L` grid.
pub fn cartesian_grid(kp: &Keypoint, spec: &GridSpec) -> Result<SamplingGrid> {
    if spec.kind != GridKind::Cartesian {
        return Err(Error::InvalidArgument(
            "cartesian_grid requires a cartesian grid spec".into(),
        ));
    }
    let l = spec.size;
    let r = kp.support_radius(spec.lambda);
    // pixel pitch of the target grid in source space; grouping r*(2/(L-1))
    // first keeps integer-offset grids exact
    let pitch = 2.0 * r / (l as f64 - 1.0);
    let half = (l as f64 - 1.0) / 2.0;
    let (c, s) = (kp.theta.cos(), kp.theta.sin());
    let mut src_x = Vec::with_capacity(l * l);
    let mut src_y = Vec::with_capacity(l * l);
    for y_t in 0..l {
        let v = (y_t as f64 - half) * pitch;
        for x_t in 0..l {
            let u = (x_t as f64 - half) * pitch;
            src_x.push(kp.x + u * c - v * s);
            src_y.push(kp.y + u * s + v * c);
        }
    }
    Ok(SamplingGrid {
        size: l,
        kind: GridKind::Cartesian,
        lambda: spec.lambda,
        src_x,
        src_y,
    })
}

/// A verified keypoint pair across two views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub idx_a: usize,
    pub idx_b: usize,
    /// Scale difference ratio, `>= 1`; 1 is perfect scale agreement.
    pub scale_ratio: f64,
    /// Absolute orientation residual in degrees, in `[0, 180]`.
    pub orientation_residual: f64,
}

/// `max/min` of two positive scales; symmetric and `>= 1`.
pub fn scale_ratio(s_warped: f64, s_other: f64) -> Result<f64> {
    if !(s_warped > 0.0) || !(s_other > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scales must be positive, got ({s_warped}, {s_other})"
        )));
    }
    Ok(s_warped.max(s_other) / s_warped.min(s_other))
}

/// Absolute angular difference in degrees between `theta_a` carried into
/// view b's frame by `relative_rotation` and `theta_b`, wrapped to
/// `[0, 180]`.
pub fn orientation_residual(theta_a: f64, theta_b: f64, relative_rotation: f64) -> f64 {
    let diff = wrap_angle(theta_a + relative_rotation - theta_b);
    let diff = if diff > std::f64::consts::PI {
        TAU - diff
    } else {
        diff
    };
    diff.to_degrees()
}

/// Parse the keypoint text format: one `x y sigma theta` record per line,
/// `#`-prefixed lines ignored, theta in radians.
pub fn parse_keypoints(text: &str) -> Result<Vec<Keypoint>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "keypoint line {}: expected 4 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let mut vals = [0.0f64; 4];
        for (v, f) in vals.iter_mut().zip(&fields) {
            *v = f.parse().map_err(|_| {
                Error::InvalidArgument(format!(
                    "keypoint line {}: bad number {f:?}",
                    lineno + 1
                ))
            })?;
        }
        out.push(Keypoint::new(vals[0], vals[1], vals[2], vals[3])?);
    }
    Ok(out)
}

/// Serialize keypoints in the text format accepted by [`parse_keypoints`].
pub fn format_keypoints(kps: &[Keypoint]) -> String {
    let mut s = String::from("# x y sigma theta\n");
    for kp in kps {
        s.push_str(&format!("{} {} {} {}\n", kp.x, kp.y, kp.sigma, kp.theta));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn lp_spec(l: usize, lambda: f64) -> GridSpec {
        GridSpec::new(l, lambda, GridKind::LogPolar).unwrap()
    }

    #[test]
    fn support_radius_follows_lambda() {
        let kp = Keypoint::new(100.0, 100.0, 2.0, 0.0).unwrap();
        assert_eq!(kp.support_radius(12.0), 12.0);
    }

    #[test]
    fn logpolar_first_column_is_unit_circle() {
        let kp = Keypoint::new(100.0, 100.0, 2.0, 0.0).unwrap();
        let grid = logpolar_grid(&kp, &lp_spec(16, 12.0)).unwrap();
        let (x, y) = grid.src(0, 0);
        assert!((x - 101.0).abs() < 1e-6);
        assert!((y - 100.0).abs() < 1e-6);
    }

    #[test]
    fn logpolar_geometric_midpoint() {
        // r_i = 16, column 16 of 32 -> radius 4
        let kp = Keypoint::new(0.0, 0.0, 2.0, 0.0).unwrap();
        let grid = logpolar_grid(&kp, &lp_spec(32, 16.0)).unwrap();
        let (x, _) = grid.src(0, 16);
        assert!((x - 4.0).abs() < 1e-9, "{x}");
    }

    #[test]
    fn logpolar_degenerate_radius_is_error() {
        let kp = Keypoint::new(0.0, 0.0, 0.1, 0.0).unwrap();
        assert!(logpolar_grid(&kp, &lp_spec(16, 12.0)).is_err());
    }

    #[test]
    fn logpolar_row_shift_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = 32usize;
        for _ in 0..50 {
            let theta = rng.gen::<f64>() * TAU;
            let k = rng.gen_range(1..l);
            let kp = Keypoint::new(
                rng.gen_range(10.0..500.0),
                rng.gen_range(10.0..500.0),
                rng.gen_range(1.0..4.0),
                theta,
            )
            .unwrap();
            let rotated = Keypoint::new(kp.x, kp.y, kp.sigma, theta + TAU * k as f64 / l as f64)
                .unwrap();
            let spec = lp_spec(l, 24.0);
            let g0 = logpolar_grid(&kp, &spec).unwrap();
            let g1 = logpolar_grid(&rotated, &spec).unwrap();
            for row in 0..l {
                let shifted = (row + k) % l;
                for col in 0..l {
                    assert_eq!(g1.src(row, col), g0.src(shifted, col), "row {row} col {col}");
                }
            }
        }
    }

    #[test]
    fn logpolar_radial_stretch_identity() {
        // radii 2^j and 2^(2j): column x of the squared-radius grid equals
        // column 2x of the base grid, bitwise
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = 32usize;
        for _ in 0..50 {
            let j = rng.gen_range(1u32..5);
            let r = 2f64.powi(j as i32);
            let kp = Keypoint::new(
                rng.gen_range(10.0..500.0),
                rng.gen_range(10.0..500.0),
                r,
                rng.gen::<f64>() * TAU,
            )
            .unwrap();
            let kp2 = Keypoint::new(kp.x, kp.y, r * r, kp.theta).unwrap();
            let spec = lp_spec(l, 2.0); // r_i = sigma
            let g = logpolar_grid(&kp, &spec).unwrap();
            let g2 = logpolar_grid(&kp2, &spec).unwrap();
            for row in 0..l {
                for col in 0..l {
                    if 2 * col <= l - 1 {
                        assert_eq!(g2.src(row, col), g.src(row, 2 * col));
                    }
                }
            }
        }
    }

    #[test]
    fn logpolar_radial_spacing_is_strictly_increasing() {
        let kp = Keypoint::new(0.0, 0.0, 3.0, 1.0).unwrap();
        let grid = logpolar_grid(&kp, &lp_spec(32, 20.0)).unwrap();
        let radii: Vec<f64> = (0..32)
            .map(|c| {
                let (x, y) = grid.src(0, c);
                (x * x + y * y).sqrt()
            })
            .collect();
        for w in radii.windows(3) {
            assert!(w[2] - w[1] > w[1] - w[0]);
        }
    }

    #[test]
    fn cartesian_center_pixel_is_keypoint() {
        let kp = Keypoint::new(50.0, 60.0, 2.0, 0.0).unwrap();
        let spec = GridSpec::new(5, 12.0, GridKind::Cartesian).unwrap();
        let grid = cartesian_grid(&kp, &spec).unwrap();
        assert_eq!(grid.src(2, 2), (50.0, 60.0));
    }

    #[test]
    fn cartesian_corner_offset() {
        // theta=0, lambda=12, sigma=2: corner (u,v)=(1,1) offsets (+12,+12)
        let kp = Keypoint::new(0.0, 0.0, 2.0, 0.0).unwrap();
        let spec = GridSpec::new(33, 12.0, GridKind::Cartesian).unwrap();
        let grid = cartesian_grid(&kp, &spec).unwrap();
        let (x, y) = grid.src(32, 32);
        assert!((x - 12.0).abs() < 1e-9);
        assert!((y - 12.0).abs() < 1e-9);
    }

    #[test]
    fn cartesian_quarter_turn_maps_x_to_y() {
        let kp = Keypoint::new(0.0, 0.0, 2.0, std::f64::consts::FRAC_PI_2).unwrap();
        let spec = GridSpec::new(33, 12.0, GridKind::Cartesian).unwrap();
        let grid = cartesian_grid(&kp, &spec).unwrap();
        // (u,v)=(1,0): target row center, last column
        let (x, y) = grid.src(16, 32);
        assert!(x.abs() < 1e-9, "{x}");
        assert!((y - 12.0).abs() < 1e-9, "{y}");
    }

    #[test]
    fn cartesian_integer_offsets_are_exact() {
        let l = 9usize;
        let kp = Keypoint::new(20.0, 30.0, 1.0, 0.0).unwrap();
        let spec = GridSpec::new(l, (l - 1) as f64, GridKind::Cartesian).unwrap();
        let grid = cartesian_grid(&kp, &spec).unwrap();
        for row in 0..l {
            for col in 0..l {
                let (x, y) = grid.src(row, col);
                assert_eq!(x, 20.0 + (col as f64 - 4.0));
                assert_eq!(y, 30.0 + (row as f64 - 4.0));
            }
        }
    }

    #[test]
    fn scale_ratio_examples() {
        assert_eq!(scale_ratio(2.0, 2.0).unwrap(), 1.0);
        assert_eq!(scale_ratio(1.0, 4.0).unwrap(), 4.0);
        assert_eq!(scale_ratio(3.0, 2.0).unwrap(), 1.5);
        assert_eq!(scale_ratio(2.0, 3.0).unwrap(), 1.5);
        assert!(scale_ratio(-1.0, 2.0).is_err());
        assert!(scale_ratio(2.0, 0.0).is_err());
    }

    #[test]
    fn orientation_residual_examples() {
        let q = std::f64::consts::FRAC_PI_4;
        assert!(orientation_residual(0.0, q, q).abs() < 1e-12);
        let wrap = orientation_residual(0.0, TAU - 0.01, 0.0);
        assert!((wrap - 0.01f64.to_degrees()).abs() < 1e-9, "{wrap}");
        let half_rad = orientation_residual(0.0, 0.5, 0.0);
        assert!((half_rad - 28.64788975654116).abs() < 1e-9);
        assert!(half_rad > 25.0);
    }

    #[test]
    fn keypoint_text_roundtrip() {
        let kps = vec![
            Keypoint::new(1.5, 2.25, 1.0, 0.5).unwrap(),
            Keypoint::new(100.0, 7.0, 2.5, 6.0).unwrap(),
        ];
        let text = format_keypoints(&kps);
        let back = parse_keypoints(&text).unwrap();
        assert_eq!(kps, back);
        assert!(parse_keypoints("1 2 3\n").is_err());
        assert!(parse_keypoints("# comment only\n").unwrap().is_empty());
    }

    #[test]
    fn keypoint_orientation_is_normalized() {
        let kp = Keypoint::new(0.0, 0.0, 1.0, -1.0).unwrap();
        assert!(kp.theta >= 0.0 && kp.theta < TAU);
        assert!((kp.theta - (TAU - 1.0)).abs() < 1e-12);
    }
}
