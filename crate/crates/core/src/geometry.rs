//! Fractal channel geometry: a Weierstrass-Mandelbrot radius perturbation
//! drives either a closed duct cross-section or the two walls of a rough
//! straight channel, and both rasterize onto the fixed 128x256 canvas.

use crate::det::{subseed, DetRng};

use std::f64::consts::PI;

/// Default vertex count for curve sampling.
pub const CURVE_VERTICES: usize = 4096;
/// A radius dipping under this fraction of the base radius is degenerate.
pub const MIN_RADIUS_RATIO: f64 = 0.15;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("radius fell below {MIN_RADIUS_RATIO} of the base radius (min sampled {min:.4}, base {base:.4})")]
    DegenerateRadius { min: f64, base: f64 },
    #[error("geometry extends outside the {h}x{w} canvas")]
    OutOfCanvas { h: usize, w: usize },
    #[error("mask has no fluid pixels")]
    EmptyFluid,
    #[error("fluid region is not 4-connected ({reached} of {total} pixels reachable)")]
    DisconnectedFluid { reached: usize, total: usize },
    #[error("no acceptable parameter set after {rounds} rejection rounds")]
    ExhaustedRetries { rounds: usize },
}

/// Parameters of the Weierstrass-Mandelbrot radius series
/// R(t) = base_radius + amplitude * S(t / 2pi), where
/// S(phi) = A^(D-1) * sum_n gamma^(-(2-D) n) cos(2 pi f_n phi).
///
/// Frequencies f_n are gamma^n rounded to the nearest positive integer so the
/// series is exactly 1-periodic and sampled curves close.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WmParams {
    /// Fractal dimension D, 1 < D < 2.
    pub fractal_dim: f64,
    /// Spectral exponent gamma > 1.
    pub gamma: f64,
    /// Amplitude scale A > 0 entering as A^(D-1).
    pub scale_coeff: f64,
    /// Number of series terms, >= 1.
    pub terms: u32,
    /// Mean radius (duct) or mean half-height (channel), in pixels.
    pub base_radius: f64,
    /// Perturbation amplitude in pixels.
    pub amplitude: f64,
}

impl WmParams {
    pub fn new(
        fractal_dim: f64,
        gamma: f64,
        scale_coeff: f64,
        terms: u32,
        base_radius: f64,
        amplitude: f64,
    ) -> Result<Self, GeometryError> {
        let p = WmParams { fractal_dim, gamma, scale_coeff, terms, base_radius, amplitude };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: &str| Err(GeometryError::InvalidParams(msg.to_string()));
        if !(self.fractal_dim > 1.0 && self.fractal_dim < 2.0) {
            return bad("fractal dimension must satisfy 1 < D < 2");
        }
        if !(self.gamma > 1.0) {
            return bad("spectral exponent must satisfy gamma > 1");
        }
        if !(self.scale_coeff > 0.0) {
            return bad("amplitude scale must be positive");
        }
        if self.terms == 0 {
            return bad("series needs at least one term");
        }
        if !(self.base_radius > 0.0) {
            return bad("base radius must be positive");
        }
        if !(self.amplitude >= 0.0) {
            return bad("amplitude must be non-negative");
        }
        Ok(())
    }

    /// Smallest term count whose next frequency exceeds half the canvas
    /// width, capped at 32: finer oscillations cannot move any pixel.
    pub fn default_terms(gamma: f64, width: usize) -> u32 {
        let target = width as f64 / 2.0;
        let mut n = 1u32;
        let mut f = gamma;
        while f < target && n < 32 {
            f *= gamma;
            n += 1;
        }
        n
    }
}

/// Series value S(phi). Pure function of the spectral parameters.
pub fn wm_series(p: &WmParams, phi: f64) -> f64 {
    let decay = -(2.0 - p.fractal_dim);
    let prefactor = p.scale_coeff.powf(p.fractal_dim - 1.0);
    let mut sum = 0.0;
    let mut freq_raw = 1.0f64;
    for n in 0..p.terms {
        let freq = freq_raw.round().max(1.0);
        sum += p.gamma.powf(decay * n as f64) * (2.0 * PI * freq * phi).cos();
        freq_raw *= p.gamma;
    }
    prefactor * sum
}

/// Radius at polar angle t (radians). Rejects degenerate necks.
pub fn radius_at(p: &WmParams, t: f64) -> Result<f64, GeometryError> {
    let r = p.base_radius + p.amplitude * wm_series(p, t / (2.0 * PI));
    if r < MIN_RADIUS_RATIO * p.base_radius {
        return Err(GeometryError::DegenerateRadius { min: r, base: p.base_radius });
    }
    Ok(r)
}

/// Closed star-shaped curve around a center point. Vertices run
/// counterclockwise in grid coordinates; the last vertex connects to the
/// first. Star-shapedness (single-valued radius) rules out self-intersection.
#[derive(Clone, Debug)]
pub struct ClosedCurve {
    pub vertices: Vec<(f64, f64)>,
}

/// Samples the perturbed circle at `m` uniform angles around `center` (x, y).
pub fn sample_curve(
    p: &WmParams,
    m: usize,
    center: (f64, f64),
) -> Result<ClosedCurve, GeometryError> {
    p.validate()?;
    if m < 64 {
        return Err(GeometryError::InvalidParams("curve needs at least 64 vertices".into()));
    }
    let mut vertices = Vec::with_capacity(m);
    for k in 0..m {
        let t = 2.0 * PI * k as f64 / m as f64;
        let r = radius_at(p, t)?;
        vertices.push((center.0 + r * t.cos(), center.1 + r * t.sin()));
    }
    Ok(ClosedCurve { vertices })
}

/// Rough straight channel: per-column wall heights in grid rows, fluid
/// strictly between `bottom_wall` and `top_wall` (top_wall is the larger row
/// index). Both walls carry independent W-M perturbations of the same
/// spectrum.
#[derive(Clone, Debug)]
pub struct ChannelProfile {
    pub bottom_wall: Vec<f64>,
    pub top_wall: Vec<f64>,
    pub half_height: f64,
}

/// Phase offset separating the two wall series; any fixed non-zero shift
/// decorrelates them deterministically.
const WALL_PHASE_SHIFT: f64 = 0.37;

impl ChannelProfile {
    /// Builds a channel of length `len` columns centered on row `center_y`,
    /// with mean half-height `p.base_radius` and wall roughness
    /// `p.amplitude`.
    pub fn from_params(p: &WmParams, len: usize, center_y: f64) -> Result<Self, GeometryError> {
        p.validate()?;
        if len < 2 {
            return Err(GeometryError::InvalidParams("channel needs at least 2 columns".into()));
        }
        let mut bottom = Vec::with_capacity(len);
        let mut top = Vec::with_capacity(len);
        for c in 0..len {
            let phi = c as f64 / len as f64;
            let lo = center_y - p.base_radius + p.amplitude * wm_series(p, phi);
            let hi = center_y + p.base_radius + p.amplitude * wm_series(p, phi + WALL_PHASE_SHIFT);
            bottom.push(lo);
            top.push(hi);
        }
        let profile =
            ChannelProfile { bottom_wall: bottom, top_wall: top, half_height: p.base_radius };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.bottom_wall.len() != self.top_wall.len() || self.bottom_wall.len() < 2 {
            return Err(GeometryError::InvalidParams("wall arrays must match and be non-trivial".into()));
        }
        for (lo, hi) in self.bottom_wall.iter().zip(&self.top_wall) {
            if !(hi - lo > 2.0) {
                return Err(GeometryError::InvalidParams(format!(
                    "walls pinch to {:.3} px; need clearance > 2",
                    hi - lo
                )));
            }
        }
        Ok(())
    }
}

/// Byte-per-pixel raster: 0 = fluid, 1 = non-fluid. Row-major, `h` rows of
/// `w` columns; pixel (r, c) covers centers (c + 0.5, r + 0.5).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterMask {
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl RasterMask {
    pub fn from_bytes(h: usize, w: usize, data: Vec<u8>) -> Result<Self, GeometryError> {
        if data.len() != h * w || data.iter().any(|&b| b > 1) {
            return Err(GeometryError::InvalidParams(
                "mask bytes must be h*w values of 0 or 1".into(),
            ));
        }
        Ok(RasterMask { h, w, data })
    }

    pub fn solid(h: usize, w: usize) -> Self {
        RasterMask { h, w, data: vec![1; h * w] }
    }

    #[inline]
    pub fn is_fluid(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c] == 0
    }

    #[inline]
    pub fn set_fluid(&mut self, r: usize, c: usize) {
        self.data[r * self.w + c] = 0;
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn fluid_count(&self) -> usize {
        self.data.iter().filter(|&&b| b == 0).count()
    }

    /// Fluid must be non-empty and 4-connected.
    pub fn validate(&self) -> Result<(), GeometryError> {
        let total = self.fluid_count();
        if total == 0 {
            return Err(GeometryError::EmptyFluid);
        }
        let start = self.data.iter().position(|&b| b == 0).unwrap();
        let mut seen = vec![false; self.data.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut reached = 0usize;
        while let Some(i) = stack.pop() {
            reached += 1;
            let (r, c) = (i / self.w, i % self.w);
            let push = |rr: usize, cc: usize, stack: &mut Vec<usize>, seen: &mut Vec<bool>| {
                let j = rr * self.w + cc;
                if self.data[j] == 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                push(r - 1, c, &mut stack, &mut seen);
            }
            if r + 1 < self.h {
                push(r + 1, c, &mut stack, &mut seen);
            }
            if c > 0 {
                push(r, c - 1, &mut stack, &mut seen);
            }
            if c + 1 < self.w {
                push(r, c + 1, &mut stack, &mut seen);
            }
        }
        if reached != total {
            return Err(GeometryError::DisconnectedFluid { reached, total });
        }
        Ok(())
    }

    /// Binary PGM (P5) debug image: fluid black (0), walls white (255).
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend(self.data.iter().map(|&b| if b == 0 { 0u8 } else { 255 }));
        out
    }
}

/// Even-odd scanline fill of a closed polygon against pixel centers.
pub fn rasterize_curve(
    curve: &ClosedCurve,
    h: usize,
    w: usize,
) -> Result<RasterMask, GeometryError> {
    let n = curve.vertices.len();
    if n < 3 {
        return Err(GeometryError::InvalidParams("polygon needs at least 3 vertices".into()));
    }
    for &(x, y) in &curve.vertices {
        if !(x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64) || !x.is_finite() || !y.is_finite()
        {
            return Err(GeometryError::OutOfCanvas { h, w });
        }
    }
    let mut mask = RasterMask::solid(h, w);
    let mut crossings: Vec<f64> = Vec::with_capacity(16);
    for r in 0..h {
        let yc = r as f64 + 0.5;
        crossings.clear();
        for k in 0..n {
            let (x0, y0) = curve.vertices[k];
            let (x1, y1) = curve.vertices[(k + 1) % n];
            // Half-open span rule: each edge contributes at most one crossing,
            // so shared vertices are never double counted.
            if (y0 <= yc) != (y1 <= yc) {
                crossings.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        crossings.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        // Pixel center is fluid when an odd number of crossings lies left of it.
        let mut idx = 0usize;
        let mut inside = false;
        for c in 0..w {
            let xc = c as f64 + 0.5;
            while idx < crossings.len() && crossings[idx] < xc {
                inside = !inside;
                idx += 1;
            }
            if inside {
                mask.set_fluid(r, c);
            }
        }
    }
    if mask.fluid_count() == 0 {
        return Err(GeometryError::EmptyFluid);
    }
    Ok(mask)
}

/// Fills pixels strictly between the channel walls; requires one pixel of
/// solid margin at both canvas edges so the walls are part of the grid.
pub fn rasterize_channel(
    profile: &ChannelProfile,
    h: usize,
    w: usize,
) -> Result<RasterMask, GeometryError> {
    profile.validate()?;
    if profile.bottom_wall.len() != w {
        return Err(GeometryError::InvalidParams(format!(
            "profile length {} does not match canvas width {w}",
            profile.bottom_wall.len()
        )));
    }
    for (lo, hi) in profile.bottom_wall.iter().zip(&profile.top_wall) {
        if !(*lo >= 1.0 && *hi <= (h - 1) as f64) {
            return Err(GeometryError::OutOfCanvas { h, w });
        }
    }
    let mut mask = RasterMask::solid(h, w);
    for c in 0..w {
        let (lo, hi) = (profile.bottom_wall[c], profile.top_wall[c]);
        for r in 0..h {
            let yc = r as f64 + 0.5;
            if yc > lo && yc < hi {
                mask.set_fluid(r, c);
            }
        }
    }
    if mask.fluid_count() == 0 {
        return Err(GeometryError::EmptyFluid);
    }
    Ok(mask)
}

/// Intervals the parameter sampler draws from.
#[derive(Clone, Copy, Debug)]
pub struct ParamRanges {
    pub fractal_dim: (f64, f64),
    pub gamma: (f64, f64),
    pub terms: (u32, u32),
    pub base_radius: (f64, f64),
    /// Amplitude as a fraction of the base radius.
    pub amp_ratio: (f64, f64),
    /// Largest radius a candidate may reach; keeps curves on the canvas.
    pub max_radius: f64,
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            fractal_dim: (1.2, 1.8),
            gamma: (1.3, 2.5),
            terms: (4, 12),
            base_radius: (32.0, 46.0),
            amp_ratio: (0.05, 0.25),
            max_radius: 60.0,
        }
    }
}

impl ParamRanges {
    fn validate(&self) -> Result<(), GeometryError> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok(self.fractal_dim)
            || !ok(self.gamma)
            || !ok(self.base_radius)
            || !ok(self.amp_ratio)
            || self.terms.0 > self.terms.1
            || self.terms.0 == 0
            || !(self.max_radius > 0.0)
        {
            return Err(GeometryError::InvalidParams("degenerate sampling ranges".into()));
        }
        Ok(())
    }
}

/// Rejection rounds before giving up on a seed.
const ACCEPT_ROUNDS: usize = 100;

/// Draws a parameter set from `ranges`, rejecting candidates whose radius
/// dips under the degeneracy floor or overflows `max_radius` at any of the
/// angles later used for curve sampling. Deterministic in `seed`.
pub fn sample_params(seed: u64, ranges: &ParamRanges) -> Result<WmParams, GeometryError> {
    ranges.validate()?;
    for round in 0..ACCEPT_ROUNDS {
        let mut rng = DetRng::seeded(subseed(seed, round as u64));
        let base_radius = rng.range_f64(ranges.base_radius.0, ranges.base_radius.1);
        let p = WmParams {
            fractal_dim: rng.range_f64(ranges.fractal_dim.0, ranges.fractal_dim.1),
            gamma: rng.range_f64(ranges.gamma.0, ranges.gamma.1),
            scale_coeff: 1.0,
            terms: rng.range_u64(ranges.terms.0 as u64, ranges.terms.1 as u64) as u32,
            base_radius,
            amplitude: base_radius * rng.range_f64(ranges.amp_ratio.0, ranges.amp_ratio.1),
        };
        let mut ok = true;
        for k in 0..CURVE_VERTICES {
            let phi = k as f64 / CURVE_VERTICES as f64;
            let r = p.base_radius + p.amplitude * wm_series(&p, phi);
            if !r.is_finite() || r < MIN_RADIUS_RATIO * p.base_radius || r > ranges.max_radius {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(p);
        }
    }
    Err(GeometryError::ExhaustedRetries { rounds: ACCEPT_ROUNDS })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(d: f64, g: f64, n: u32) -> WmParams {
        WmParams::new(d, g, 1.0, n, 40.0, 6.0).unwrap()
    }

    #[test]
    fn single_term_at_zero_is_one() {
        let p = params(1.5, 2.0, 1);
        assert_eq!(wm_series(&p, 0.0), 1.0);
    }

    #[test]
    fn series_is_one_periodic() {
        let p = params(1.5, 1.5, 8);
        let a = wm_series(&p, 0.25);
        let b = wm_series(&p, 1.25);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn construction_rejects_bad_parameters() {
        assert!(WmParams::new(1.0, 1.5, 1.0, 4, 40.0, 6.0).is_err());
        assert!(WmParams::new(2.0, 1.5, 1.0, 4, 40.0, 6.0).is_err());
        assert!(WmParams::new(1.5, 1.0, 1.0, 4, 40.0, 6.0).is_err());
        assert!(WmParams::new(1.5, 1.5, 1.0, 0, 40.0, 6.0).is_err());
        assert!(WmParams::new(1.5, 1.5, 1.0, 4, -1.0, 6.0).is_err());
    }

    #[test]
    fn default_terms_matches_log_bound() {
        // gamma = 1.5, width 256: smallest N with 1.5^N >= 128 is 12.
        assert_eq!(WmParams::default_terms(1.5, 256), 12);
        assert_eq!(WmParams::default_terms(2.0, 256), 7);
        // Cap at 32 for gamma barely above 1.
        assert_eq!(WmParams::default_terms(1.01, 256), 32);
    }

    #[test]
    fn radius_is_periodic_over_full_turn() {
        let p = params(1.4, 1.7, 6);
        let a = radius_at(&p, 0.0).unwrap();
        let b = radius_at(&p, 2.0 * PI).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn degenerate_radius_is_rejected() {
        // Large amplitude relative to base: series reaches -something big.
        let p = WmParams::new(1.5, 2.0, 1.0, 1, 10.0, 20.0).unwrap();
        // cos(pi) = -1 at phi = 0.5 -> R = 10 - 20 < 1.5.
        let err = radius_at(&p, PI).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateRadius { .. }));
    }

    #[test]
    fn curve_closes_and_stays_star_shaped() {
        let p = params(1.5, 1.8, 8);
        let c = sample_curve(&p, CURVE_VERTICES, (128.0, 64.0)).unwrap();
        assert_eq!(c.vertices.len(), CURVE_VERTICES);
        let first = c.vertices[0];
        let t_last = 2.0 * PI * (CURVE_VERTICES - 1) as f64 / CURVE_VERTICES as f64;
        let r_last = radius_at(&p, t_last).unwrap();
        let last = c.vertices[CURVE_VERTICES - 1];
        assert!((last.0 - (128.0 + r_last * t_last.cos())).abs() < 1e-9);
        // Closure: vertex 0 equals the t = 0 point, radius R(0).
        let r0 = radius_at(&p, 0.0).unwrap();
        assert!((first.0 - (128.0 + r0)).abs() < 1e-12);
        assert!((first.1 - 64.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_canvas_vertex_is_rejected() {
        let p = WmParams::new(1.5, 2.0, 1.0, 1, 70.0, 0.0).unwrap();
        // Radius 70 around (128, 64) exceeds 128 rows.
        let c = sample_curve(&p, 64, (128.0, 64.0)).unwrap();
        assert!(matches!(
            rasterize_curve(&c, 128, 256),
            Err(GeometryError::OutOfCanvas { .. })
        ));
    }

    #[test]
    fn connectivity_validation_flags_split_fluid() {
        let mut data = vec![1u8; 16];
        data[0] = 0;
        data[15] = 0;
        let m = RasterMask::from_bytes(4, 4, data).unwrap();
        assert!(matches!(m.validate(), Err(GeometryError::DisconnectedFluid { .. })));
    }

    #[test]
    fn empty_mask_is_flagged() {
        let m = RasterMask::solid(4, 4);
        assert!(matches!(m.validate(), Err(GeometryError::EmptyFluid)));
    }

    #[test]
    fn pgm_header_and_palette() {
        let mut m = RasterMask::solid(2, 3);
        m.set_fluid(0, 1);
        let bytes = m.to_pgm_bytes();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let pix = &bytes[bytes.len() - 6..];
        assert_eq!(pix, &[255, 0, 255, 255, 255, 255]);
    }

    #[test]
    fn channel_profile_needs_clearance() {
        let p = WmParams::new(1.5, 1.5, 1.0, 4, 1.0, 0.9).unwrap();
        // Half-height 1 px with near-1 px roughness pinches below 2 px.
        assert!(ChannelProfile::from_params(&p, 64, 32.0).is_err());
    }

    #[test]
    fn sampler_is_deterministic_and_valid() {
        let r = ParamRanges::default();
        let a = sample_params(42, &r).unwrap();
        let b = sample_params(42, &r).unwrap();
        assert_eq!(a, b);
        assert!(a.fractal_dim > 1.2 && a.fractal_dim < 1.8);
        assert!(a.gamma >= 1.3 && a.gamma <= 2.5);
        assert!((4..=12).contains(&a.terms));
    }

    #[test]
    fn sampler_rejects_degenerate_ranges() {
        let mut r = ParamRanges::default();
        r.gamma = (2.0, 1.5);
        assert!(matches!(sample_params(1, &r), Err(GeometryError::InvalidParams(_))));
    }
}
