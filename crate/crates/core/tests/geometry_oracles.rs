//! Geometry checks against values computed independently with 50-digit
//! arithmetic, plus exact pixel counts from integer rasterization of circles.

use mflow_core::geometry::{
    radius_at, rasterize_curve, sample_curve, sample_params, wm_series, ClosedCurve, ParamRanges,
    WmParams,
};
use proptest::prelude::*;

// Series value at D = 1.5, gamma = 1.5, A = 1, N = 8, phi = 0.25 with
// integer-rounded frequencies (1, 2, 2, 3, 5, 8, 11, 17).
const WM_HALF_DIM: f64 = -1.120_275_878_293_181_1;
// Same spectrum at D = 1.7, gamma = 2, N = 6, phi = 0.125.
const WM_SEVEN_TENTHS: f64 = 1.372_068_229_309_582_8;

#[test]
fn series_matches_high_precision_reference() {
    let p = WmParams::new(1.5, 1.5, 1.0, 8, 40.0, 6.0).unwrap();
    let v = wm_series(&p, 0.25);
    assert!((v - WM_HALF_DIM).abs() < 1e-12, "got {v}");

    let q = WmParams::new(1.7, 2.0, 1.0, 6, 40.0, 6.0).unwrap();
    let w = wm_series(&q, 0.125);
    assert!((w - WM_SEVEN_TENTHS).abs() < 1e-12, "got {w}");
}

#[test]
fn perturbed_radius_matches_reference_at_quarter_turn() {
    // base 40, amplitude 6, D = 1.5, gamma = 1.5, N = 8, A = 1, t = pi/2.
    let p = WmParams::new(1.5, 1.5, 1.0, 8, 40.0, 6.0).unwrap();
    let r = radius_at(&p, std::f64::consts::FRAC_PI_2).unwrap();
    let expect = 40.0 + 6.0 * WM_HALF_DIM;
    assert!((r - expect).abs() < 1e-9, "{r} vs {expect}");
}

#[test]
fn amplitude_scale_enters_as_power_of_dim_minus_one() {
    // At D = 1.5 doubling A multiplies the series by 2^0.5 exactly.
    let p1 = WmParams::new(1.5, 1.5, 1.0, 8, 40.0, 6.0).unwrap();
    let p2 = WmParams::new(1.5, 1.5, 2.0, 8, 40.0, 6.0).unwrap();
    let ratio = wm_series(&p2, 0.25) / wm_series(&p1, 0.25);
    assert!((ratio - 2f64.sqrt()).abs() < 1e-12, "got {ratio}");
}

/// Zero-amplitude curves are circles, and no pixel center can land exactly on
/// a circle of integer radius about the canvas midpoint: the center distances
/// satisfy (2c-255)^2 + (2r-127)^2 = 2 mod 8 while (2R)^2 = 0 mod 8. The
/// polygon count therefore matches the exact disc count once the polygon has
/// enough vertices to keep its chord sagitta under the centers' clearance.
#[test]
fn circle_rasterization_matches_exact_disc_counts() {
    for (radius, expected) in [(40.0, 5024usize), (50.0, 7860)] {
        let p = WmParams::new(1.5, 1.5, 1.0, 1, radius, 0.0).unwrap();
        let curve = sample_curve(&p, 4096, (128.0, 64.0)).unwrap();
        let mask = rasterize_curve(&curve, 128, 256).unwrap();
        assert_eq!(mask.fluid_count(), expected, "radius {radius}");
        mask.validate().unwrap();
    }
}

#[test]
fn masks_are_symmetric_when_the_curve_is() {
    // Even cosine series: R(t) = R(-t), so the disc-like mask must be
    // mirror-symmetric about the horizontal centerline between rows r and
    // 127 - r (centers at 64 -/+ the same offset).
    let p = WmParams::new(1.5, 1.5, 1.0, 8, 40.0, 6.0).unwrap();
    let curve = sample_curve(&p, 4096, (128.0, 64.0)).unwrap();
    let mask = rasterize_curve(&curve, 128, 256).unwrap();
    for r in 0..64 {
        for c in 0..256 {
            assert_eq!(
                mask.is_fluid(r, c),
                mask.is_fluid(127 - r, c),
                "asymmetry at ({r}, {c})"
            );
        }
    }
}

fn series_tail_bound(p: &WmParams) -> f64 {
    let decay = -(2.0 - p.fractal_dim);
    let pref = p.scale_coeff.powf(p.fractal_dim - 1.0);
    (0..p.terms).map(|n| p.gamma.powf(decay * n as f64)).sum::<f64>() * pref
}

proptest! {
    #[test]
    fn series_never_exceeds_its_absolute_bound(
        d in 1.05f64..1.95,
        g in 1.1f64..3.0,
        n in 1u32..16,
        phi in -4.0f64..4.0,
    ) {
        let p = WmParams::new(d, g, 1.0, n, 40.0, 6.0).unwrap();
        let bound = series_tail_bound(&p);
        let v = wm_series(&p, phi);
        prop_assert!(v.abs() <= bound * (1.0 + 1e-12) + 1e-12, "{v} vs bound {bound}");
    }

    #[test]
    fn series_is_even_in_phase(
        d in 1.05f64..1.95,
        g in 1.1f64..3.0,
        n in 1u32..16,
        phi in 0.0f64..2.0,
    ) {
        let p = WmParams::new(d, g, 1.0, n, 40.0, 6.0).unwrap();
        let a = wm_series(&p, phi);
        let b = wm_series(&p, -phi);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn series_repeats_each_unit_interval(
        d in 1.05f64..1.95,
        g in 1.1f64..3.0,
        n in 1u32..16,
        phi in 0.0f64..1.0,
        k in 1i32..4,
    ) {
        let p = WmParams::new(d, g, 1.0, n, 40.0, 6.0).unwrap();
        let a = wm_series(&p, phi);
        let b = wm_series(&p, phi + k as f64);
        prop_assert!((a - b).abs() <= 1e-8 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn sampled_parameters_always_yield_a_curve_on_canvas(seed in 0u64..64) {
        // Radius validity at the curve's own sample angles is guaranteed by
        // the sampler; connectivity is not (thin lobes may pixelate apart)
        // and is the dataset generator's retry condition instead.
        let p = sample_params(seed, &ParamRanges::default()).unwrap();
        let curve = sample_curve(&p, 4096, (128.0, 64.0)).unwrap();
        let mask = rasterize_curve(&curve, 128, 256).unwrap();
        // The star-shaped interior always contains the disc at the floor
        // radius, so a healthy chunk of pixels must be fluid.
        prop_assert!(mask.fluid_count() > 50);
    }

    #[test]
    fn rotating_vertex_order_leaves_the_mask_unchanged(
        seed in 0u64..16,
        offset in 1usize..4095,
    ) {
        let p = sample_params(seed, &ParamRanges::default()).unwrap();
        let curve = sample_curve(&p, 4096, (128.0, 64.0)).unwrap();
        let mut rotated = curve.vertices.clone();
        rotated.rotate_left(offset);
        let a = rasterize_curve(&curve, 128, 256).unwrap();
        let b = rasterize_curve(&ClosedCurve { vertices: rotated }, 128, 256).unwrap();
        prop_assert!(a == b);
    }

    #[test]
    fn reflecting_a_curve_reflects_its_mask(seed in 0u64..16) {
        let p = sample_params(seed, &ParamRanges::default()).unwrap();
        let curve = sample_curve(&p, 4096, (128.0, 64.0)).unwrap();
        let mirrored: Vec<(f64, f64)> =
            curve.vertices.iter().map(|&(x, y)| (256.0 - x, y)).collect();
        let a = rasterize_curve(&curve, 128, 256).unwrap();
        let b = rasterize_curve(&ClosedCurve { vertices: mirrored }, 128, 256).unwrap();
        for r in 0..128 {
            for c in 0..256 {
                prop_assert!(a.is_fluid(r, c) == b.is_fluid(r, 255 - c), "({r},{c})");
            }
        }
    }

    #[test]
    fn truncation_tail_is_geometrically_bounded(
        d in 1.05f64..1.95,
        g in 1.1f64..3.0,
        k in 1u32..12,
        phi in 0.0f64..1.0,
    ) {
        let short = WmParams::new(d, g, 1.0, k, 40.0, 6.0).unwrap();
        let long = WmParams::new(d, g, 1.0, k + 8, 40.0, 6.0).unwrap();
        let ratio = g.powf(-(2.0 - d));
        let bound = ratio.powi(k as i32) / (1.0 - ratio);
        let gap = (wm_series(&short, phi) - wm_series(&long, phi)).abs();
        prop_assert!(gap <= bound * (1.0 + 1e-12) + 1e-12, "{gap} vs {bound}");
    }
}
