//! Solver accuracy against closed-form laminar profiles.

use mflow_core::flowsolve::{solve_channel, solve_duct, SolverConfig};
use mflow_core::geometry::RasterMask;

fn circle_mask(side: usize, radius: f64) -> RasterMask {
    let c = side as f64 / 2.0;
    let mut mask = RasterMask::solid(side, side);
    for r in 0..side {
        for q in 0..side {
            let dy = r as f64 + 0.5 - c;
            let dx = q as f64 + 0.5 - c;
            if dx * dx + dy * dy <= radius * radius {
                mask.set_fluid(r, q);
            }
        }
    }
    mask
}

fn centerline_error(radius_px: usize) -> f64 {
    let side = 2 * radius_px + 8;
    let mask = circle_mask(side, radius_px as f64);
    let cfg = SolverConfig::default();
    let field = solve_duct(&mask, &cfg).expect("duct solve");
    // Hagen-Poiseuille: the axis velocity is twice the cross-section mean.
    let expect = 2.0 * cfg.mean_velocity;
    let mid = side / 2;
    let got = (field.magnitude[mid * side + mid]
        + field.magnitude[mid * side + mid - 1]
        + field.magnitude[(mid - 1) * side + mid]
        + field.magnitude[(mid - 1) * side + mid - 1])
        / 4.0;
    (got - expect).abs() / expect
}

#[test]
fn duct_circle_centerline_converges_to_twice_mean() {
    assert!(centerline_error(50) < 0.02);
}

#[test]
fn duct_error_shrinks_monotonically_with_resolution() {
    let errs: Vec<f64> = [20, 30, 40, 50].iter().map(|&r| centerline_error(r)).collect();
    for pair in errs.windows(2) {
        assert!(pair[1] < pair[0], "refinement must not degrade: {:?}", errs);
    }
}

#[test]
fn straight_channel_develops_parabolic_exit_profile() {
    // 64x128 with a half-height of 20 cells keeps the run short; the
    // discrete parabola peaks below the continuum 1.5x mean by O(1/H).
    let (h, w) = (64, 128);
    let half = 20usize;
    let mut mask = RasterMask::solid(h, w);
    for r in h / 2 - half..h / 2 + half {
        for c in 0..w {
            mask.set_fluid(r, c);
        }
    }
    let cfg = SolverConfig::default();
    let field = solve_channel(&mask, &cfg).expect("channel solve");

    let peak = (0..h)
        .map(|r| field.magnitude[r * w + (w - 1)])
        .fold(0.0f64, f64::max);
    let expect = 1.5 * cfg.mean_velocity;
    assert!(
        (peak - expect).abs() / expect < 0.04,
        "exit peak {} vs {}",
        peak,
        expect
    );

    let inflow = field.column_flux(0, &cfg).expect("staggered faces");
    let outflow = field.column_flux(w, &cfg).expect("staggered faces");
    assert!((outflow - inflow).abs() / inflow < 0.005, "flux {} vs {}", inflow, outflow);
}
