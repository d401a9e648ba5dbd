//! PPM heatmaps of field planes: a blue→red ramp for magnitudes and a
//! blue→white→red ramp for signed components, walls painted black.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ramp {
    /// Linear blue→red over [min, max].
    Sequential,
    /// Blue→white→red over [−a, a] with a = max |value|; zero is white.
    Diverging,
}

#[derive(Debug)]
pub struct NonFiniteValues {
    pub index: usize,
}

impl fmt::Display for NonFiniteValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "non-finite value at pixel {}", self.index)
    }
}

impl std::error::Error for NonFiniteValues {}

fn byte(x: f64) -> u8 {
    (x * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Renders one h×w plane to P6 bytes. `mask` gives one byte per pixel with
/// 0 meaning fluid; pass None to treat every pixel as fluid. Wall pixels
/// are black and excluded from the range scan.
pub fn render(
    values: &[f64],
    mask: Option<&[u8]>,
    h: usize,
    w: usize,
    ramp: Ramp,
) -> Result<Vec<u8>, NonFiniteValues> {
    assert_eq!(values.len(), h * w, "plane size");
    if let Some(m) = mask {
        assert_eq!(m.len(), h * w, "mask size");
    }
    let fluid = |i: usize| mask.map_or(true, |m| m[i] == 0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut amp = 0.0f64;
    for (i, &v) in values.iter().enumerate() {
        if !fluid(i) {
            continue;
        }
        if !v.is_finite() {
            return Err(NonFiniteValues { index: i });
        }
        lo = lo.min(v);
        hi = hi.max(v);
        amp = amp.max(v.abs());
    }

    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    for (i, &v) in values.iter().enumerate() {
        let rgb = if !fluid(i) {
            [0, 0, 0]
        } else {
            match ramp {
                Ramp::Sequential => {
                    // Constant fields sit at the ramp midpoint.
                    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                    [byte(t), 0, byte(1.0 - t)]
                }
                Ramp::Diverging => {
                    if amp == 0.0 {
                        [255, 255, 255]
                    } else if v < 0.0 {
                        let s = 1.0 + v / amp;
                        [byte(s), byte(s), 255]
                    } else {
                        let s = 1.0 - v / amp;
                        [255, byte(s), byte(s)]
                    }
                }
            }
        };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}
