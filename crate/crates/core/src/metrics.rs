//! Field-comparison scores: mean relative error, Dice, and IoU.
//!
//! Two overlap variants exist. `SoftSquared` uses squared-magnitude
//! denominators so identical continuous fields score 1; `PaperLiteral`
//! keeps the reference formulas exactly as printed, which do not have
//! that property (their denominators omit the prediction term or use
//! first powers). Scores are computed per sample over the whole plane,
//! exterior zeros included, then averaged over the batch.

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    SoftSquared,
    PaperLiteral,
}

#[derive(Clone, Copy, Debug)]
pub struct MetricsConfig {
    pub eps: f64,
    pub variant: Variant,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { eps: 1e-6, variant: Variant::SoftSquared }
    }
}

impl MetricsConfig {
    pub fn literal() -> MetricsConfig {
        MetricsConfig { eps: 1e-6, variant: Variant::PaperLiteral }
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics: sample {sample} has an all-zero reference field")]
    ZeroReference { sample: usize },
    #[error("metrics: {detail}")]
    BadLayout { detail: String },
}

fn per_sample<'a>(
    pred: &'a [f32],
    truth: &'a [f32],
    samples: usize,
) -> Result<impl Iterator<Item = (&'a [f32], &'a [f32])>, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::BadLayout {
            detail: format!("pred has {} values, truth {}", pred.len(), truth.len()),
        });
    }
    if samples == 0 || pred.is_empty() || pred.len() % samples != 0 {
        return Err(MetricsError::BadLayout {
            detail: format!("{} values cannot split into {} samples", pred.len(), samples),
        });
    }
    let chunk = pred.len() / samples;
    Ok(pred.chunks(chunk).zip(truth.chunks(chunk)))
}

/// Mean relative error: per sample, the summed absolute discrepancy over
/// the summed reference magnitude; averaged over the batch.
pub fn mre(pred: &[f32], truth: &[f32], samples: usize) -> Result<f64, MetricsError> {
    let mut total = 0.0f64;
    for (i, (p, t)) in per_sample(pred, truth, samples)?.enumerate() {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (&pv, &tv) in p.iter().zip(t) {
            num += (tv as f64 - pv as f64).abs();
            den += (tv as f64).abs();
        }
        if den == 0.0 {
            return Err(MetricsError::ZeroReference { sample: i });
        }
        total += num / den;
    }
    Ok(total / samples as f64)
}

struct Overlap {
    cross: f64, // Σ|v·v̂|
    sq: f64,    // Σv² + Σv̂²
    abs: f64,   // Σ|v|
    abs_pred: f64,
}

fn overlap(p: &[f32], t: &[f32]) -> Overlap {
    let mut cross = 0.0f64;
    let mut sq = 0.0f64;
    let mut abs = 0.0f64;
    let mut abs_pred = 0.0f64;
    for (&pv, &tv) in p.iter().zip(t) {
        let (pv, tv) = (pv as f64, tv as f64);
        cross += (pv * tv).abs();
        sq += tv * tv + pv * pv;
        abs += tv.abs();
        abs_pred += pv.abs();
    }
    Overlap { cross, sq, abs, abs_pred }
}

/// Dice overlap between predicted and reference fields, averaged over the
/// batch. `SoftSquared`: (2Σ|v·v̂|+ε)/(Σv²+Σv̂²+ε). `PaperLiteral`:
/// (2Σ|v·v̂|+ε)/(Σ|v|+ε) with the reference field alone in the denominator.
pub fn dice(
    pred: &[f32],
    truth: &[f32],
    samples: usize,
    cfg: &MetricsConfig,
) -> Result<f64, MetricsError> {
    let mut total = 0.0f64;
    for (p, t) in per_sample(pred, truth, samples)? {
        let o = overlap(p, t);
        total += match cfg.variant {
            Variant::SoftSquared => (2.0 * o.cross + cfg.eps) / (o.sq + cfg.eps),
            Variant::PaperLiteral => (2.0 * o.cross + cfg.eps) / (o.abs + cfg.eps),
        };
    }
    Ok(total / samples as f64)
}

/// Intersection-over-union, averaged over the batch. `SoftSquared`:
/// (Σ|v·v̂|+ε)/(Σv²+Σv̂²−Σ|v·v̂|+ε). `PaperLiteral` drops ε and uses
/// first powers: Σ|v·v̂|/(Σ|v|+Σ|v̂|−Σ|v·v̂|).
pub fn iou(
    pred: &[f32],
    truth: &[f32],
    samples: usize,
    cfg: &MetricsConfig,
) -> Result<f64, MetricsError> {
    let mut total = 0.0f64;
    for (p, t) in per_sample(pred, truth, samples)? {
        let o = overlap(p, t);
        total += match cfg.variant {
            Variant::SoftSquared => (o.cross + cfg.eps) / (o.sq - o.cross + cfg.eps),
            Variant::PaperLiteral => o.cross / (o.abs + o.abs_pred - o.cross),
        };
    }
    Ok(total / samples as f64)
}
