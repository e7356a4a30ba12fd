use serde::{Deserialize, Serialize};

use super::{CurveSet, KeyCurve};
use crate::error::{Error, Result};

pub const DEFAULT_SAMPLES: usize = 64;

/// z positions at which two curves are compared: midpoints of `n` equal
/// cells covering the shared span.
fn overlap_samples(a: &KeyCurve, b: &KeyCurve, n: usize) -> Result<Vec<f64>> {
    let lo = a.z_min.max(b.z_min);
    let hi = a.z_max.min(b.z_max);
    if !(lo < hi) {
        return Err(Error::NoOverlap(a.curve_id.clone(), b.curve_id.clone()));
    }
    if n < 2 {
        return Err(Error::InvalidConfig(format!("n_samples must be >= 2, got {n}")));
    }
    let step = (hi - lo) / n as f64;
    Ok((0..n).map(|k| lo + (k as f64 + 0.5) * step).collect())
}

fn sample_distances(a: &KeyCurve, b: &KeyCurve, n: usize) -> Result<Vec<f64>> {
    Ok(overlap_samples(a, b, n)?
        .into_iter()
        .map(|z| {
            let (xa, ya) = a.eval(z);
            let (xb, yb) = b.eval(z);
            (xa - xb).hypot(ya - yb)
        })
        .collect())
}

/// Mean in-plane distance between two curves over their shared z span.
pub fn curve_distance(a: &KeyCurve, b: &KeyCurve, n_samples: usize) -> Result<f64> {
    let d = sample_distances(a, b, n_samples)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveScore {
    pub curve_id: String,
    pub mean_distance_mm: f64,
    pub rms_mm: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    /// Root mean square of all per-sample distances, pooled over curves.
    pub rmse_mm: f64,
    /// Arithmetic mean of the same samples.
    pub mean_distance_mm: f64,
    /// Mean of the per-curve RMS values.
    pub per_curve_mean_rms_mm: f64,
    pub per_curve: Vec<CurveScore>,
    /// Curve ids present in only one set, or without z overlap.
    pub skipped: Vec<String>,
}

/// Pooled RMSE of key-curve distances over every curve id the two sets share.
pub fn rmse(src: &CurveSet, tgt: &CurveSet, n_samples: usize) -> Result<RmseReport> {
    let mut skipped = Vec::new();
    let mut per_curve = Vec::new();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for (id, a) in &src.curves {
        let Some(b) = tgt.curves.get(id) else {
            skipped.push(id.clone());
            continue;
        };
        let d = match sample_distances(a, b, n_samples) {
            Ok(d) => d,
            Err(Error::NoOverlap(..)) => {
                skipped.push(id.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        let s: f64 = d.iter().sum();
        let s2: f64 = d.iter().map(|v| v * v).sum();
        sum += s;
        sum_sq += s2;
        count += d.len();
        per_curve.push(CurveScore {
            curve_id: id.clone(),
            mean_distance_mm: s / d.len() as f64,
            rms_mm: (s2 / d.len() as f64).sqrt(),
            n_samples: d.len(),
        });
    }
    skipped.extend(
        tgt.curves
            .keys()
            .filter(|id| !src.curves.contains_key(*id))
            .cloned(),
    );
    if per_curve.is_empty() {
        return Err(Error::NoSharedCurves);
    }
    let per_curve_mean_rms_mm =
        per_curve.iter().map(|c| c.rms_mm).sum::<f64>() / per_curve.len() as f64;
    Ok(RmseReport {
        rmse_mm: (sum_sq / count as f64).sqrt(),
        mean_distance_mm: sum / count as f64,
        per_curve_mean_rms_mm,
        per_curve,
        skipped,
    })
}
