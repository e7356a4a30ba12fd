//! Key curves: quadratic-in-z centerlines fitted to 2D slice annotations,
//! and the curve-distance alignment metric built on them.

mod fit;
mod metric;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::warp::SpatialTransform;

pub use fit::{fit_all, fit_curve, prediction_band, PredictionBand, SelectionUncertainty};
pub use metric::{curve_distance, rmse, CurveScore, RmseReport, DEFAULT_SAMPLES};

/// A clicked point on one axial slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyPoint {
    pub curve_id: String,
    #[serde(rename = "z_mm")]
    pub z: f64,
    #[serde(rename = "x_mm")]
    pub x: f64,
    #[serde(rename = "y_mm")]
    pub y: f64,
    /// Provenance only; never used in fitting.
    #[serde(rename = "slice", default)]
    pub source_slice_index: i64,
}

impl KeyPoint {
    pub fn new(curve_id: impl Into<String>, x: f64, y: f64, z: f64) -> Self {
        KeyPoint {
            curve_id: curve_id.into(),
            z,
            x,
            y,
            source_slice_index: 0,
        }
    }

    pub fn position(&self) -> Point3<f64> {
        Point3::new(self.x, self.y, self.z)
    }

    pub fn validate(&self) -> Result<()> {
        if self.curve_id.is_empty() {
            return Err(Error::InvalidPoint("empty curve_id".into()));
        }
        if !(self.x.is_finite() && self.y.is_finite() && self.z.is_finite()) {
            return Err(Error::InvalidPoint(format!(
                "non-finite coordinate on curve {}",
                self.curve_id
            )));
        }
        Ok(())
    }
}

/// All key points clicked for one visit. This is the annotation file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub visit_id: String,
    pub points: Vec<KeyPoint>,
}

impl AnnotationSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = read_text(path.as_ref())?;
        let set: AnnotationSet =
            serde_json::from_str(&text).map_err(|e| Error::HeaderParse(e.to_string()))?;
        for p in &set.points {
            p.validate()?;
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Points grouped by curve id, in id order.
    pub fn by_curve(&self) -> BTreeMap<&str, Vec<KeyPoint>> {
        let mut groups: BTreeMap<&str, Vec<KeyPoint>> = BTreeMap::new();
        for p in &self.points {
            groups.entry(p.curve_id.as_str()).or_default().push(p.clone());
        }
        groups
    }
}

/// Quadratic centerline `x(z) = a2 z² + a1 z + a0`, likewise `y(z)`, with the
/// statistics of the least-squares fit that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyCurve {
    pub curve_id: String,
    /// `(a2, a1, a0)` in the raw z basis.
    pub coeff_x: [f64; 3],
    pub coeff_y: [f64; 3],
    pub z_min: f64,
    pub z_max: f64,
    pub residual_var_x: f64,
    pub residual_var_y: f64,
    pub coeff_cov_x: [[f64; 3]; 3],
    pub coeff_cov_y: [[f64; 3]; 3],
    pub n_points: usize,
}

impl KeyCurve {
    /// Noise-free curve with the given coefficients, for synthetic ground truth.
    pub fn exact(
        curve_id: impl Into<String>,
        coeff_x: [f64; 3],
        coeff_y: [f64; 3],
        z_min: f64,
        z_max: f64,
    ) -> Self {
        KeyCurve {
            curve_id: curve_id.into(),
            coeff_x,
            coeff_y,
            z_min,
            z_max,
            residual_var_x: 0.0,
            residual_var_y: 0.0,
            coeff_cov_x: [[0.0; 3]; 3],
            coeff_cov_y: [[0.0; 3]; 3],
            n_points: 3,
        }
    }

    /// Evaluates `(x, y)` at `z` by Horner's rule; extrapolation allowed.
    pub fn eval(&self, z: f64) -> (f64, f64) {
        (horner(&self.coeff_x, z), horner(&self.coeff_y, z))
    }

    pub fn span(&self) -> f64 {
        self.z_max - self.z_min
    }
}

/// See [`KeyCurve::eval`].
pub fn eval_curve(curve: &KeyCurve, z: f64) -> (f64, f64) {
    curve.eval(z)
}

#[inline]
fn horner(c: &[f64; 3], z: f64) -> f64 {
    (c[0] * z + c[1]) * z + c[2]
}

/// Fitted curves of one visit, keyed by curve id. This is the curve file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSet {
    pub visit_id: String,
    pub curves: BTreeMap<String, KeyCurve>,
}

impl CurveSet {
    pub fn new(visit_id: impl Into<String>) -> Self {
        CurveSet {
            visit_id: visit_id.into(),
            curves: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, curve: KeyCurve) {
        self.curves.insert(curve.curve_id.clone(), curve);
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = read_text(path.as_ref())?;
        serde_json::from_str(&text).map_err(|e| Error::HeaderParse(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Maps every point through `t`. Curves of the mapped points come from
/// refitting with [`fit_curve`].
pub fn transform_points<T: SpatialTransform + ?Sized>(points: &[KeyPoint], t: &T) -> Vec<KeyPoint> {
    points
        .iter()
        .map(|p| {
            let q = t.apply(&p.position());
            KeyPoint {
                curve_id: p.curve_id.clone(),
                z: q.z,
                x: q.x,
                y: q.y,
                source_slice_index: p.source_slice_index,
            }
        })
        .collect()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}
