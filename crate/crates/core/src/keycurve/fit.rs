use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::{AnnotationSet, CurveSet, KeyCurve, KeyPoint};
use crate::error::{Error, Result};

/// Eigenvalue ratio of the scaled normal matrix below which the fit is rejected.
const SINGULAR_TOLERANCE: f64 = 1e-10;

/// Least-squares quadratic fit of `x(z)` and `y(z)`.
///
/// z is mapped to `[-1, 1]` before forming the normal equations; the
/// coefficients and their covariances are mapped back to the raw z basis.
pub fn fit_curve(points: &[KeyPoint]) -> Result<KeyCurve> {
    let curve_id = points
        .first()
        .map(|p| p.curve_id.clone())
        .unwrap_or_default();
    for p in points {
        p.validate()?;
        if p.curve_id != curve_id {
            return Err(Error::InvalidPoint(format!(
                "mixed curve ids {curve_id} and {}",
                p.curve_id
            )));
        }
    }

    let mut zs: Vec<f64> = points.iter().map(|p| p.z).collect();
    zs.sort_by(f64::total_cmp);
    zs.dedup();
    if zs.len() < 3 {
        return Err(Error::InsufficientPoints {
            curve_id,
            distinct: zs.len(),
        });
    }
    let z_min = zs[0];
    let z_max = zs[zs.len() - 1];
    let center = 0.5 * (z_min + z_max);
    let half = 0.5 * (z_max - z_min);

    let basis = |z: f64| {
        let t = (z - center) / half;
        Vector3::new(t * t, t, 1.0)
    };

    let mut normal = Matrix3::zeros();
    let mut rhs_x = Vector3::zeros();
    let mut rhs_y = Vector3::zeros();
    for p in points {
        let v = basis(p.z);
        normal += v * v.transpose();
        rhs_x += v * p.x;
        rhs_y += v * p.y;
    }

    let eig = SymmetricEigen::new(normal);
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if !(lo > SINGULAR_TOLERANCE * hi) {
        return Err(Error::DegenerateSystem(curve_id));
    }
    let inverse = eig.eigenvectors
        * Matrix3::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e))
        * eig.eigenvectors.transpose();
    let inverse = 0.5 * (inverse + inverse.transpose());

    let bx = inverse * rhs_x;
    let by = inverse * rhs_y;

    let n = points.len();
    let (ssr_x, ssr_y) = points.iter().fold((0.0, 0.0), |(sx, sy), p| {
        let v = basis(p.z);
        let rx = p.x - bx.dot(&v);
        let ry = p.y - by.dot(&v);
        (sx + rx * rx, sy + ry * ry)
    });
    let dof = n.saturating_sub(3);
    let (var_x, var_y) = if dof > 0 {
        (ssr_x / dof as f64, ssr_y / dof as f64)
    } else {
        (0.0, 0.0)
    };

    // Row k of `to_raw` expresses raw coefficient (a2, a1, a0)[k] in terms
    // of the scaled-basis coefficients.
    let h2 = half * half;
    let to_raw = Matrix3::new(
        1.0 / h2,
        0.0,
        0.0,
        -2.0 * center / h2,
        1.0 / half,
        0.0,
        center * center / h2,
        -center / half,
        1.0,
    );
    let raw_cov = |var: f64| {
        let c = to_raw * (inverse * var) * to_raw.transpose();
        symmetric_array(&c)
    };

    Ok(KeyCurve {
        curve_id,
        coeff_x: (to_raw * bx).into(),
        coeff_y: (to_raw * by).into(),
        z_min,
        z_max,
        residual_var_x: var_x,
        residual_var_y: var_y,
        coeff_cov_x: raw_cov(var_x),
        coeff_cov_y: raw_cov(var_y),
        n_points: n,
    })
}

fn symmetric_array(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = 0.5 * (m[(i, j)] + m[(j, i)]);
        }
    }
    out
}

/// Fits every curve of an annotation set.
pub fn fit_all(annotations: &AnnotationSet) -> Result<CurveSet> {
    let mut curves = BTreeMap::new();
    for (id, points) in annotations.by_curve() {
        curves.insert(id.to_string(), fit_curve(&points)?);
    }
    Ok(CurveSet {
        visit_id: annotations.visit_id.clone(),
        curves,
    })
}

/// Annotator click uncertainty (1-sigma, mm), added in quadrature to the
/// regression band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionUncertainty {
    pub x_mm: f64,
    pub y_mm: f64,
}

impl Default for SelectionUncertainty {
    fn default() -> Self {
        SelectionUncertainty {
            x_mm: 2.52,
            y_mm: 1.96,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionBand {
    pub z_mm: f64,
    /// Regression-only standard deviations.
    pub regression_x: f64,
    pub regression_y: f64,
    /// Regression and selection uncertainty combined.
    pub sigma_x: f64,
    pub sigma_y: f64,
}

/// Prediction band of a fitted curve at `z`: `vᵀ C v + s²` per axis with
/// `v = (z², z, 1)`, widened by the selection uncertainty.
pub fn prediction_band(curve: &KeyCurve, z: f64, selection: SelectionUncertainty) -> PredictionBand {
    let v = [z * z, z, 1.0];
    let quad = |c: &[[f64; 3]; 3]| {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += v[i] * c[i][j] * v[j];
            }
        }
        s.max(0.0)
    };
    let var_x = quad(&curve.coeff_cov_x) + curve.residual_var_x;
    let var_y = quad(&curve.coeff_cov_y) + curve.residual_var_y;
    PredictionBand {
        z_mm: z,
        regression_x: var_x.sqrt(),
        regression_y: var_y.sqrt(),
        sigma_x: (var_x + selection.x_mm * selection.x_mm).sqrt(),
        sigma_y: (var_y + selection.y_mm * selection.y_mm).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(zs: &[f64], fx: impl Fn(f64) -> f64, fy: impl Fn(f64) -> f64) -> Vec<KeyPoint> {
        zs.iter().map(|&z| KeyPoint::new("c", fx(z), fy(z), z)).collect()
    }

    #[test]
    fn exact_parabola() {
        let c = fit_curve(&pts(&[0.0, 1.0, 2.0, 3.0], |z| z * z, |_| 0.0)).unwrap();
        for (got, want) in c.coeff_x.iter().zip([1.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(c.coeff_y.iter().all(|v| v.abs() < 1e-12));
        assert!(c.residual_var_x < 1e-24 && c.residual_var_y < 1e-24);
        assert_eq!((c.z_min, c.z_max, c.n_points), (0.0, 3.0, 4));
    }

    #[test]
    fn three_points_interpolate() {
        let p = pts(&[10.0, 25.0, 70.0], |z| 3.0 - 0.5 * z, |z| (z / 10.0).sin());
        let c = fit_curve(&p).unwrap();
        for q in &p {
            let (x, y) = c.eval(q.z);
            assert!((x - q.x).abs() < 1e-9 && (y - q.y).abs() < 1e-9);
        }
        assert_eq!(c.residual_var_x, 0.0);
        assert_eq!(c.coeff_cov_x, [[0.0; 3]; 3]);
    }

    #[test]
    fn too_few_distinct_z() {
        let p = pts(&[1.0, 1.0, 2.0, 2.0], |z| z, |z| z);
        assert!(matches!(
            fit_curve(&p),
            Err(Error::InsufficientPoints { distinct: 2, .. })
        ));
        assert!(matches!(
            fit_curve(&pts(&[5.0, 5.0, 5.0], |z| z, |z| z)),
            Err(Error::InsufficientPoints { distinct: 1, .. })
        ));
        assert!(matches!(
            fit_curve(&[]),
            Err(Error::InsufficientPoints { distinct: 0, .. })
        ));
    }

    #[test]
    fn near_duplicate_z_is_degenerate() {
        let p = pts(&[0.0, 1e-7, 1.0], |z| z, |z| z);
        assert!(matches!(fit_curve(&p), Err(Error::DegenerateSystem(_))));
    }

    #[test]
    fn mixed_ids_rejected() {
        let mut p = pts(&[0.0, 1.0, 2.0], |z| z, |z| z);
        p[1].curve_id = "other".into();
        assert!(matches!(fit_curve(&p), Err(Error::InvalidPoint(_))));
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p: Vec<KeyPoint> = (0..15)
            .map(|i| {
                let z = 100.0 + 7.0 * i as f64;
                KeyPoint::new("c", rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), z)
            })
            .collect();
        let c = fit_curve(&p).unwrap();
        for cov in [c.coeff_cov_x, c.coeff_cov_y] {
            let m = Matrix3::from_fn(|i, j| cov[i][j]);
            assert_eq!(m, m.transpose());
            let scale = m.abs().max();
            assert!(SymmetricEigen::new(m)
                .eigenvalues
                .iter()
                .all(|&e| e >= -1e-9 * scale));
        }
    }

    #[test]
    fn selection_floor_at_fitted_mean() {
        let p = pts(&[0.0, 10.0, 20.0, 30.0, 40.0], |z| 0.01 * z * z, |z| 2.0 * z);
        let c = fit_curve(&p).unwrap();
        let band = prediction_band(&c, 20.0, SelectionUncertainty::default());
        assert_eq!(band.sigma_x, 2.52);
        assert_eq!(band.sigma_y, 1.96);
    }

    #[test]
    fn band_grows_outside_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let p: Vec<KeyPoint> = (0..10)
                .map(|i| {
                    let z = 50.0 + 12.0 * i as f64 + rng.gen_range(-2.0..2.0);
                    let noise = rng.gen_range(-2.0..2.0);
                    KeyPoint::new("c", 0.003 * z * z + noise, 10.0 - noise, z)
                })
                .collect();
            let c = fit_curve(&p).unwrap();
            let sel = SelectionUncertainty::default();
            let mid = prediction_band(&c, 0.5 * (c.z_min + c.z_max), sel);
            let out = prediction_band(&c, c.z_max + c.span(), sel);
            assert!(out.sigma_x >= mid.sigma_x && out.sigma_y >= mid.sigma_y);
            assert!(out.regression_x > mid.regression_x);
        }
    }
}
