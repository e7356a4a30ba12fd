use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SINGULAR_DET: f64 = 1e-12;

/// `p ↦ linear · p + translation`, in world millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "AffineRepr", into = "AffineRepr")]
pub struct Affine3 {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Row-major JSON layout.
#[derive(Serialize, Deserialize)]
struct AffineRepr {
    linear: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<AffineRepr> for Affine3 {
    fn from(r: AffineRepr) -> Self {
        Affine3 {
            linear: Matrix3::from_fn(|i, j| r.linear[i][j]),
            translation: Vector3::from(r.translation),
        }
    }
}

impl From<Affine3> for AffineRepr {
    fn from(a: Affine3) -> Self {
        let mut linear = [[0.0; 3]; 3];
        for (i, row) in linear.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a.linear[(i, j)];
            }
        }
        AffineRepr {
            linear,
            translation: a.translation.into(),
        }
    }
}

impl Default for Affine3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine3 {
    pub fn new(linear: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Affine3 {
            linear,
            translation,
        }
    }

    pub fn identity() -> Self {
        Affine3::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Affine3::new(Matrix3::identity(), t)
    }

    #[inline]
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.linear * p.coords + self.translation)
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }

    pub fn is_invertible(&self) -> bool {
        self.linear.determinant().abs() > SINGULAR_DET
    }

    pub fn invert(&self) -> Result<Affine3> {
        if !self.is_invertible() {
            return Err(Error::SingularTransform);
        }
        let inv = self.linear.try_inverse().ok_or(Error::SingularTransform)?;
        Ok(Affine3::new(inv, -(inv * self.translation)))
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &Affine3) -> Affine3 {
        Affine3::new(
            self.linear * first.linear,
            self.linear * first.translation + self.translation,
        )
    }

    pub fn max_abs_diff(&self, other: &Affine3) -> f64 {
        (self.linear - other.linear)
            .abs()
            .max()
            .max((self.translation - other.translation).abs().max())
    }
}

pub fn affine_apply(t: &Affine3, p: &Point3<f64>) -> Point3<f64> {
    t.apply(p)
}

pub fn affine_invert(t: &Affine3) -> Result<Affine3> {
    t.invert()
}

/// `compose(a, b)` applies `b` first, then `a`.
pub fn affine_compose(a: &Affine3, b: &Affine3) -> Affine3 {
    a.compose(b)
}

/// Decomposed affine: `p ↦ R·S·Sh·(p − c) + c + t`.
///
/// `rotation_deg` is a rotation vector (axis times angle, degrees); shears
/// fill the upper triangle `(xy, xz, yz)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: [f64; 3],
    pub log_scale: [f64; 3],
    pub shear: [f64; 3],
    pub translation_mm: [f64; 3],
    pub center_mm: [f64; 3],
}

impl AffineParams {
    pub const DIM: usize = 12;

    pub fn to_affine(&self) -> Affine3 {
        let axis_angle = Vector3::from(self.rotation_deg) * std::f64::consts::PI / 180.0;
        let rotation = Rotation3::from_scaled_axis(axis_angle).into_inner();
        let scale = Matrix3::from_diagonal(&Vector3::from(self.log_scale).map(f64::exp));
        let [sxy, sxz, syz] = self.shear;
        let shear = Matrix3::new(1.0, sxy, sxz, 0.0, 1.0, syz, 0.0, 0.0, 1.0);
        let linear = rotation * scale * shear;
        let c = Vector3::from(self.center_mm);
        Affine3::new(linear, c + Vector3::from(self.translation_mm) - linear * c)
    }

    /// Rotation angle in degrees.
    pub fn rotation_magnitude_deg(&self) -> f64 {
        Vector3::from(self.rotation_deg).norm()
    }

    /// Packs the 12 free values (rotation, translation, log scale, shear)
    /// into a search vector; the center is fixed.
    pub fn to_vector(&self) -> [f64; 12] {
        let mut v = [0.0; 12];
        v[0..3].copy_from_slice(&self.rotation_deg);
        v[3..6].copy_from_slice(&self.translation_mm);
        v[6..9].copy_from_slice(&self.log_scale);
        v[9..12].copy_from_slice(&self.shear);
        v
    }

    pub fn from_vector(v: &[f64], center_mm: [f64; 3]) -> Self {
        AffineParams {
            rotation_deg: [v[0], v[1], v[2]],
            translation_mm: [v[3], v[4], v[5]],
            log_scale: [v[6], v[7], v[8]],
            shear: [v[9], v[10], v[11]],
            center_mm,
        }
    }
}
