//! Spatial transforms in world millimetres: affine maps, 3D thin-plate
//! splines, backward volume warping and random synthetic deformations.

mod affine;
mod random;
mod resample;
mod tps;

use std::fs;
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use affine::{affine_apply, affine_compose, affine_invert, Affine3, AffineParams};
pub use random::{random_affine_params, random_transform, DeformationConfig};
pub use resample::warp_volume;
pub use tps::{
    lattice, tps_apply, tps_fit, Tps3, TpsSolver, INVERSE_MAX_ITERATIONS, INVERSE_TOLERANCE_MM,
};

/// Anything that maps world points forward.
pub trait SpatialTransform: Sync {
    fn apply(&self, p: &Point3<f64>) -> Point3<f64>;
}

impl SpatialTransform for Affine3 {
    fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Affine3::apply(self, p)
    }
}

impl SpatialTransform for Tps3 {
    fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Tps3::apply(self, p)
    }
}

/// A global affine followed by an optional TPS: `p ↦ tps(affine(p))`.
///
/// Serialized as the transform file: `{"affine": {...}, "tps": {...}}`,
/// either part may be absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Transform {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine: Option<Affine3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tps: Option<Tps3>,
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            affine: Some(Affine3::identity()),
            tps: None,
        }
    }

    pub fn new(affine: Affine3, tps: Option<Tps3>) -> Self {
        Transform {
            affine: Some(affine),
            tps,
        }
    }

    pub fn affine_or_identity(&self) -> Affine3 {
        self.affine.unwrap_or_default()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let t: Transform =
            serde_json::from_str(&text).map_err(|e| Error::HeaderParse(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = &self.affine {
            if !a.is_finite() {
                return Err(Error::HeaderParse("non-finite affine entry".into()));
            }
        }
        if let Some(t) = &self.tps {
            if t.control_points.len() != t.weights.len() {
                return Err(Error::ControlMismatch {
                    src: t.control_points.len(),
                    dst: t.weights.len(),
                });
            }
        }
        Ok(())
    }

    /// Prepares the inverse mapping used by backward warping.
    pub fn inverse(&self) -> Result<InverseTransform<'_>> {
        let affine_inverse = match &self.affine {
            Some(a) => a.invert()?,
            None => Affine3::identity(),
        };
        let tps_start = match &self.tps {
            Some(t) => Some(t.affine_part.invert()?),
            None => None,
        };
        Ok(InverseTransform {
            affine_inverse,
            tps: self.tps.as_ref().zip(tps_start),
        })
    }
}

impl SpatialTransform for Transform {
    fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        let q = match &self.affine {
            Some(a) => a.apply(p),
            None => *p,
        };
        match &self.tps {
            Some(t) => t.apply(&q),
            None => q,
        }
    }
}

impl From<Affine3> for Transform {
    fn from(a: Affine3) -> Self {
        Transform::new(a, None)
    }
}

impl From<Tps3> for Transform {
    fn from(t: Tps3) -> Self {
        Transform {
            affine: None,
            tps: Some(t),
        }
    }
}

/// Inverse of a [`Transform`], with the affine inverse precomputed.
#[derive(Debug, Clone)]
pub struct InverseTransform<'a> {
    affine_inverse: Affine3,
    tps: Option<(&'a Tps3, Affine3)>,
}

impl InverseTransform<'_> {
    pub fn apply(&self, q: &Point3<f64>) -> Result<Point3<f64>> {
        let p = match self.tps {
            Some((tps, start)) => tps.invert_point_from(q, start.apply(q))?,
            None => *q,
        };
        Ok(self.affine_inverse.apply(&p))
    }
}
