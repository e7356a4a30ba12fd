use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lattice, tps_fit, Affine3, AffineParams, Tps3};
use crate::error::{Error, Result};
use crate::volume::Geometry;

/// Bounds for random synthetic deformations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformationConfig {
    pub max_rotation_deg: f64,
    pub max_translation_mm: f64,
    pub max_log_scale: f64,
    pub max_shear: f64,
    pub tps_grid: [usize; 3],
    pub max_tps_jitter_mm: f64,
    pub seed: u64,
    /// Rotation/scale center of the affine part.
    pub center_mm: [f64; 3],
    /// Box covered by the TPS control lattice.
    pub domain_min_mm: [f64; 3],
    pub domain_max_mm: [f64; 3],
}

impl Default for DeformationConfig {
    fn default() -> Self {
        DeformationConfig {
            max_rotation_deg: 10.0,
            max_translation_mm: 15.0,
            max_log_scale: 0.1,
            max_shear: 0.05,
            tps_grid: [4, 4, 4],
            max_tps_jitter_mm: 8.0,
            seed: 0,
            center_mm: [0.0; 3],
            domain_min_mm: [0.0; 3],
            domain_max_mm: [224.0, 224.0, 336.0],
        }
    }
}

impl DeformationConfig {
    /// No deformation at all.
    pub fn zero() -> Self {
        DeformationConfig {
            max_rotation_deg: 0.0,
            max_translation_mm: 0.0,
            max_log_scale: 0.0,
            max_shear: 0.0,
            max_tps_jitter_mm: 0.0,
            ..Default::default()
        }
    }

    /// Centers the affine part on the grid and spans the lattice over it.
    pub fn fitted_to(mut self, geometry: &Geometry) -> Self {
        let (lo, hi) = geometry.bounds();
        self.center_mm = geometry.center().into();
        self.domain_min_mm = lo.into();
        self.domain_max_mm = hi.into();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let maxima = [
            self.max_rotation_deg,
            self.max_translation_mm,
            self.max_log_scale,
            self.max_shear,
            self.max_tps_jitter_mm,
        ];
        if maxima.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            return Err(Error::InvalidConfig("deformation maxima must be >= 0".into()));
        }
        if self.tps_grid.iter().any(|&g| g < 2) {
            return Err(Error::InvalidConfig("tps_grid dims must be >= 2".into()));
        }
        if (0..3).any(|k| !(self.domain_max_mm[k] > self.domain_min_mm[k])) {
            return Err(Error::InvalidConfig("empty lattice domain".into()));
        }
        Ok(())
    }
}

fn symmetric(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.gen_range(-max..=max)
    } else {
        0.0
    }
}

/// Draws the affine parameters of a random deformation.
pub fn random_affine_params(cfg: &DeformationConfig, rng: &mut ChaCha8Rng) -> AffineParams {
    // Uniform axis on the sphere, angle uniform in [-max, max].
    let cos_theta: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let sin_theta = (1.0 - cos_theta * cos_theta).sqrt();
    let axis = Vector3::new(sin_theta * phi.cos(), sin_theta * phi.sin(), cos_theta);
    let angle = symmetric(rng, cfg.max_rotation_deg);
    let mut draw3 = |max: f64| [symmetric(rng, max), symmetric(rng, max), symmetric(rng, max)];
    let translation_mm = draw3(cfg.max_translation_mm);
    let log_scale = draw3(cfg.max_log_scale);
    let shear = draw3(cfg.max_shear);
    AffineParams {
        rotation_deg: (axis * angle).into(),
        log_scale,
        shear,
        translation_mm,
        center_mm: cfg.center_mm,
    }
}

/// Seed-deterministic random affine and lattice TPS.
///
/// The TPS sends a regular lattice over the configured domain to the same
/// lattice with independent uniform jitter per axis.
pub fn random_transform(cfg: &DeformationConfig) -> Result<(Affine3, Tps3)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let affine = random_affine_params(cfg, &mut rng).to_affine();
    let src = lattice(
        &Point3::from(cfg.domain_min_mm),
        &Point3::from(cfg.domain_max_mm),
        cfg.tps_grid,
    );
    let jitter = cfg.max_tps_jitter_mm;
    let dst: Vec<Point3<f64>> = src
        .iter()
        .map(|p| {
            let d = Vector3::new(
                symmetric(&mut rng, jitter),
                symmetric(&mut rng, jitter),
                symmetric(&mut rng, jitter),
            );
            p + d
        })
        .collect();
    let tps = tps_fit(&src, &dst, 0.0)?;
    Ok((affine, tps))
}
