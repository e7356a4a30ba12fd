use nalgebra::{DMatrix, Matrix3, Point3, Vector3};

use super::RegistrationConfig;
use crate::error::Result;
use crate::features::{
    extract_features, lcka, lcka_with_target, mean_diagonal_cosine, CellLayout, CenteredGram, FeatureConfig,
    FeatureMap, FieldStack,
};
use crate::volume::VoxelGrid;
use crate::warp::{warp_volume, Affine3, Transform};

/// `w_sim · (1 − mean co-located cosine) + w_lcka · (1 − lcka)`.
pub fn objective_from_features(warped: &FeatureMap, target: &FeatureMap, w_sim: f64, w_lcka: f64) -> Result<f64> {
    let mut value = 0.0;
    if w_sim != 0.0 {
        value += w_sim * (1.0 - mean_diagonal_cosine(warped, target)?);
    }
    if w_lcka != 0.0 {
        value += w_lcka * (1.0 - lcka(warped, target)?);
    }
    Ok(value)
}

/// Registration objective of `t`: warps `src` onto the grid of `tgt`, then
/// compares descriptor maps.
pub fn objective(src: &VoxelGrid, tgt: &VoxelGrid, t: &Transform, cfg: &RegistrationConfig) -> Result<f64> {
    let warped = warp_volume(src, t, tgt.geometry())?;
    let a = extract_features(&warped, &cfg.features)?;
    let b = extract_features(tgt, &cfg.features)?;
    objective_from_features(&a, &b, cfg.w_sim, cfg.w_lcka)
}

/// Objective evaluator that avoids re-warping the whole volume: the blurred
/// source fields are built once and sampled at backward-mapped positions
/// of the target pooling points.
///
/// Blurring before rather than after the warp makes this an approximation
/// of [`objective`], exact for rigid transforms up to interpolation.
pub struct FastObjective {
    stack: FieldStack,
    layout: CellLayout,
    points: Vec<Point3<f64>>,
    target: FeatureMap,
    target_gram: CenteredGram,
    w_sim: f64,
    w_lcka: f64,
}

impl FastObjective {
    pub fn new(src: &VoxelGrid, tgt: &VoxelGrid, features: &FeatureConfig, w_sim: f64, w_lcka: f64) -> Result<Self> {
        let layout = CellLayout::for_geometry(tgt.geometry(), features)?;
        let target = extract_features(tgt, features)?;
        let stack = FieldStack::new(src, features)?;
        Ok(FastObjective {
            target_gram: CenteredGram::new(&target),
            points: layout.sample_points(),
            stack,
            layout,
            target,
            w_sim,
            w_lcka,
        })
    }

    /// Target-space pooling positions.
    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn target(&self) -> &FeatureMap {
        &self.target
    }

    fn score(&self, warped: &FeatureMap) -> Result<f64> {
        let mut value = 0.0;
        if self.w_sim != 0.0 {
            value += self.w_sim * (1.0 - mean_diagonal_cosine(warped, &self.target)?);
        }
        if self.w_lcka != 0.0 {
            value += self.w_lcka * (1.0 - lcka_with_target(warped, &self.target_gram)?);
        }
        Ok(value)
    }

    /// Features of the source seen through the backward map `p(idx, q)`,
    /// with `jacobian` its derivative.
    pub fn features_with<F>(&self, backward: F, jacobian: &Matrix3<f64>) -> FeatureMap
    where
        F: Fn(usize, &Point3<f64>) -> Point3<f64> + Sync,
    {
        self.stack.pool(&self.layout, &self.points, backward, jacobian)
    }

    pub fn eval_with<F>(&self, backward: F, jacobian: &Matrix3<f64>) -> Result<f64>
    where
        F: Fn(usize, &Point3<f64>) -> Point3<f64> + Sync,
    {
        self.score(&self.features_with(backward, jacobian))
    }

    /// Objective of the affine map `a` (forward, source to target).
    pub fn eval_affine(&self, a: &Affine3) -> Result<f64> {
        let inv = a.invert()?;
        self.eval_with(|_, q| inv.apply(q), &inv.linear)
    }

    /// Objective when target point `i` pulls back to `affine_inv(u[i])`.
    pub fn eval_pulled(&self, affine_inv: &Affine3, u: &[Point3<f64>]) -> Result<f64> {
        self.eval_with(|i, _| affine_inv.apply(&u[i]), &affine_inv.linear)
    }

    /// As [`Self::eval_pulled`], with `u[i]` moved by `-delta · phi[(i, k)]`
    /// along `axis`.
    pub fn eval_pulled_moved(
        &self,
        affine_inv: &Affine3,
        u: &[Point3<f64>],
        phi: &DMatrix<f64>,
        k: usize,
        axis: usize,
        delta: f64,
    ) -> Result<f64> {
        let m = phi.nrows();
        let column = &phi.as_slice()[k * m..(k + 1) * m];
        let mut e = Vector3::zeros();
        e[axis] = 1.0;
        self.eval_with(|i, _| affine_inv.apply(&(u[i] - e * (delta * column[i]))), &affine_inv.linear)
    }
}
