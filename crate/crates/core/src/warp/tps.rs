//! 3D thin-plate splines with the biharmonic kernel `U(r) = r`.

use nalgebra::{DMatrix, Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::Affine3;
use crate::error::{Error, Result};

pub const INVERSE_MAX_ITERATIONS: usize = 50;
pub const INVERSE_TOLERANCE_MM: f64 = 1e-3;
const INVERSE_DAMPING: f64 = 0.5;

/// `p ↦ affine_part(p) + Σ wᵢ · |p − cᵢ|`.
///
/// Fitted weights satisfy `Σ wᵢ = 0` and `Σ wᵢ cᵢᵀ = 0`, so far from the
/// controls the map approaches its affine part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tps3 {
    #[serde(rename = "controls", with = "point_list")]
    pub control_points: Vec<Point3<f64>>,
    #[serde(with = "vector_list")]
    pub weights: Vec<Vector3<f64>>,
    pub affine_part: Affine3,
    pub lambda: f64,
}

impl Tps3 {
    #[inline]
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        self.affine_part.apply(p) + self.kernel_sum(p)
    }

    /// The non-affine part of the displacement at `p`.
    #[inline]
    pub fn kernel_sum(&self, p: &Point3<f64>) -> Vector3<f64> {
        let mut acc = Vector3::zeros();
        for (c, w) in self.control_points.iter().zip(&self.weights) {
            acc += w * (p - c).norm();
        }
        acc
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.norm_squared()).sum::<f64>().sqrt()
    }

    /// Solves `self(p) = target` by damped fixed-point iteration
    /// `p ← p − ½ (self(p) − target)`, starting from `start`.
    pub fn invert_point_from(&self, target: &Point3<f64>, start: Point3<f64>) -> Result<Point3<f64>> {
        let mut p = start;
        let mut residual = f64::INFINITY;
        for _ in 0..INVERSE_MAX_ITERATIONS {
            let r = self.apply(&p) - target;
            residual = r.norm();
            if residual <= INVERSE_TOLERANCE_MM {
                return Ok(p);
            }
            p -= r * INVERSE_DAMPING;
        }
        let r = (self.apply(&p) - target).norm();
        if r <= INVERSE_TOLERANCE_MM {
            return Ok(p);
        }
        Err(Error::InverseNonConvergent {
            residual_mm: r.min(residual),
            iterations: INVERSE_MAX_ITERATIONS,
        })
    }

    /// Inverse map of one point, starting the iteration at the target.
    pub fn invert_point(&self, target: &Point3<f64>) -> Result<Point3<f64>> {
        self.invert_point_from(target, *target)
    }

    /// Maximum violation of the weight side conditions.
    pub fn side_condition_error(&self) -> f64 {
        let mut sum = Vector3::zeros();
        let mut moment = Matrix3::zeros();
        for (c, w) in self.control_points.iter().zip(&self.weights) {
            sum += w;
            moment += w * c.coords.transpose();
        }
        sum.abs().max().max(moment.abs().max())
    }
}

pub fn tps_apply(t: &Tps3, p: &Point3<f64>) -> Point3<f64> {
    t.apply(p)
}

/// Fits the TPS sending `src[i]` to `dst[i]`.
///
/// `lambda > 0` trades interpolation for smoothness; as it grows the map
/// tends to the least-squares affine fit of the controls.
pub fn tps_fit(src: &[Point3<f64>], dst: &[Point3<f64>], lambda: f64) -> Result<Tps3> {
    if src.len() != dst.len() {
        return Err(Error::ControlMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    TpsSolver::new(src.to_vec(), lambda)?.solve(dst)
}

/// A factored TPS system for a fixed set of source controls. Fitting new
/// target positions is then a matrix-vector product.
#[derive(Debug, Clone)]
pub struct TpsSolver {
    controls: Vec<Point3<f64>>,
    lambda: f64,
    /// Inverse of the bordered system, restricted to its first N columns
    /// (the polynomial rows of the right-hand side are zero).
    inverse: DMatrix<f64>,
}

impl TpsSolver {
    pub fn new(controls: Vec<Point3<f64>>, lambda: f64) -> Result<Self> {
        let n = controls.len();
        if n < 4 {
            return Err(Error::DegenerateControls(format!("need at least 4 controls, got {n}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
        }
        check_spread(&controls)?;

        let size = n + 4;
        let mut system = DMatrix::<f64>::zeros(size, size);
        for i in 0..n {
            for j in 0..n {
                system[(i, j)] = (controls[i] - controls[j]).norm();
            }
            // U(r) = r is conditionally negative definite, so the bending
            // penalty enters the kernel block with a negative sign.
            system[(i, i)] -= lambda;
            let c = &controls[i];
            for (k, v) in [1.0, c.x, c.y, c.z].into_iter().enumerate() {
                system[(i, n + k)] = v;
                system[(n + k, i)] = v;
            }
        }
        let inverse = system
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::DegenerateControls("singular TPS system".into()))?;
        if inverse.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateControls("singular TPS system".into()));
        }
        let inverse = inverse.columns(0, n).into_owned();
        Ok(TpsSolver {
            controls,
            lambda,
            inverse,
        })
    }

    pub fn controls(&self) -> &[Point3<f64>] {
        &self.controls
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Values at `points` of the cardinal functions: column `k` is the map
    /// whose control `k` moves by one unit while the others stay fixed.
    /// Rows follow `points`.
    pub fn cardinal_matrix(&self, points: &[Point3<f64>]) -> DMatrix<f64> {
        let n = self.controls.len();
        let basis = DMatrix::from_fn(points.len(), n + 4, |i, j| {
            let p = &points[i];
            match j {
                j if j < n => (p - self.controls[j]).norm(),
                j if j == n => 1.0,
                j => p[j - n - 1],
            }
        });
        basis * &self.inverse
    }

    pub fn solve(&self, dst: &[Point3<f64>]) -> Result<Tps3> {
        let n = self.controls.len();
        if dst.len() != n {
            return Err(Error::ControlMismatch {
                src: n,
                dst: dst.len(),
            });
        }
        let rhs = DMatrix::from_fn(n, 3, |i, k| dst[i][k]);
        let sol = &self.inverse * rhs;
        let weights = (0..n)
            .map(|i| Vector3::new(sol[(i, 0)], sol[(i, 1)], sol[(i, 2)]))
            .collect();
        // Polynomial rows: constant, then the x, y, z coefficients.
        let translation = Vector3::new(sol[(n, 0)], sol[(n, 1)], sol[(n, 2)]);
        let linear = Matrix3::from_fn(|out, input| sol[(n + 1 + input, out)]);
        Ok(Tps3 {
            control_points: self.controls.clone(),
            weights,
            affine_part: Affine3::new(linear, translation),
            lambda: self.lambda,
        })
    }
}

fn check_spread(controls: &[Point3<f64>]) -> Result<()> {
    let n = controls.len() as f64;
    let mean = controls.iter().fold(Vector3::zeros(), |a, c| a + c.coords) / n;
    let mut scatter = Matrix3::zeros();
    for c in controls {
        let d = c.coords - mean;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigenvalues();
    let hi = eig.max();
    let lo = eig.min();
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return Err(Error::DegenerateControls("controls are coplanar".into()));
    }
    Ok(())
}

/// Regular `gx × gy × gz` lattice spanning `[lo, hi]`, x fastest.
pub fn lattice(lo: &Point3<f64>, hi: &Point3<f64>, dims: [usize; 3]) -> Vec<Point3<f64>> {
    let coord = |axis: usize, i: usize| {
        if dims[axis] <= 1 {
            0.5 * (lo[axis] + hi[axis])
        } else {
            lo[axis] + (hi[axis] - lo[axis]) * i as f64 / (dims[axis] - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out.push(Point3::new(coord(0, i), coord(1, j), coord(2, k)));
            }
        }
    }
    out
}

mod point_list {
    use nalgebra::Point3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Point3<f64>], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Point3<f64>>, D::Error> {
        Ok(Vec::<[f64; 3]>::deserialize(d)?.into_iter().map(Point3::from).collect())
    }
}

mod vector_list {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vector3<f64>], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector3<f64>>, D::Error> {
        Ok(Vec::<[f64; 3]>::deserialize(d)?.into_iter().map(Vector3::from).collect())
    }
}
