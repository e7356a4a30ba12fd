use super::{Channel, ChannelLabel, Geometry, VoxelGrid};
use crate::error::{Error, Result};

/// Log clamp, relative to the PET maximum.
pub const DEFAULT_LOG_EPSILON: f64 = 1e-3;

/// Adds a `PET_PREPROCESSED` channel holding the gradient magnitude (mm⁻¹)
/// of `log(max(PET, floor))`.
///
/// Negative PET values are treated as 0, and `floor = epsilon * max(PET)`
/// (or `epsilon` itself for an all-zero PET). Tying the floor to the maximum
/// makes the output independent of the PET intensity scale.
pub fn preprocess_pet(grid: &VoxelGrid, epsilon: f64) -> Result<VoxelGrid> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "log epsilon must be positive, got {epsilon}"
        )));
    }
    let pet = grid.data(ChannelLabel::Pet)?;
    let max = pet.iter().fold(0.0f64, |m, &v| m.max(v as f64));
    let floor = if max > 0.0 { epsilon * max } else { epsilon };
    let logs: Vec<f64> = pet
        .iter()
        .map(|&v| (v as f64).max(0.0).max(floor).ln())
        .collect();
    let magnitude = gradient_magnitude(grid.geometry(), &logs);
    grid.clone()
        .with_channel(Channel::new(ChannelLabel::PetPreprocessed, magnitude))
}

/// Central differences inside, one-sided on the faces.
fn gradient_magnitude(g: &Geometry, f: &[f64]) -> Vec<f32> {
    let [nx, ny, nz] = g.dims;
    let strides = [1, nx, nx * ny];
    let mut out = vec![0f32; g.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = g.index(x, y, z);
                let mut sq = 0.0;
                for (axis, &pos) in [x, y, z].iter().enumerate() {
                    let n = g.dims[axis];
                    let s = strides[axis];
                    let h = g.spacing[axis];
                    let d = if pos == 0 {
                        (f[i + s] - f[i]) / h
                    } else if pos == n - 1 {
                        (f[i] - f[i - s]) / h
                    } else {
                        (f[i + s] - f[i - s]) / (2.0 * h)
                    };
                    sq += d * d;
                }
                out[i] = sq.sqrt() as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pet_grid(f: impl Fn(f64, f64, f64) -> f64, spacing: f64) -> VoxelGrid {
        let g = Geometry::new([8, 7, 6], [spacing; 3], [0.0; 3]).unwrap();
        VoxelGrid::from_fn(g, &[ChannelLabel::Pet], |_, p| f(p.x, p.y, p.z) as f32).unwrap()
    }

    #[test]
    fn constant_pet_has_zero_gradient() {
        let grid = pet_grid(|_, _, _| 3.0, 3.5);
        let out = preprocess_pet(&grid, DEFAULT_LOG_EPSILON).unwrap();
        assert!(out
            .data(ChannelLabel::PetPreprocessed)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(out.has_channel(ChannelLabel::Pet));
    }

    #[test]
    fn exp_ramp_gives_unit_gradient_inside() {
        let grid = pet_grid(|x, _, _| x.exp(), 0.5);
        let out = preprocess_pet(&grid, DEFAULT_LOG_EPSILON).unwrap();
        let g = *out.geometry();
        let data = out.data(ChannelLabel::PetPreprocessed).unwrap();
        for z in 1..5 {
            for y in 1..6 {
                for x in 1..7 {
                    let v = data[g.index(x, y, z)];
                    assert!((v - 1.0).abs() < 1e-4, "{v}");
                }
            }
        }
    }

    #[test]
    fn zeros_stay_finite() {
        let grid = pet_grid(|x, y, _| if x < 2.0 || y < 1.0 { 0.0 } else { -5.0 + x }, 1.0);
        let out = preprocess_pet(&grid, DEFAULT_LOG_EPSILON).unwrap();
        assert!(out
            .data(ChannelLabel::PetPreprocessed)
            .unwrap()
            .iter()
            .all(|v| v.is_finite()));
        let zero = pet_grid(|_, _, _| 0.0, 1.0);
        let out = preprocess_pet(&zero, DEFAULT_LOG_EPSILON).unwrap();
        assert!(out
            .data(ChannelLabel::PetPreprocessed)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn missing_pet_and_bad_epsilon() {
        let g = Geometry::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let ct = VoxelGrid::constant(g, &[ChannelLabel::Ct], 0.0).unwrap();
        assert!(matches!(
            preprocess_pet(&ct, 1e-3),
            Err(Error::MissingChannel(_))
        ));
        let pet = VoxelGrid::constant(g, &[ChannelLabel::Pet], 1.0).unwrap();
        assert!(preprocess_pet(&pet, 0.0).is_err());
    }
}
