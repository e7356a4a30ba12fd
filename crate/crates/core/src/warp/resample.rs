use rayon::prelude::*;

use super::{Affine3, Transform};
use crate::error::Result;
use crate::volume::{trilinear, Channel, Geometry, VoxelGrid};

/// Backward warping: every output voxel center `q` takes the value of
/// `grid` at `t⁻¹(q)`, or the channel fill value outside the grid.
pub fn warp_volume(grid: &VoxelGrid, t: &Transform, out: &Geometry) -> Result<VoxelGrid> {
    out.validate()?;
    let is_identity = t.tps.is_none() && t.affine_or_identity() == Affine3::identity();
    if is_identity && out == grid.geometry() {
        return Ok(grid.clone());
    }
    let inverse = t.inverse()?;
    let [nx, ny, nz] = out.dims;
    let src_geom = grid.geometry();
    let channels = grid.channels();

    let slices: Vec<Vec<Vec<f32>>> = (0..nz)
        .into_par_iter()
        .map(|z| -> Result<Vec<Vec<f32>>> {
            let mut planes = vec![Vec::with_capacity(nx * ny); channels.len()];
            for y in 0..ny {
                for x in 0..nx {
                    let p = inverse.apply(&out.voxel_center(x, y, z))?;
                    for (plane, c) in planes.iter_mut().zip(channels) {
                        plane.push(trilinear(src_geom, &c.data, c.fill, &p));
                    }
                }
            }
            Ok(planes)
        })
        .collect::<Result<_>>()?;

    let warped = channels
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let mut data = Vec::with_capacity(out.len());
            for planes in &slices {
                data.extend_from_slice(&planes[k]);
            }
            Channel {
                label: c.label,
                data,
                fill: c.fill,
            }
        })
        .collect();
    VoxelGrid::new(*out, warped)
}
