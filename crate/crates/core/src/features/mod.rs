//! Deterministic multi-scale descriptors, similarity matrices and linear
//! centered kernel alignment.
//!
//! Each input channel is blurred at every configured scale; the blurred
//! field and its gradient are then pooled over a regular lattice of cubic
//! cells. Per cell, per channel and scale, the descriptor holds the mean and
//! standard deviation of the blurred value and the mean of the three
//! gradient components, so a map has `channels · scales · 5` columns.

mod lcka;
mod similarity;
mod smooth;

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ChannelLabel, Geometry, VoxelGrid};

pub use lcka::{lcka, lcka_with_target, CenteredGram};
pub use similarity::{mean_diagonal_cosine, similarity_matrix, SimilarityMatrix};

pub(crate) use smooth::{gaussian_blur, gradient};
#[cfg(test)]
use smooth::gaussian_kernel;

/// Descriptors per channel and scale: mean, std, and three gradient means.
pub const STATS_PER_SCALE: usize = 5;
/// Fields stored per channel and scale: blurred value and its gradient.
const FIELDS_PER_SCALE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub channels: Vec<ChannelLabel>,
    pub scales_mm: Vec<f64>,
    pub cell_mm: f64,
    /// Pooling samples per cell along each axis.
    pub samples_per_axis: usize,
    /// z-score every descriptor column over locations.
    pub standardize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            channels: vec![ChannelLabel::Ct, ChannelLabel::PetPreprocessed],
            scales_mm: vec![3.5, 7.0, 14.0],
            cell_mm: 14.0,
            samples_per_axis: 2,
            standardize: true,
        }
    }
}

impl FeatureConfig {
    pub fn n_columns(&self) -> usize {
        self.channels.len() * self.scales_mm.len() * STATS_PER_SCALE
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.scales_mm.is_empty() {
            return Err(Error::InvalidConfig("feature channels and scales must be non-empty".into()));
        }
        if self.scales_mm.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig("scales must be >= 0".into()));
        }
        if !(self.cell_mm > 0.0 && self.cell_mm.is_finite()) || self.samples_per_axis == 0 {
            return Err(Error::InvalidConfig("cell size and samples must be positive".into()));
        }
        Ok(())
    }
}

/// Descriptor field: one row per cell (x fastest), one column per descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub dims: [usize; 3],
    pub stride_mm: f64,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(dims: [usize; 3], stride_mm: f64, channels: usize, data: Vec<f64>) -> Result<Self> {
        let rows = dims.iter().product::<usize>();
        if channels == 0 {
            return Err(Error::InvalidConfig("feature map needs at least one channel".into()));
        }
        if data.len() != rows * channels {
            return Err(Error::SizeMismatch {
                expected: rows * channels,
                found: data.len(),
            });
        }
        Ok(FeatureMap {
            dims,
            stride_mm,
            channels,
            data,
        })
    }

    /// Unstructured map with `rows` locations laid out along x.
    pub fn from_rows(rows: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        FeatureMap::new([rows, 1, 1], 1.0, channels, data)
    }

    pub fn rows(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(j).step_by(self.channels).copied()
    }

    /// z-scores every column; constant columns become zero.
    pub fn standardize(&mut self) {
        let n = self.rows() as f64;
        let c = self.channels;
        let mut mean = vec![0.0; c];
        for row in self.data.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for row in self.data.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n).sqrt();
                if sd > 1e-9 * (1.0 + m.abs()) {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();
        for row in self.data.chunks_mut(c) {
            for ((v, m), k) in row.iter_mut().zip(&mean).zip(&scale) {
                *v = (*v - m) * k;
            }
        }
    }

    /// Writes a `.vmeta`-style JSON header and a little-endian f32 payload
    /// (`rows × channels`, row-major) next to it.
    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("features");
        let file = format!("{stem}.raw");
        let raw_path = path.with_file_name(&file);
        let bytes: Vec<u8> = self.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
        let header = serde_json::json!({
            "dims": self.dims,
            "stride_mm": self.stride_mm,
            "channels": self.channels,
            "rows": self.rows(),
            "file": file,
        });
        fs::write(path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(path, e))
    }
}

/// Cubic pooling cells tiling a grid from its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct CellLayout {
    pub dims: [usize; 3],
    pub cell_mm: f64,
    pub origin: [f64; 3],
    pub samples_per_axis: usize,
}

impl CellLayout {
    pub fn for_geometry(g: &Geometry, cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let max_spacing = g.spacing.iter().cloned().fold(0.0, f64::max);
        if cfg.cell_mm < max_spacing {
            return Err(Error::InvalidConfig(format!(
                "cell_mm {} is smaller than the voxel spacing {max_spacing}",
                cfg.cell_mm
            )));
        }
        let mut dims = [0usize; 3];
        for axis in 0..3 {
            let extent = g.dims[axis] as f64 * g.spacing[axis];
            dims[axis] = (extent / cfg.cell_mm + 1e-9).floor() as usize;
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::EmptyGrid(format!(
                "grid {:?} holds no {} mm cell",
                g.dims, cfg.cell_mm
            )));
        }
        Ok(CellLayout {
            dims,
            cell_mm: cfg.cell_mm,
            origin: g.origin,
            samples_per_axis: cfg.samples_per_axis,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn samples_per_cell(&self) -> usize {
        self.samples_per_axis.pow(3)
    }

    /// All pooling sample positions, cell by cell (cells x fastest).
    pub fn sample_points(&self) -> Vec<Point3<f64>> {
        let s = self.samples_per_axis;
        let step = self.cell_mm / s as f64;
        let mut out = Vec::with_capacity(self.n_cells() * self.samples_per_cell());
        for cz in 0..self.dims[2] {
            for cy in 0..self.dims[1] {
                for cx in 0..self.dims[0] {
                    let corner = [
                        self.origin[0] + cx as f64 * self.cell_mm,
                        self.origin[1] + cy as f64 * self.cell_mm,
                        self.origin[2] + cz as f64 * self.cell_mm,
                    ];
                    for k in 0..s {
                        for j in 0..s {
                            for i in 0..s {
                                out.push(Point3::new(
                                    corner[0] + (i as f64 + 0.5) * step,
                                    corner[1] + (j as f64 + 0.5) * step,
                                    corner[2] + (k as f64 + 0.5) * step,
                                ));
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Blurred fields and gradients of every (channel, scale) pair, interleaved
/// per voxel so one trilinear weight set serves all of them.
#[derive(Debug, Clone)]
pub struct FieldStack {
    geometry: Geometry,
    n_fields: usize,
    data: Vec<f32>,
    fill: Vec<f32>,
    cfg: FeatureConfig,
}

impl FieldStack {
    pub fn new(grid: &VoxelGrid, cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let g = *grid.geometry();
        let n_fields = cfg.channels.len() * cfg.scales_mm.len() * FIELDS_PER_SCALE;
        let mut fields: Vec<Vec<f64>> = Vec::with_capacity(n_fields);
        let mut fill = Vec::with_capacity(n_fields);
        for &label in &cfg.channels {
            let channel = grid.channel(label)?;
            let raw: Vec<f64> = channel.data.iter().map(|&v| v as f64).collect();
            let per_scale: Vec<Vec<Vec<f64>>> = cfg
                .scales_mm
                .par_iter()
                .map(|&sigma| {
                    let blurred = gaussian_blur(&g, &raw, sigma);
                    let [gx, gy, gz] = gradient(&g, &blurred);
                    vec![blurred, gx, gy, gz]
                })
                .collect();
            for set in per_scale {
                fields.extend(set);
                fill.extend([channel.fill, 0.0, 0.0, 0.0]);
            }
        }
        let n = g.len();
        let mut data = vec![0f32; n * n_fields];
        for (f, field) in fields.iter().enumerate() {
            for (v, &x) in field.iter().enumerate() {
                data[v * n_fields + f] = x as f32;
            }
        }
        Ok(FieldStack {
            geometry: g,
            n_fields,
            data,
            fill,
            cfg: cfg.clone(),
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn n_fields(&self) -> usize {
        self.n_fields
    }

    /// Trilinear sample of every field at `p`; fill values outside the grid.
    #[inline]
    pub fn sample_into(&self, p: &Point3<f64>, out: &mut [f64]) {
        let mut acc = vec![0f32; self.n_fields];
        self.sample_f32(p, &mut acc);
        for (o, a) in out.iter_mut().zip(&acc) {
            *o = *a as f64;
        }
    }

    #[inline]
    fn sample_f32(&self, p: &Point3<f64>, out: &mut [f32]) {
        let g = &self.geometry;
        let u = g.world_to_voxel(p);
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for axis in 0..3 {
            let n = g.dims[axis];
            let coord = u[axis];
            if !(coord >= 0.0 && coord <= (n - 1) as f64) {
                out.copy_from_slice(&self.fill);
                return;
            }
            let i = (coord.floor() as usize).min(n - 2);
            base[axis] = i;
            frac[axis] = coord - i as f64;
        }
        let [nx, ny, _] = g.dims;
        let [fx, fy, fz] = frac.map(|f| f as f32);
        let i000 = base[0] + nx * (base[1] + ny * base[2]);
        let corners = [
            (i000, (1.0 - fx) * (1.0 - fy) * (1.0 - fz)),
            (i000 + 1, fx * (1.0 - fy) * (1.0 - fz)),
            (i000 + nx, (1.0 - fx) * fy * (1.0 - fz)),
            (i000 + nx + 1, fx * fy * (1.0 - fz)),
            (i000 + nx * ny, (1.0 - fx) * (1.0 - fy) * fz),
            (i000 + nx * ny + 1, fx * (1.0 - fy) * fz),
            (i000 + nx * ny + nx, (1.0 - fx) * fy * fz),
            (i000 + nx * ny + nx + 1, fx * fy * fz),
        ];
        out.iter_mut().for_each(|o| *o = 0.0);
        let nf = self.n_fields;
        for (idx, w) in corners {
            let src = &self.data[idx * nf..(idx + 1) * nf];
            for (o, &v) in out.iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }

    /// Pools the stack over `layout` after mapping every sample position
    /// through `backward` (output space to stack space). Gradients are
    /// pulled back with `jacobian`, the derivative of `backward`.
    pub fn pool<F>(&self, layout: &CellLayout, points: &[Point3<f64>], backward: F, jacobian: &Matrix3<f64>) -> FeatureMap
    where
        F: Fn(usize, &Point3<f64>) -> Point3<f64> + Sync,
    {
        let per_cell = layout.samples_per_cell();
        let n_blocks = self.n_fields / FIELDS_PER_SCALE;
        let cols = n_blocks * STATS_PER_SCALE;
        let jt = jacobian.transpose();
        let identity_jacobian = *jacobian == Matrix3::identity();
        let mut data = vec![0.0; layout.n_cells() * cols];
        let scratch = || {
            (
                vec![0f32; self.n_fields],
                vec![0.0f64; self.n_fields],
                vec![0.0f64; n_blocks],
            )
        };
        data.par_chunks_mut(cols).enumerate().for_each_init(scratch, |(buf, sum, sum_sq), (cell, row)| {
            sum.iter_mut().for_each(|v| *v = 0.0);
            sum_sq.iter_mut().for_each(|v| *v = 0.0);
            for s in 0..per_cell {
                let idx = cell * per_cell + s;
                let p = backward(idx, &points[idx]);
                self.sample_f32(&p, buf);
                for b in 0..n_blocks {
                    let o = b * FIELDS_PER_SCALE;
                    let v = buf[o] as f64;
                    sum[o] += v;
                    sum_sq[b] += v * v;
                    let grad = Vector3::new(buf[o + 1] as f64, buf[o + 2] as f64, buf[o + 3] as f64);
                    if identity_jacobian {
                        sum[o + 1] += grad.x;
                        sum[o + 2] += grad.y;
                        sum[o + 3] += grad.z;
                    } else {
                        let g = jt * grad;
                        sum[o + 1] += g.x;
                        sum[o + 2] += g.y;
                        sum[o + 3] += g.z;
                    }
                }
            }
            let n = per_cell as f64;
            for b in 0..n_blocks {
                let o = b * FIELDS_PER_SCALE;
                let mean = sum[o] / n;
                let var = (sum_sq[b] / n - mean * mean).max(0.0);
                let r = b * STATS_PER_SCALE;
                row[r] = mean;
                row[r + 1] = var.sqrt();
                row[r + 2] = sum[o + 1] / n;
                row[r + 3] = sum[o + 2] / n;
                row[r + 4] = sum[o + 3] / n;
            }
        });
        let mut map = FeatureMap {
            dims: layout.dims,
            stride_mm: layout.cell_mm,
            channels: cols,
            data,
        };
        if self.cfg.standardize {
            map.standardize();
        }
        map
    }
}

/// Descriptor map of a grid on its own cell lattice.
pub fn extract_features(grid: &VoxelGrid, cfg: &FeatureConfig) -> Result<FeatureMap> {
    let layout = CellLayout::for_geometry(grid.geometry(), cfg)?;
    let stack = FieldStack::new(grid, cfg)?;
    let points = layout.sample_points();
    Ok(stack.pool(&layout, &points, |_, p| *p, &Matrix3::identity()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Channel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(seed: u64) -> VoxelGrid {
        let g = Geometry::new([10, 9, 8], [2.0, 2.0, 2.5], [1.0, -3.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..g.len()).map(|_| rng.gen_range(-100.0..100.0)).collect();
        VoxelGrid::new(g, vec![Channel::new(ChannelLabel::Ct, data)]).unwrap()
    }

    fn ct_cfg(scale: f64) -> FeatureConfig {
        FeatureConfig {
            channels: vec![ChannelLabel::Ct],
            scales_mm: vec![scale],
            cell_mm: 5.0,
            samples_per_axis: 2,
            standardize: false,
        }
    }

    #[test]
    fn constant_volume_features() {
        let g = Geometry::new([12, 12, 12], [3.5; 3], [0.0; 3]).unwrap();
        let grid = VoxelGrid::constant(g, &[ChannelLabel::Ct, ChannelLabel::PetPreprocessed], 7.0).unwrap();
        let mut cfg = FeatureConfig::default();
        cfg.standardize = false;
        let f = extract_features(&grid, &cfg).unwrap();
        assert_eq!(f.channels, 30);
        assert_eq!(f.dims, [3, 3, 3]);
        for r in 0..f.rows() {
            for (j, &v) in f.row(r).iter().enumerate() {
                if j % STATS_PER_SCALE == 0 {
                    assert!((v - 7.0).abs() < 1e-6);
                } else {
                    assert!(v.abs() < 1e-6);
                }
            }
        }
        cfg.standardize = true;
        let f = extract_features(&grid, &cfg).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic() {
        let grid = random_grid(2);
        let cfg = ct_cfg(3.0);
        assert_eq!(extract_features(&grid, &cfg).unwrap(), extract_features(&grid, &cfg).unwrap());
    }

    #[test]
    fn matches_direct_convolution() {
        let grid = random_grid(4);
        let g = *grid.geometry();
        let sigma = 3.0;
        let raw = grid.data(ChannelLabel::Ct).unwrap();

        // Non-separable 3D convolution with replicated edges.
        let taps: Vec<Vec<f64>> = (0..3).map(|a| gaussian_kernel(sigma / g.spacing[a])).collect();
        let mut blurred = vec![0.0f64; g.len()];
        let [nx, ny, nz] = g.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mut acc = 0.0;
                    let (rx, ry, rz) = (taps[0].len() / 2, taps[1].len() / 2, taps[2].len() / 2);
                    for (k, wz) in taps[2].iter().enumerate() {
                        let zz = (z as i64 + k as i64 - rz as i64).clamp(0, nz as i64 - 1) as usize;
                        for (j, wy) in taps[1].iter().enumerate() {
                            let yy = (y as i64 + j as i64 - ry as i64).clamp(0, ny as i64 - 1) as usize;
                            for (i, wx) in taps[0].iter().enumerate() {
                                let xx = (x as i64 + i as i64 - rx as i64).clamp(0, nx as i64 - 1) as usize;
                                acc += wx * wy * wz * raw[g.index(xx, yy, zz)] as f64;
                            }
                        }
                    }
                    blurred[g.index(x, y, z)] = acc;
                }
            }
        }
        let grads = gradient(&g, &blurred);
        let as_grid = |d: &[f64]| {
            VoxelGrid::new(g, vec![Channel::new(ChannelLabel::Ct, d.iter().map(|&v| v as f32).collect())]).unwrap()
        };
        let fields = [as_grid(&blurred), as_grid(&grads[0]), as_grid(&grads[1]), as_grid(&grads[2])];

        let cfg = ct_cfg(sigma);
        let layout = CellLayout::for_geometry(&g, &cfg).unwrap();
        let points = layout.sample_points();
        let f = extract_features(&grid, &cfg).unwrap();
        let per = layout.samples_per_cell();
        for cell in 0..layout.n_cells() {
            let pts = &points[cell * per..(cell + 1) * per];
            let vals: Vec<f64> = pts
                .iter()
                .map(|p| fields[0].trilinear_sample(ChannelLabel::Ct, p).unwrap() as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / per as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64).sqrt();
            let gm = |k: usize| {
                pts.iter()
                    .map(|p| fields[k].trilinear_sample(ChannelLabel::Ct, p).unwrap() as f64)
                    .sum::<f64>()
                    / per as f64
            };
            let want = [mean, sd, gm(1), gm(2), gm(3)];
            for (got, want) in f.row(cell).iter().zip(want) {
                assert!((got - want).abs() < 1e-5 * (1.0 + want.abs()), "{got} {want}");
            }
        }
    }

    #[test]
    fn error_paths() {
        let grid = random_grid(1);
        let cfg = FeatureConfig::default();
        assert!(matches!(extract_features(&grid, &cfg), Err(Error::MissingChannel(_))));
        let mut big = ct_cfg(1.0);
        big.cell_mm = 500.0;
        assert!(matches!(extract_features(&grid, &big), Err(Error::EmptyGrid(_))));
        let mut tiny = ct_cfg(1.0);
        tiny.cell_mm = 1.0;
        assert!(matches!(extract_features(&grid, &tiny), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn export_writes_header_and_payload() {
        let f = FeatureMap::from_rows(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        f.export(dir.path().join("feat.vmeta")).unwrap();
        let raw = fs::read(dir.path().join("feat.raw")).unwrap();
        assert_eq!(raw.len(), 24);
        assert_eq!(f32::from_le_bytes([raw[20], raw[21], raw[22], raw[23]]), 6.0);
        let header: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("feat.vmeta")).unwrap()).unwrap();
        assert_eq!(header["channels"], 2);
    }
}
