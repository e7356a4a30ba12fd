//! Dual-channel scan volumes in physical (mm) coordinates.
//!
//! Voxel `v` has its center at `origin + (v + 0.5) * spacing`. Data is stored
//! x-fastest, then y, then z.

mod io;
mod nrrd;
mod preprocess;

use std::fmt;
use std::str::FromStr;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_volume, save_volume};
pub use nrrd::import_nrrd;
pub use preprocess::{preprocess_pet, DEFAULT_LOG_EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelLabel {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "PET")]
    Pet,
    #[serde(rename = "PET_PREPROCESSED")]
    PetPreprocessed,
}

impl ChannelLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelLabel::Ct => "CT",
            ChannelLabel::Pet => "PET",
            ChannelLabel::PetPreprocessed => "PET_PREPROCESSED",
        }
    }

    /// Background value used outside the grid: air for CT, no uptake for PET.
    pub fn default_fill(self) -> f32 {
        match self {
            ChannelLabel::Ct => -1000.0,
            ChannelLabel::Pet | ChannelLabel::PetPreprocessed => 0.0,
        }
    }
}

impl fmt::Display for ChannelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChannelLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CT" | "ct" => Ok(ChannelLabel::Ct),
            "PET" | "pet" => Ok(ChannelLabel::Pet),
            "PET_PREPROCESSED" | "pet_preprocessed" => Ok(ChannelLabel::PetPreprocessed),
            other => Err(Error::MissingChannel(other.to_string())),
        }
    }
}

/// Voxel lattice placement in world space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let geometry = Geometry {
            dims,
            spacing,
            origin,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n < 2) {
            return Err(Error::InvalidGrid(format!(
                "dims must all be >= 2, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// World position of a (possibly fractional) voxel index.
    pub fn voxel_to_world(&self, v: Vector3<f64>) -> Point3<f64> {
        Point3::new(
            self.origin[0] + (v.x + 0.5) * self.spacing[0],
            self.origin[1] + (v.y + 0.5) * self.spacing[1],
            self.origin[2] + (v.z + 0.5) * self.spacing[2],
        )
    }

    /// Continuous voxel index of a world point.
    pub fn world_to_voxel(&self, p: &Point3<f64>) -> Vector3<f64> {
        Vector3::new(
            (p.x - self.origin[0]) / self.spacing[0] - 0.5,
            (p.y - self.origin[1]) / self.spacing[1] - 0.5,
            (p.z - self.origin[2]) / self.spacing[2] - 0.5,
        )
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Point3<f64> {
        self.voxel_to_world(Vector3::new(x as f64, y as f64, z as f64))
    }

    /// Physical extent covered by the voxels, outer faces included.
    pub fn bounds(&self) -> (Point3<f64>, Point3<f64>) {
        let lo = Point3::from(self.origin);
        let hi = Point3::new(
            self.origin[0] + self.dims[0] as f64 * self.spacing[0],
            self.origin[1] + self.dims[1] as f64 * self.spacing[1],
            self.origin[2] + self.dims[2] as f64 * self.spacing[2],
        );
        (lo, hi)
    }

    pub fn center(&self) -> Point3<f64> {
        let (lo, hi) = self.bounds();
        nalgebra::center(&lo, &hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub label: ChannelLabel,
    pub data: Vec<f32>,
    /// Value returned when sampling outside the grid.
    pub fill: f32,
}

impl Channel {
    pub fn new(label: ChannelLabel, data: Vec<f32>) -> Self {
        Channel {
            label,
            data,
            fill: label.default_fill(),
        }
    }
}

/// A 3D scalar field with one or more co-registered channels.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    geometry: Geometry,
    channels: Vec<Channel>,
}

impl VoxelGrid {
    pub fn new(geometry: Geometry, channels: Vec<Channel>) -> Result<Self> {
        geometry.validate()?;
        let n = geometry.len();
        for (i, c) in channels.iter().enumerate() {
            if c.data.len() != n {
                return Err(Error::SizeMismatch {
                    expected: n,
                    found: c.data.len(),
                });
            }
            if channels[..i].iter().any(|o| o.label == c.label) {
                return Err(Error::InvalidGrid(format!("duplicate channel {}", c.label)));
            }
        }
        Ok(VoxelGrid { geometry, channels })
    }

    /// Grid with every channel set to a constant value.
    pub fn constant(geometry: Geometry, labels: &[ChannelLabel], value: f32) -> Result<Self> {
        let n = geometry.len();
        let channels = labels
            .iter()
            .map(|&l| Channel::new(l, vec![value; n]))
            .collect();
        VoxelGrid::new(geometry, channels)
    }

    /// Grid whose channels are filled from a function of the voxel center.
    pub fn from_fn<F>(geometry: Geometry, labels: &[ChannelLabel], f: F) -> Result<Self>
    where
        F: Fn(ChannelLabel, Point3<f64>) -> f32,
    {
        geometry.validate()?;
        let [nx, ny, nz] = geometry.dims;
        let channels = labels
            .iter()
            .map(|&label| {
                let mut data = Vec::with_capacity(geometry.len());
                for z in 0..nz {
                    for y in 0..ny {
                        for x in 0..nx {
                            data.push(f(label, geometry.voxel_center(x, y, z)));
                        }
                    }
                }
                Channel::new(label, data)
            })
            .collect();
        VoxelGrid::new(geometry, channels)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn labels(&self) -> Vec<ChannelLabel> {
        self.channels.iter().map(|c| c.label).collect()
    }

    pub fn has_channel(&self, label: ChannelLabel) -> bool {
        self.channels.iter().any(|c| c.label == label)
    }

    pub fn channel(&self, label: ChannelLabel) -> Result<&Channel> {
        self.channels
            .iter()
            .find(|c| c.label == label)
            .ok_or_else(|| Error::MissingChannel(label.to_string()))
    }

    pub fn data(&self, label: ChannelLabel) -> Result<&[f32]> {
        Ok(&self.channel(label)?.data)
    }

    /// Inserts a channel, replacing an existing one with the same label.
    pub fn with_channel(mut self, channel: Channel) -> Result<Self> {
        if channel.data.len() != self.geometry.len() {
            return Err(Error::SizeMismatch {
                expected: self.geometry.len(),
                found: channel.data.len(),
            });
        }
        match self.channels.iter_mut().find(|c| c.label == channel.label) {
            Some(slot) => *slot = channel,
            None => self.channels.push(channel),
        }
        Ok(self)
    }

    pub fn set_fill(&mut self, label: ChannelLabel, fill: f32) -> Result<()> {
        let channel = self
            .channels
            .iter_mut()
            .find(|c| c.label == label)
            .ok_or_else(|| Error::MissingChannel(label.to_string()))?;
        channel.fill = fill;
        Ok(())
    }

    /// Trilinear interpolation of the 8 voxels around `p`; the channel fill
    /// value outside the hull of voxel centers.
    pub fn trilinear_sample(&self, label: ChannelLabel, p: &Point3<f64>) -> Result<f32> {
        let channel = self.channel(label)?;
        Ok(trilinear(&self.geometry, &channel.data, channel.fill, p))
    }

    /// Copies the z plane `z_index` of a channel.
    pub fn extract_slice(
        &self,
        label: ChannelLabel,
        z_index: usize,
        window: (f32, f32),
    ) -> Result<SliceImage> {
        let [nx, ny, nz] = self.geometry.dims;
        if z_index >= nz {
            return Err(Error::IndexOutOfRange {
                index: z_index,
                limit: nz,
            });
        }
        let data = self.data(label)?;
        let start = z_index * nx * ny;
        Ok(SliceImage {
            index: z_index,
            width: nx,
            height: ny,
            values: data[start..start + nx * ny].to_vec(),
            window,
        })
    }
}

/// Trilinear sample of a raw x-fastest array.
pub(crate) fn trilinear(geometry: &Geometry, data: &[f32], fill: f32, p: &Point3<f64>) -> f32 {
    let u = geometry.world_to_voxel(p);
    let [nx, ny, nz] = geometry.dims;
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for (axis, (&coord, n)) in [u.x, u.y, u.z].iter().zip([nx, ny, nz]).enumerate() {
        let max = (n - 1) as f64;
        if !(coord >= 0.0 && coord <= max) {
            return fill;
        }
        let i = (coord.floor() as usize).min(n - 2);
        base[axis] = i;
        frac[axis] = coord - i as f64;
    }
    let [x0, y0, z0] = base;
    let [fx, fy, fz] = frac;
    let sx = 1;
    let sy = nx;
    let sz = nx * ny;
    let i000 = x0 + nx * (y0 + ny * z0);
    let v = |i: usize| data[i] as f64;
    let c00 = v(i000) * (1.0 - fx) + v(i000 + sx) * fx;
    let c10 = v(i000 + sy) * (1.0 - fx) + v(i000 + sy + sx) * fx;
    let c01 = v(i000 + sz) * (1.0 - fx) + v(i000 + sz + sx) * fx;
    let c11 = v(i000 + sz + sy) * (1.0 - fx) + v(i000 + sz + sy + sx) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    (c0 * (1.0 - fz) + c1 * fz) as f32
}

/// One axial plane of a channel, with the display window it was requested at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceImage {
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub window: (f32, f32),
}

impl SliceImage {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[x + self.width * y]
    }

    /// Maps values through the window to 8-bit gray levels.
    pub fn to_gray8(&self) -> Vec<u8> {
        let (lo, hi) = self.window;
        let span = (hi - lo).max(f32::EPSILON);
        self.values
            .iter()
            .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Voxel-wise difference `a - b` of one channel as a single-channel grid.
pub fn residual_image(a: &VoxelGrid, b: &VoxelGrid, label: ChannelLabel) -> Result<VoxelGrid> {
    if a.geometry != b.geometry {
        return Err(Error::GridMismatch(format!(
            "{:?} vs {:?}",
            a.geometry, b.geometry
        )));
    }
    let da = a.data(label)?;
    let db = b.data(label)?;
    let data = da.iter().zip(db).map(|(x, y)| x - y).collect();
    let mut channel = Channel::new(label, data);
    channel.fill = 0.0;
    VoxelGrid::new(a.geometry, vec![channel])
}
