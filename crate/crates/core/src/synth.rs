//! Reproducible dual-channel phantoms with analytic key curves, and
//! deformed scan pairs with a known answer.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keycurve::{fit_all, transform_points, AnnotationSet, CurveSet, KeyCurve, KeyPoint};
use crate::volume::{save_volume, Channel, ChannelLabel, Geometry, VoxelGrid};
use crate::warp::{random_transform, warp_volume, DeformationConfig, Transform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub seed: u64,
    /// Ellipsoidal CT structures inside the body.
    pub n_structures: usize,
    /// PET tubes, each carrying one key curve (2 to 4).
    pub n_tubes: usize,
    /// HU range of the CT structures.
    pub ct_range: [f64; 2],
    /// Peak uptake range of the PET tubes.
    pub pet_range: [f64; 2],
    /// Amplitude of the cross-visit multiplicative intensity jitter.
    pub perturbation: f64,
    /// Annotated slices per tube.
    pub points_per_curve: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 96],
            spacing_mm: 3.5,
            seed: 0,
            n_structures: 8,
            n_tubes: 3,
            ct_range: [-200.0, 900.0],
            pet_range: [4.0, 10.0],
            perturbation: 0.15,
            points_per_curve: 6,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims[0] < 32 || self.dims[1] < 32 || self.dims[2] < 64 {
            return Err(Error::InvalidConfig(format!("phantom dims {:?} below (32, 32, 64)", self.dims)));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return Err(Error::InvalidConfig("spacing must be positive".into()));
        }
        for r in [self.ct_range, self.pet_range] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return Err(Error::InvalidConfig(format!("invalid intensity range {r:?}")));
            }
        }
        if self.pet_range[0] <= 0.0 {
            return Err(Error::InvalidConfig("PET tube uptake must be positive".into()));
        }
        if !(2..=4).contains(&self.n_tubes) {
            return Err(Error::InvalidConfig("n_tubes must be in 2..=4".into()));
        }
        if !(0.0..1.0).contains(&self.perturbation) {
            return Err(Error::InvalidConfig("perturbation must be in [0, 1)".into()));
        }
        if self.points_per_curve < 3 {
            return Err(Error::InvalidConfig("points_per_curve must be >= 3".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, [self.spacing_mm; 3], [0.0; 3])
    }
}

/// A generated visit: volume, analytic centerlines and annotator clicks.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub grid: VoxelGrid,
    pub curves: CurveSet,
    pub annotations: AnnotationSet,
}

struct Structure {
    center: Vector3<f64>,
    /// Rows scaled by the inverse semi-axes, so `|m (p − c)| < 1` inside.
    shape: Matrix3<f64>,
    hu: f64,
    uptake: f64,
}

struct Tube {
    coeff_x: [f64; 3],
    coeff_y: [f64; 3],
    z_lo: f64,
    z_hi: f64,
    peak: f64,
    phase: f64,
}

const TUBE_SIGMA_MM: f64 = 4.0;
const EDGE_MM: f64 = 3.0;

fn smooth_inside(level: f64, scale_mm: f64) -> f64 {
    // level is |m (p - c)|; 1 on the surface.
    1.0 / (1.0 + ((level - 1.0) * scale_mm / EDGE_MM).exp())
}

fn quadratic_through(z: [f64; 3], v: [f64; 3]) -> [f64; 3] {
    // Lagrange form expanded into (a2, a1, a0).
    let mut c = [0.0; 3];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        let d = (z[i] - z[j]) * (z[i] - z[k]);
        let w = v[i] / d;
        c[0] += w;
        c[1] -= w * (z[j] + z[k]);
        c[2] += w * z[j] * z[k];
    }
    c
}

fn horner(c: &[f64; 3], z: f64) -> f64 {
    (c[0] * z + c[1]) * z + c[2]
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let g = spec.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = g.bounds();
    let extent = hi - lo;
    let center = g.center().coords;

    let body_axes = Vector3::new(0.42 * extent.x, 0.36 * extent.y, 0.47 * extent.z);
    let body_scale = body_axes.min();
    let body = Matrix3::from_diagonal(&body_axes.map(|a| 1.0 / a));

    let structures: Vec<Structure> = (0..spec.n_structures)
        .map(|_| {
            let offset = Vector3::new(
                rng.gen_range(-0.55..0.55) * body_axes.x,
                rng.gen_range(-0.55..0.55) * body_axes.y,
                rng.gen_range(-0.65..0.65) * body_axes.z,
            );
            let axes = Vector3::new(rng.gen_range(8.0..28.0), rng.gen_range(8.0..28.0), rng.gen_range(12.0..40.0));
            let rot = Rotation3::from_euler_angles(
                rng.gen_range(-PI..PI),
                rng.gen_range(-PI..PI),
                rng.gen_range(-PI..PI),
            );
            Structure {
                center: center + offset,
                shape: Matrix3::from_diagonal(&axes.map(|a| 1.0 / a)) * rot.matrix().transpose(),
                hu: rng.gen_range(spec.ct_range[0]..=spec.ct_range[1]),
                uptake: rng.gen_range(0.1..0.5),
            }
        })
        .collect();

    let ring = 0.45 * body_axes.x.min(body_axes.y);
    let start_angle = rng.gen_range(0.0..TAU);
    let tubes: Vec<Tube> = (0..spec.n_tubes)
        .map(|i| {
            let angle = start_angle + TAU * i as f64 / spec.n_tubes as f64;
            let base = Vector3::new(center.x + ring * angle.cos(), center.y + ring * angle.sin(), 0.0);
            let z_lo = lo.z + rng.gen_range(0.12..0.2) * extent.z;
            let z_hi = hi.z - rng.gen_range(0.12..0.2) * extent.z;
            let zs = [z_lo, 0.5 * (z_lo + z_hi), z_hi];
            let mut xs = [0.0; 3];
            let mut ys = [0.0; 3];
            for k in 0..3 {
                xs[k] = base.x + rng.gen_range(-0.2..0.2) * ring;
                ys[k] = base.y + rng.gen_range(-0.2..0.2) * ring;
            }
            Tube {
                coeff_x: quadratic_through(zs, xs),
                coeff_y: quadratic_through(zs, ys),
                z_lo,
                z_hi,
                peak: rng.gen_range(spec.pet_range[0]..=spec.pet_range[1]),
                phase: rng.gen_range(0.0..TAU),
            }
        })
        .collect();

    let grid = VoxelGrid::from_fn(g, &[ChannelLabel::Ct, ChannelLabel::Pet], |label, p| {
        let v = p.coords;
        let inside = smooth_inside((body * (v - center)).norm(), body_scale);
        match label {
            ChannelLabel::Ct => {
                let mut hu = -1000.0 + 1040.0 * inside;
                for s in &structures {
                    let l = (s.shape * (v - s.center)).norm();
                    let w = smooth_inside(l, 1.0 / s.shape.row(0).norm().max(1e-9)) * inside;
                    hu += w * (s.hu - 40.0);
                }
                hu as f32
            }
            _ => {
                let mut pet = inside * (1.0 + 0.3 * (TAU * v.z / extent.z).cos());
                for s in &structures {
                    let l = (s.shape * (v - s.center)).norm();
                    pet += s.uptake * inside / (1.0 + ((l - 1.0) * 4.0).exp());
                }
                for t in &tubes {
                    let taper = smooth_step((v.z - t.z_lo + 10.0) / 10.0) * smooth_step((t.z_hi + 10.0 - v.z) / 10.0);
                    if taper <= 0.0 {
                        continue;
                    }
                    let dx = v.x - horner(&t.coeff_x, v.z);
                    let dy = v.y - horner(&t.coeff_y, v.z);
                    let hot = 1.0 + 0.3 * (TAU * v.z / 60.0 + t.phase).sin();
                    pet += t.peak * hot * taper * (-(dx * dx + dy * dy) / (2.0 * TUBE_SIGMA_MM.powi(2))).exp();
                }
                pet as f32
            }
        }
    })?;

    let mut curves = CurveSet::new(format!("phantom-{}", spec.seed));
    let mut points = Vec::new();
    for (i, t) in tubes.iter().enumerate() {
        let id = format!("curve_{:02}", i + 1);
        let first = ((t.z_lo - g.origin[2]) / g.spacing[2]).ceil() as usize;
        let last = ((t.z_hi - g.origin[2]) / g.spacing[2] - 1.0).floor() as usize;
        let n = spec.points_per_curve;
        let mut zs = Vec::with_capacity(n);
        for k in 0..n {
            let slice = first + ((last - first) as f64 * k as f64 / (n - 1) as f64).round() as usize;
            let z = g.voxel_center(0, 0, slice).z;
            zs.push(z);
            points.push(KeyPoint {
                curve_id: id.clone(),
                x: horner(&t.coeff_x, z),
                y: horner(&t.coeff_y, z),
                z,
                source_slice_index: slice as i64,
            });
        }
        curves.insert(KeyCurve::exact(id, t.coeff_x, t.coeff_y, zs[0], zs[n - 1]));
    }
    Ok(Phantom {
        grid,
        curves,
        annotations: AnnotationSet {
            visit_id: format!("phantom-{}", spec.seed),
            points,
        },
    })
}

fn smooth_step(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smooth multiplicative field `1 + amplitude · s(p)` with `|s| ≤ 1`.
fn jitter_field(g: &Geometry, amplitude: f64, seed: u64) -> impl Fn(&Point3<f64>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = g.bounds();
    let extent = hi - lo;
    let waves: Vec<(Vector3<f64>, f64, f64)> = (0..3)
        .map(|_| {
            let k = Vector3::new(
                rng.gen_range(-1.0..1.0) * TAU / extent.x,
                rng.gen_range(-1.0..1.0) * TAU / extent.y,
                rng.gen_range(-1.0..1.0) * TAU / extent.z,
            );
            (k, rng.gen_range(0.0..TAU), rng.gen_range(0.5..1.0))
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.2).sum();
    move |p: &Point3<f64>| {
        let s: f64 = waves.iter().map(|(k, phase, a)| a * (k.dot(&p.coords) + phase).cos()).sum::<f64>() / total;
        1.0 + amplitude * s
    }
}

/// Applies the cross-visit intensity jitter: PET scales directly, CT scales
/// its attenuation above air so air stays at -1000 HU.
pub fn perturb_intensities(grid: &VoxelGrid, amplitude: f64, seed: u64) -> Result<VoxelGrid> {
    if !(0.0..1.0).contains(&amplitude) {
        return Err(Error::InvalidConfig("perturbation must be in [0, 1)".into()));
    }
    if amplitude == 0.0 {
        return Ok(grid.clone());
    }
    let g = *grid.geometry();
    let field = jitter_field(&g, amplitude, seed);
    let [nx, ny, nz] = g.dims;
    let mut m = Vec::with_capacity(g.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                m.push(field(&g.voxel_center(x, y, z)));
            }
        }
    }
    let channels = grid
        .channels()
        .iter()
        .map(|c| {
            let data = c
                .data
                .iter()
                .zip(&m)
                .map(|(&v, &f)| match c.label {
                    ChannelLabel::Ct => ((v as f64 + 1000.0) * f - 1000.0) as f32,
                    _ => (v as f64 * f) as f32,
                })
                .collect();
            Channel {
                label: c.label,
                data,
                fill: c.fill,
            }
        })
        .collect();
    VoxelGrid::new(g, channels)
}

/// A source/target pair with the deformation that relates them.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub src: VoxelGrid,
    pub tgt: VoxelGrid,
    pub transform: Transform,
    pub src_annotations: AnnotationSet,
    pub tgt_annotations: AnnotationSet,
    pub src_curves: CurveSet,
    pub tgt_curves: CurveSet,
}

impl SyntheticPair {
    /// Writes volumes, annotations, curves and the ground-truth transform.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_volume(&self.src, dir.join("src.vmeta"))?;
        save_volume(&self.tgt, dir.join("tgt.vmeta"))?;
        self.src_annotations.save(dir.join("src_points.json"))?;
        self.tgt_annotations.save(dir.join("tgt_points.json"))?;
        self.src_curves.save(dir.join("src_curves.json"))?;
        self.tgt_curves.save(dir.join("tgt_curves.json"))?;
        self.transform.save(dir.join("gt_transform.json"))
    }
}

/// Phantom pair under a random deformation drawn from `deform`.
pub fn make_pair(spec: &PhantomSpec, deform: &DeformationConfig, perturb: f64) -> Result<SyntheticPair> {
    let (affine, tps) = random_transform(deform)?;
    let seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ deform.seed.rotate_left(17);
    make_pair_with(spec, &Transform::new(affine, Some(tps)), perturb, seed)
}

/// Phantom pair under an explicit transform; `seed` drives the intensity jitter.
pub fn make_pair_with(spec: &PhantomSpec, transform: &Transform, perturb: f64, seed: u64) -> Result<SyntheticPair> {
    let phantom = make_phantom(spec)?;
    let g = *phantom.grid.geometry();
    let warped = warp_volume(&phantom.grid, transform, &g)?;
    let tgt = perturb_intensities(&warped, perturb, seed)?;

    let mut moved = transform_points(&phantom.annotations.points, transform);
    for p in &mut moved {
        p.source_slice_index = ((p.z - g.origin[2]) / g.spacing[2] - 0.5).round() as i64;
    }
    let src_annotations = AnnotationSet {
        visit_id: "src".into(),
        points: phantom.annotations.points,
    };
    let tgt_annotations = AnnotationSet {
        visit_id: "tgt".into(),
        points: moved,
    };
    Ok(SyntheticPair {
        src_curves: fit_all(&src_annotations)?,
        tgt_curves: fit_all(&tgt_annotations)?,
        src: phantom.grid,
        tgt,
        transform: transform.clone(),
        src_annotations,
        tgt_annotations,
    })
}

/// Contents of a `synth --spec` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub phantom: PhantomSpec,
    /// Defaults are centered on the phantom grid.
    pub deformation: Option<DeformationConfig>,
}

impl SynthSpec {
    pub fn build(&self) -> Result<SyntheticPair> {
        let g = self.phantom.geometry()?;
        let deform = match &self.deformation {
            Some(d) => d.clone(),
            None => DeformationConfig::default().fitted_to(&g),
        };
        make_pair(&self.phantom, &deform, self.phantom.perturbation)
    }
}
