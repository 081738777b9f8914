//! Synthetic phantoms, POI selection and simulated registration cases.
//!
//! A phantom is a sum of soft-tissue ellipsoids, each carrying one thin
//! high-density structure (a rod or an ellipsoidal shell). Simulated X-rays
//! are DRRs at the ground-truth pose plus Gaussian noise.

use nalgebra::Matrix3;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_from_euler, ImagingGeometry, RigidPose, Vec2, Vec3, ViewPose};
use crate::imaging::Image;
use crate::rng;
use crate::volume::{project_pois, render_drr, RayIntegralConfig, VoxelVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    /// Number of soft-tissue blobs; each carries one bone-like structure.
    pub n_blobs: usize,
    /// Attenuation range of soft tissue (per mm).
    pub soft_density: [f64; 2],
    /// Attenuation range of bone-like structures; the upper end caps the volume.
    pub bone_density: [f64; 2],
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing_mm: 2.0,
            n_blobs: 10,
            soft_density: [0.005, 0.015],
            bone_density: [0.03, 0.06],
            rng_seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 4) {
            return Err(Error::validation("phantom.dims", "every dimension must be >= 4"));
        }
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            return Err(Error::validation("phantom.spacing_mm", "must be finite and > 0"));
        }
        for (field, r) in [
            ("phantom.soft_density", self.soft_density),
            ("phantom.bone_density", self.bone_density),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && 0.0 <= r[0] && r[0] <= r[1]) {
                return Err(Error::validation(field, "must satisfy 0 <= lo <= hi"));
            }
        }
        Ok(())
    }
}

/// Oriented ellipsoid, `(R (p − c)) / radii` has unit norm on the surface.
#[derive(Clone, Debug)]
struct Ellipsoid {
    center: Vec3,
    to_local: Matrix3<f64>,
    radii: Vec3,
}

impl Ellipsoid {
    /// Signed distance estimate in mm (negative inside).
    fn distance(&self, p: &Vec3) -> f64 {
        let q = self.to_local * (p - self.center);
        let r = q.component_div(&self.radii).norm();
        (r - 1.0) * self.radii.min()
    }
}

#[derive(Clone, Debug)]
enum Bone {
    Rod { a: Vec3, b: Vec3, radius: f64 },
    Shell { surface: Ellipsoid, half_thickness: f64 },
}

impl Bone {
    fn distance(&self, p: &Vec3) -> f64 {
        match self {
            Bone::Rod { a, b, radius } => {
                let ab = b - a;
                let s = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                (p - (a + ab * s)).norm() - radius
            }
            Bone::Shell {
                surface,
                half_thickness,
            } => surface.distance(p).abs() - half_thickness,
        }
    }
}

struct Blob {
    body: Ellipsoid,
    soft: f64,
    bone: Bone,
    bone_density: f64,
}

/// Smooth inside-indicator with a one-voxel transition at the surface.
fn occupancy(distance_mm: f64, spacing_mm: f64) -> f64 {
    (0.5 - distance_mm / spacing_mm).clamp(0.0, 1.0)
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn random_blob<R: Rng>(rng: &mut R, spec: &PhantomSpec, half: &Vec3) -> Blob {
    let scale = half.min();
    let radii = Vec3::from_fn(|_, _| rng.random_range(0.15..0.45) * scale);
    let center = Vec3::from_fn(|i, _| rng.random_range(-0.5..0.5) * half[i]);
    let angles = [0; 3].map(|_| rng.random_range(-180.0..180.0));
    let to_local = rotation_from_euler(angles).transpose();
    let body = Ellipsoid {
        center,
        to_local,
        radii,
    };
    let bone = if rng.random_bool(0.5) {
        let dir = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
        let len = rng.random_range(0.5..0.9) * radii.max();
        let offset = Vec3::from_fn(|i, _| rng.random_range(-0.3..0.3) * radii[i]);
        let mid = center + to_local.transpose() * offset;
        Bone::Rod {
            a: mid - dir * len,
            b: mid + dir * len,
            radius: rng.random_range(1.0..2.0) * spec.spacing_mm,
        }
    } else {
        Bone::Shell {
            surface: Ellipsoid {
                radii: radii * rng.random_range(0.4..0.8),
                ..body.clone()
            },
            half_thickness: rng.random_range(0.5..1.0) * spec.spacing_mm,
        }
    };
    Blob {
        body,
        soft: uniform(rng, spec.soft_density),
        bone,
        bone_density: uniform(rng, spec.bone_density),
    }
}

/// Deterministic random phantom; all-zero when `n_blobs == 0`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<VoxelVolume> {
    spec.validate()?;
    let mut vol = VoxelVolume::zeros(spec.dims, spec.spacing_mm);
    let half = vol.half_extent();
    let mut r = rng::stream(spec.rng_seed, 0);
    let blobs: Vec<Blob> = (0..spec.n_blobs)
        .map(|_| random_blob(&mut r, spec, &half))
        .collect();
    let cap = spec.bone_density[1].max(spec.soft_density[1]);
    let [nx, ny, _] = spec.dims;
    let geom = vol.clone();
    vol.data
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, slab)| {
            for y in 0..ny {
                for x in 0..nx {
                    if [x, y, z].iter().zip(&spec.dims).any(|(&i, &n)| i == 0 || i + 1 == n) {
                        continue;
                    }
                    let p = geom.voxel_center(x, y, z);
                    let mut v = 0.0;
                    for b in &blobs {
                        let inside = occupancy(b.body.distance(&p), spec.spacing_mm);
                        if inside > 0.0 {
                            v += inside * b.soft
                                + inside
                                    * occupancy(b.bone.distance(&p), spec.spacing_mm)
                                    * b.bone_density;
                        }
                    }
                    slab[y * nx + x] = v.clamp(0.0, cap) as f32;
                }
            }
        });
    Ok(vol)
}

/// How POIs are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "points")]
pub enum PoiStrategy {
    /// Uniformly among voxel centers of the support region.
    Random,
    /// A fixed list, e.g. hand-picked landmarks.
    Provided(Vec<Vec3>),
}

/// Fraction of the maximum density above which a voxel is support.
pub const DEFAULT_SUPPORT_THRESHOLD: f64 = 0.2;

/// Picks `m` POIs. Random POIs are distinct voxel centers whose density
/// exceeds `threshold × max` and whose distance to the volume boundary is at
/// least `margin_mm`. When fewer than `m` such voxels exist all are returned.
pub fn select_pois(
    vol: &VoxelVolume,
    strategy: &PoiStrategy,
    m: usize,
    margin_mm: f64,
    threshold: f64,
    rng_seed: u64,
) -> Result<Vec<Vec3>> {
    if m < 3 {
        return Err(Error::validation("poi_count", "must be >= 3"));
    }
    match strategy {
        PoiStrategy::Provided(points) => {
            if points.len() < 3 {
                return Err(Error::validation("pois", "need >= 3 provided points"));
            }
            Ok(points.iter().take(m).copied().collect())
        }
        PoiStrategy::Random => {
            let max = vol.max_density() as f64;
            let floor = threshold * max;
            let half = vol.half_extent();
            let [nx, ny, nz] = vol.dims;
            let mut candidates = Vec::new();
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        if (vol.get(x, y, z) as f64) <= floor || max <= 0.0 {
                            continue;
                        }
                        let p = vol.voxel_center(x, y, z);
                        if (0..3).all(|i| half[i] - p[i].abs() >= margin_mm) {
                            candidates.push(p);
                        }
                    }
                }
            }
            if candidates.is_empty() {
                return Err(Error::EmptySupport(floor));
            }
            let mut r = rng::stream(rng_seed, 1);
            let k = m.min(candidates.len());
            Ok(sample(&mut r, candidates.len(), k)
                .into_iter()
                .map(|i| candidates[i])
                .collect())
        }
    }
}

/// Offset sampler bounds: every Euler angle within `±max_rotation_deg`, every
/// translation component within `±max_translation_mm`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetRange {
    pub max_rotation_deg: f64,
    pub max_translation_mm: f64,
}

impl Default for OffsetRange {
    fn default() -> Self {
        Self {
            max_rotation_deg: 10.0,
            max_translation_mm: 20.0,
        }
    }
}

pub fn sample_offset<R: Rng>(rng: &mut R, range: &OffsetRange) -> RigidPose {
    let mut draw = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let theta = [0; 3].map(|_| draw(range.max_rotation_deg));
    let t = [0; 3].map(|_| draw(range.max_translation_mm));
    RigidPose::new(theta, t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub views: Vec<ViewPose>,
    pub gt_pose: RigidPose,
    /// Additive Gaussian noise, as a fraction of the clean image maximum.
    pub noise_sigma: f64,
    /// Optional global gamma applied to the normalized clean image.
    pub gamma: Option<f64>,
    pub noise_seed: u64,
}

impl CaseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views.len() < 2 {
            return Err(Error::validation("case.views", "need >= 2 views"));
        }
        if !self.gt_pose.is_finite() {
            return Err(Error::validation("case.gt_pose", "must be finite"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::validation("case.noise_sigma", "must be finite and >= 0"));
        }
        if let Some(g) = self.gamma {
            if !(g.is_finite() && g > 0.0) {
                return Err(Error::validation("case.gamma", "must be finite and > 0"));
            }
        }
        Ok(())
    }
}

/// A simulated registration problem.
#[derive(Clone, Debug)]
pub struct Case {
    pub xrays: Vec<Image>,
    pub gt_pose: RigidPose,
    /// Ground-truth detector positions (mm) of every POI in every view.
    pub gt_pois_mm: Vec<Vec<Vec2>>,
    /// POIs moved into the patient frame by the ground-truth pose.
    pub gt_pois_3d: Vec<Vec3>,
}

/// Simulated X-ray: clean DRR, optional gamma, then additive noise.
pub fn simulate_xray(clean: &Image, noise_sigma: f64, gamma: Option<f64>, seed: u64) -> Image {
    let max = clean.max() as f64;
    let mut out = clean.clone();
    if let (Some(g), true) = (gamma, max > 0.0) {
        for v in &mut out.data {
            *v = (max * (*v as f64 / max).max(0.0).powf(g)) as f32;
        }
    }
    let sigma = noise_sigma * max;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        let mut r = rng::stream(seed, 2);
        for v in &mut out.data {
            *v = (*v as f64 + normal.sample(&mut r)) as f32;
        }
    }
    out
}

pub fn make_case(
    vol: &VoxelVolume,
    pois: &[Vec3],
    spec: &CaseSpec,
    geom: &ImagingGeometry,
    cfg: &RayIntegralConfig,
) -> Result<Case> {
    spec.validate()?;
    let mut xrays = Vec::with_capacity(spec.views.len());
    let mut gt_pois_mm = Vec::with_capacity(spec.views.len());
    for (i, view) in spec.views.iter().enumerate() {
        let clean = render_drr(vol, &spec.gt_pose, view, geom, cfg)?;
        let seed = rng::substream(spec.noise_seed, i as u64, 0).random::<u64>();
        xrays.push(simulate_xray(&clean, spec.noise_sigma, spec.gamma, seed));
        gt_pois_mm.push(project_pois(pois, &spec.gt_pose, view, geom)?);
    }
    let t = spec.gt_pose.to_transform();
    Ok(Case {
        xrays,
        gt_pose: spec.gt_pose,
        gt_pois_mm,
        gt_pois_3d: pois.iter().map(|p| t.apply(p)).collect(),
    })
}
