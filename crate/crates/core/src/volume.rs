//! Voxel volumes, trilinear sampling and DRR rendering by ray marching.
//!
//! The volume frame has its origin at the volume center; at the identity pose
//! it coincides with the isocenter. A DRR pixel holds the line integral of the
//! density along the segment from the X-ray source to that detector point,
//! evaluated in the volume frame through `(T_view ∘ T)⁻¹`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    detector_px_to_mm, project_point, ImagingGeometry, RigidPose, RigidTransform, Vec2, Vec3,
    ViewPose,
};
use crate::imaging::Image;

/// Scalar density grid stored x-fastest: `data[x + nx * (y + ny * z)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelVolume {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub data: Vec<f32>,
}

impl VoxelVolume {
    pub fn zeros(dims: [usize; 3], spacing_mm: f64) -> Self {
        Self {
            dims,
            spacing_mm,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_data(dims: [usize; 3], spacing_mm: f64, data: Vec<f32>) -> Result<Self> {
        let vol = Self {
            dims,
            spacing_mm,
            data,
        };
        vol.validate()?;
        Ok(vol)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n < 1) {
            return Err(Error::validation("volume.dims", "each dimension must be >= 1"));
        }
        if !(self.spacing_mm.is_finite() && self.spacing_mm > 0.0) {
            return Err(Error::validation("volume.spacing_mm", "must be finite and > 0"));
        }
        if self.data.len() != self.dims.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "volume {:?} needs {} values, got {}",
                self.dims,
                self.dims.iter().product::<usize>(),
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation(
                "volume.data",
                "densities must be finite and >= 0",
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Physical position of a voxel center in the volume frame.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let c = |i: usize, n: usize| (i as f64 - (n as f64 - 1.0) / 2.0) * self.spacing_mm;
        Vec3::new(
            c(x, self.dims[0]),
            c(y, self.dims[1]),
            c(z, self.dims[2]),
        )
    }

    /// Half extents of the bounding box (voxel edges).
    pub fn half_extent(&self) -> Vec3 {
        Vec3::new(
            self.dims[0] as f64,
            self.dims[1] as f64,
            self.dims[2] as f64,
        ) * (self.spacing_mm / 2.0)
    }

    pub fn bounding_radius(&self) -> f64 {
        self.half_extent().norm()
    }

    pub fn max_density(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    pub fn scaled(&self, alpha: f32) -> Self {
        Self {
            data: self.data.iter().map(|v| v * alpha).collect(),
            ..self.clone()
        }
    }
}

/// Trilinear interpolation of the 8 voxels around `p` (volume frame, mm).
/// Voxels beyond the grid count as zero and anything outside the bounding box
/// samples to zero.
pub fn sample_trilinear(vol: &VoxelVolume, p: &Vec3) -> f64 {
    let mut u = [0.0f64; 3];
    for k in 0..3 {
        let n = vol.dims[k] as f64;
        u[k] = p[k] / vol.spacing_mm + (n - 1.0) / 2.0;
        if !(u[k] >= -0.5 && u[k] <= n - 0.5) {
            return 0.0;
        }
    }
    let base = u.map(|v| v.floor());
    let frac = [u[0] - base[0], u[1] - base[1], u[2] - base[2]];
    let base = base.map(|v| v as i64);
    let fetch = |x: i64, y: i64, z: i64| -> f64 {
        if x < 0
            || y < 0
            || z < 0
            || x >= vol.dims[0] as i64
            || y >= vol.dims[1] as i64
            || z >= vol.dims[2] as i64
        {
            0.0
        } else {
            vol.get(x as usize, y as usize, z as usize) as f64
        }
    };
    let mut acc = 0.0;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
        if wz == 0.0 {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            if wy == 0.0 {
                continue;
            }
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                if wx == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * fetch(base[0] + dx, base[1] + dy, base[2] + dz);
            }
        }
    }
    acc
}

/// Ray-marching settings for the DRR line integral.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayIntegralConfig {
    pub step_mm: f64,
}

impl RayIntegralConfig {
    /// Half the voxel spacing.
    pub fn for_volume(vol: &VoxelVolume) -> Self {
        Self {
            step_mm: vol.spacing_mm / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_mm.is_finite() && self.step_mm > 0.0) {
            return Err(Error::validation("ray.step_mm", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Midpoint-rule integral of the density along the segment `from → to`,
/// restricted to the bounding sphere of the volume. The clipped chord is
/// split into `ceil(len / step)` equal sub-steps.
fn integrate_segment(vol: &VoxelVolume, from: &Vec3, to: &Vec3, step: f64) -> f64 {
    let seg = to - from;
    let len = seg.norm();
    if len == 0.0 {
        return 0.0;
    }
    let dir = seg / len;
    let radius = vol.bounding_radius();
    // |from + s dir|² = r²
    let b = from.dot(&dir);
    let c = from.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc <= 0.0 {
        return 0.0;
    }
    let root = disc.sqrt();
    let s0 = (-b - root).max(0.0);
    let s1 = (-b + root).min(len);
    if s1 <= s0 {
        return 0.0;
    }
    let n = ((s1 - s0) / step).ceil().max(1.0) as usize;
    let h = (s1 - s0) / n as f64;
    let mut acc = 0.0;
    for k in 0..n {
        let s = s0 + (k as f64 + 0.5) * h;
        acc += sample_trilinear(vol, &(from + dir * s));
    }
    acc * h
}

/// Renders a DRR of `vol` placed at `pose`, seen from `view`.
pub fn render_drr(
    vol: &VoxelVolume,
    pose: &RigidPose,
    view: &ViewPose,
    geom: &ImagingGeometry,
    cfg: &RayIntegralConfig,
) -> Result<Image> {
    let placement = view.to_transform().compose(&pose.to_transform());
    render_drr_placed(vol, &placement, geom, cfg)
}

/// Renders with the combined volume-to-view transform `T_view ∘ T` given
/// directly; the detector is the canonical one.
pub fn render_drr_placed(
    vol: &VoxelVolume,
    placement: &RigidTransform,
    geom: &ImagingGeometry,
    cfg: &RayIntegralConfig,
) -> Result<Image> {
    geom.validate()
        .map_err(|e| Error::InvalidGeometry(e.to_string()))?;
    cfg.validate()?;
    let to_volume = placement.inverse();
    let source = to_volume.apply(&geom.source_position());
    let (w, h) = (geom.width(), geom.height());
    let mut data = vec![0.0f32; w * h];
    data.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        for (col, px) in out.iter_mut().enumerate() {
            let mm = detector_px_to_mm(&Vec2::new(col as f64, row as f64), geom);
            let target = to_volume.apply(&geom.detector_point(&mm));
            *px = integrate_segment(vol, &source, &target, cfg.step_mm) as f32;
        }
    });
    Ok(Image {
        width: w,
        height: h,
        pixel_spacing_mm: geom.pixel_spacing_mm,
        data,
    })
}

/// Projects volume-frame POIs onto the detector (mm) for a volume at `pose`.
pub fn project_pois(
    pois: &[Vec3],
    pose: &RigidPose,
    view: &ViewPose,
    geom: &ImagingGeometry,
) -> Result<Vec<Vec2>> {
    let t = pose.to_transform();
    pois.iter()
        .enumerate()
        .map(|(i, p)| {
            project_point(&t.apply(p), view, geom).map_err(|e| match e {
                Error::DegenerateProjection { depth, .. } => {
                    Error::DegenerateProjection { index: i, depth }
                }
                other => other,
            })
        })
        .collect()
}
