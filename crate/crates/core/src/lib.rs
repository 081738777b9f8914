//! Multiview 2D/3D rigid registration by tracking points of interest (POIs)
//! from DRRs into X-ray images and triangulating them.
//!
//! The pipeline, given a CT-like voxel volume and X-rays from two or more
//! calibrated views:
//!
//! 1. render a DRR per view at the current pose and project the 3D POIs into it
//!    ([`volume`]);
//! 2. track every projected POI into the X-ray of the same view with a Siamese
//!    feature network and POI convolution ([`tracknet`]);
//! 3. triangulate each tracked POI back to 3D ([`triangulate`]);
//! 4. align the CT POIs with the triangulated patient POIs ([`align`]).
//!
//! [`phantom`] synthesizes volumes and test cases, [`pipeline`] ties the steps
//! into registration, training and evaluation, and [`io`] holds the file
//! formats.

pub mod align;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod imaging;
pub mod io;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod tracknet;
pub mod triangulate;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{ImagingGeometry, RigidPose, RigidTransform, Vec2, Vec3, ViewPose};
pub use imaging::{Heatmap, Image};
pub use volume::VoxelVolume;

/// Configures the global rayon pool from `POINT2_THREADS` (unset or 0 = auto).
/// Has no effect if the pool was already built.
pub fn init_thread_pool() {
    let threads = std::env::var("POINT2_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
}
