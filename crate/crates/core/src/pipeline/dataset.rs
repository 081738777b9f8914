//! Synthetic train/test corpora: phantoms, POIs, landmarks and cases.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{detector_mm_to_px, ImagingGeometry, RigidPose, Vec2, Vec3, ViewPose};
use crate::imaging::Image;
use crate::phantom::{
    make_case, make_phantom, sample_offset, select_pois, CaseSpec, OffsetRange, PhantomSpec,
    PoiStrategy, DEFAULT_SUPPORT_THRESHOLD,
};
use crate::rng;
use crate::volume::{render_drr, RayIntegralConfig, VoxelVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_volumes: usize,
    /// The last `n_test_volumes` volumes are held out for testing.
    pub n_test_volumes: usize,
    pub cases_per_train_volume: usize,
    pub cases_per_test_volume: usize,
    /// Template; the seed is replaced per volume.
    pub phantom: PhantomSpec,
    pub geometry: ImagingGeometry,
    pub views: Vec<ViewPose>,
    pub pois_per_volume: usize,
    pub landmarks_per_volume: usize,
    pub poi_margin_mm: f64,
    pub poi_threshold: f64,
    pub offsets: OffsetRange,
    pub noise_sigma: f64,
    /// Gamma drawn uniformly from `[1 − g, 1 + g]` per case when set.
    pub gamma_jitter: Option<f64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_volumes: 20,
            n_test_volumes: 5,
            cases_per_train_volume: 4,
            cases_per_test_volume: 10,
            phantom: PhantomSpec::default(),
            geometry: ImagingGeometry::desk(),
            views: vec![ViewPose::anterior_posterior(), ViewPose::lateral()],
            pois_per_volume: 32,
            landmarks_per_volume: 16,
            poi_margin_mm: 16.0,
            poi_threshold: DEFAULT_SUPPORT_THRESHOLD,
            offsets: OffsetRange::default(),
            noise_sigma: 0.01,
            gamma_jitter: None,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::validation(format!("dataset.{f}"), m));
        if self.n_volumes == 0 {
            return bad("n_volumes", "must be >= 1");
        }
        if self.n_test_volumes > self.n_volumes {
            return bad("n_test_volumes", "must be <= n_volumes");
        }
        if self.views.len() < 2 {
            return bad("views", "need >= 2 views");
        }
        if self.pois_per_volume < 3 {
            return bad("pois_per_volume", "must be >= 3");
        }
        if self.landmarks_per_volume < 3 {
            return bad("landmarks_per_volume", "must be >= 3");
        }
        if !(self.poi_margin_mm.is_finite() && self.poi_margin_mm >= 0.0) {
            return bad("poi_margin_mm", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.poi_threshold) {
            return bad("poi_threshold", "must be in [0, 1)");
        }
        let o = &self.offsets;
        if !(o.max_rotation_deg >= 0.0 && o.max_rotation_deg.is_finite()) {
            return bad("offsets.max_rotation_deg", "must be finite and >= 0");
        }
        if !(o.max_translation_mm >= 0.0 && o.max_translation_mm.is_finite()) {
            return bad("offsets.max_translation_mm", "must be finite and >= 0");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma", "must be finite and >= 0");
        }
        if let Some(g) = self.gamma_jitter {
            if !(0.0..1.0).contains(&g) {
                return bad("gamma_jitter", "must be in [0, 1)");
            }
        }
        self.geometry.validate()?;
        self.phantom.validate()
    }

    pub fn volume_spec(&self, index: usize) -> PhantomSpec {
        PhantomSpec {
            rng_seed: rand::Rng::random(&mut rng::stream(self.seed, index as u64)),
            ..self.phantom.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetCase {
    pub id: String,
    pub volume: usize,
    pub gt_pose: RigidPose,
    pub initial_pose: RigidPose,
    pub xrays: Vec<Image>,
    /// Ground-truth pixel positions per view, per POI of the volume.
    pub gt_pois_px: Vec<Vec<Vec2>>,
    pub gt_pois_3d: Vec<Vec3>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub volumes: Vec<VoxelVolume>,
    pub pois: Vec<Vec<Vec3>>,
    pub landmarks: Vec<Vec<Vec3>>,
    /// DRR of each volume at the identity pose, per view.
    pub drrs: Vec<Vec<Image>>,
    pub cases: Vec<DatasetCase>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn ray_config(&self, volume: usize) -> RayIntegralConfig {
        RayIntegralConfig::for_volume(&self.volumes[volume])
    }

    /// DRR POI pixel positions of a volume at the identity pose.
    pub fn drr_pois_px(&self, volume: usize, view: usize) -> Result<Vec<Vec2>> {
        let g = &self.config.geometry;
        Ok(crate::volume::project_pois(
            &self.pois[volume],
            &RigidPose::identity(),
            &self.config.views[view],
            g,
        )?
        .iter()
        .map(|p| detector_mm_to_px(p, g))
        .collect())
    }
}

/// Builds the whole corpus; a pure function of the configuration.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let volumes = (0..cfg.n_volumes)
        .map(|i| make_phantom(&cfg.volume_spec(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut pois = Vec::with_capacity(volumes.len());
    let mut landmarks = Vec::with_capacity(volumes.len());
    for (i, v) in volumes.iter().enumerate() {
        let mut r = rng::substream(cfg.seed, i as u64, 1);
        let seeds: [u64; 2] = [rand::Rng::random(&mut r), rand::Rng::random(&mut r)];
        pois.push(select_pois(
            v,
            &PoiStrategy::Random,
            cfg.pois_per_volume,
            cfg.poi_margin_mm,
            cfg.poi_threshold,
            seeds[0],
        )?);
        landmarks.push(select_pois(
            v,
            &PoiStrategy::Random,
            cfg.landmarks_per_volume,
            cfg.poi_margin_mm,
            cfg.poi_threshold,
            seeds[1],
        )?);
    }
    let drrs = volumes
        .iter()
        .map(|v| {
            cfg.views
                .iter()
                .map(|view| {
                    render_drr(
                        v,
                        &RigidPose::identity(),
                        view,
                        &cfg.geometry,
                        &RayIntegralConfig::for_volume(v),
                    )
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let n_train_vol = cfg.n_volumes - cfg.n_test_volumes;
    let mut plan = Vec::new();
    for vi in 0..cfg.n_volumes {
        let per = if vi < n_train_vol {
            cfg.cases_per_train_volume
        } else {
            cfg.cases_per_test_volume
        };
        for k in 0..per {
            plan.push((vi, k));
        }
    }
    let cases = plan
        .par_iter()
        .enumerate()
        .map(|(ci, &(vi, k))| {
            let mut r = rng::substream(cfg.seed, ci as u64, 2);
            let gt_pose = sample_offset(&mut r, &cfg.offsets);
            let gamma = cfg
                .gamma_jitter
                .map(|g| if g > 0.0 { rand::Rng::random_range(&mut r, 1.0 - g..=1.0 + g) } else { 1.0 });
            let spec = CaseSpec {
                views: cfg.views.clone(),
                gt_pose,
                noise_sigma: cfg.noise_sigma,
                gamma,
                noise_seed: rand::Rng::random(&mut r),
            };
            let vol = &volumes[vi];
            let case = make_case(vol, &pois[vi], &spec, &cfg.geometry, &RayIntegralConfig::for_volume(vol))?;
            Ok(DatasetCase {
                id: format!("v{vi:03}-c{k:03}"),
                volume: vi,
                gt_pose,
                initial_pose: RigidPose::identity(),
                xrays: case.xrays,
                gt_pois_px: case
                    .gt_pois_mm
                    .iter()
                    .map(|view| view.iter().map(|p| detector_mm_to_px(p, &cfg.geometry)).collect())
                    .collect(),
                gt_pois_3d: case.gt_pois_3d,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, test) = (0..cases.len()).partition(|&i| cases[i].volume < n_train_vol);
    Ok(Dataset {
        config: cfg.clone(),
        volumes,
        pois,
        landmarks,
        drrs,
        cases,
        train,
        test,
    })
}
