//! Registration of dataset cases and the tracking ablation grid.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{detector_mm_to_px, Vec2};
use crate::imaging::PreprocessConfig;
use crate::tracknet::{NetworkConfig, NetworkParams};
use crate::volume::project_pois;

use super::dataset::Dataset;
use super::metrics::mpd;
use super::register::{register, NetworkTracker, OracleTracker, RegisterInput, RegistrationRecord, Tracker};
use super::train::{train, TrainConfig};

/// Which tracker drives registration.
pub enum TrackerKind<'a> {
    Network {
        params: &'a [NetworkParams],
        preprocess: PreprocessConfig,
    },
    /// Ground-truth 2D positions of each case.
    Oracle,
}

/// Registers one case from its initial pose. Cases the pipeline cannot
/// register are recorded with the estimate left at the initial pose.
pub fn register_case(ds: &Dataset, case: usize, kind: &TrackerKind<'_>) -> Result<RegistrationRecord> {
    let c = &ds.cases[case];
    let input = RegisterInput {
        volume: &ds.volumes[c.volume],
        ct_pois: &ds.pois[c.volume],
        xrays: &c.xrays,
        views: &ds.config.views,
        geometry: &ds.config.geometry,
        ray: ds.ray_config(c.volume),
        current_pose: c.initial_pose,
    };
    let start = Instant::now();
    let result = match kind {
        TrackerKind::Network { params, preprocess } => register(
            &input,
            &NetworkTracker {
                params,
                preprocess: *preprocess,
            },
        ),
        TrackerKind::Oracle => register(
            &input,
            &OracleTracker {
                positions_px: c.gt_pois_px.clone(),
            },
        ),
    };
    let landmarks = &ds.landmarks[c.volume];
    match result {
        Ok(reg) => Ok(RegistrationRecord::new(
            c.id.clone(),
            &reg,
            c.gt_pose,
            c.initial_pose,
            landmarks,
            c.gt_pois_px.clone(),
        )),
        Err(Error::RegistrationFailed(_)) | Err(Error::DegenerateShape(_)) => Ok(RegistrationRecord::failed(
            c.id.clone(),
            c.gt_pose,
            c.initial_pose,
            landmarks,
            start.elapsed().as_secs_f64(),
        )),
        Err(e) => Err(e),
    }
}

/// Registers every listed case (in parallel, results in input order).
pub fn register_cases(ds: &Dataset, cases: &[usize], kind: &TrackerKind<'_>) -> Result<Vec<RegistrationRecord>> {
    cases.par_iter().map(|&c| register_case(ds, c, kind)).collect()
}

/// One configuration of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub kernel_radius: usize,
    /// `true`: random POIs; `false`: the volume's landmarks as provided POIs.
    pub random_pois: bool,
    pub use_weight: bool,
}

impl AblationConfig {
    pub fn label(&self) -> String {
        let side = 2 * self.kernel_radius + 1;
        format!(
            "{side}x{side} / {} / {}",
            if self.random_pois { "random" } else { "provided" },
            if self.use_weight { "weighted" } else { "unweighted" }
        )
    }
}

/// Full grid over `K ∈ {0, 1, 2}`, both POI strategies and both weight modes.
pub fn ablation_grid() -> Vec<AblationConfig> {
    let mut out = Vec::new();
    for random_pois in [true, false] {
        for use_weight in [false, true] {
            for kernel_radius in 0..=2 {
                out.push(AblationConfig {
                    kernel_radius,
                    random_pois,
                    use_weight,
                });
            }
        }
    }
    out
}

/// Tracked and true pixel positions of every test POI for one configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub config: AblationConfig,
    pub mpd_mm: f64,
    /// Per case, per view, per POI (failed POIs omitted pairwise).
    pub tracked_px: Vec<Vec<Vec<Vec2>>>,
    pub gt_px: Vec<Vec<Vec<Vec2>>>,
}

/// mPD over all tracked points of one result.
pub fn ablation_mpd(tracked: &[Vec<Vec<Vec2>>], gt: &[Vec<Vec<Vec2>>], pixel_spacing_mm: f64) -> Result<f64> {
    let flat = |v: &[Vec<Vec<Vec2>>]| v.iter().flatten().flatten().copied().collect::<Vec<_>>();
    mpd(&flat(tracked), &flat(gt), pixel_spacing_mm)
}

/// Trains stage 1 only (tracking) for each grid entry and measures mPD on the
/// test cases. With provided POIs the volume landmarks replace the random POIs.
pub fn ablation_run(ds: &Dataset, grid: &[AblationConfig], base: &TrainConfig) -> Result<Vec<AblationResult>> {
    let mut out = Vec::with_capacity(grid.len());
    for cfg in grid {
        let mut ds_cfg = ds.clone();
        if !cfg.random_pois {
            ds_cfg.pois = ds.landmarks.clone();
            for c in ds_cfg.cases.iter_mut() {
                let view_pts = ds_cfg
                    .config
                    .views
                    .iter()
                    .map(|v| {
                        project_pois(&ds_cfg.pois[c.volume], &c.gt_pose, v, &ds_cfg.config.geometry).map(|pts| {
                            pts.iter()
                                .map(|p| detector_mm_to_px(p, &ds_cfg.config.geometry))
                                .collect()
                        })
                    })
                    .collect::<Result<Vec<Vec<Vec2>>>>()?;
                c.gt_pois_px = view_pts;
                let t = c.gt_pose.to_transform();
                c.gt_pois_3d = ds_cfg.pois[c.volume].iter().map(|p| t.apply(p)).collect();
            }
        }
        let train_cfg = TrainConfig {
            stage2_epochs: 0,
            network: NetworkConfig {
                kernel_radius: cfg.kernel_radius,
                use_weight: cfg.use_weight,
                ..base.network
            },
            ..base.clone()
        };
        let trained = train(&ds_cfg, &train_cfg)?;
        let tracker = NetworkTracker {
            params: &trained.params,
            preprocess: train_cfg.preprocess,
        };
        let mut tracked_all = Vec::new();
        let mut gt_all = Vec::new();
        for &ci in &ds_cfg.test {
            let c = &ds_cfg.cases[ci];
            let mut tracked_views = Vec::new();
            let mut gt_views = Vec::new();
            for (i, _) in ds_cfg.config.views.iter().enumerate() {
                let drr_px = ds_cfg.drr_pois_px(c.volume, i)?;
                let found = tracker.track(i, &ds_cfg.drrs[c.volume][i], &c.xrays[i], &drr_px)?;
                let (mut t, mut g) = (Vec::new(), Vec::new());
                for (r, truth) in found.into_iter().zip(&c.gt_pois_px[i]) {
                    if let Ok(p) = r {
                        t.push(p);
                        g.push(*truth);
                    }
                }
                tracked_views.push(t);
                gt_views.push(g);
            }
            tracked_all.push(tracked_views);
            gt_all.push(gt_views);
        }
        let mpd_mm = ablation_mpd(&tracked_all, &gt_all, ds_cfg.config.geometry.pixel_spacing_mm)?;
        out.push(AblationResult {
            config: cfg.clone(),
            mpd_mm,
            tracked_px: tracked_all,
            gt_px: gt_all,
        });
    }
    Ok(out)
}
