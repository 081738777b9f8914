//! Single-pass registration: track POIs in every view, triangulate, align.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::align::procrustes_rigid;
use crate::error::{Error, Result};
use crate::geometry::{
    detector_mm_to_px, detector_px_to_mm, ImagingGeometry, RigidPose, Vec2, Vec3, ViewPose,
};
use crate::imaging::{preprocess, Image, PreprocessConfig};
use crate::tracknet::{track_view, NetworkParams};
use crate::triangulate::{build_system, triangulate};
use crate::volume::{project_pois, render_drr, RayIntegralConfig, VoxelVolume};

use super::metrics::{mtre, summarize, MetricsSummary};

/// Finds the X-ray position of each DRR POI in one view.
pub trait Tracker: Sync {
    /// One result per POI (pixels, `(col, row)`); a failed POI does not fail
    /// the view.
    fn track(
        &self,
        view: usize,
        drr: &Image,
        xray: &Image,
        drr_pois_px: &[Vec2],
    ) -> Result<Vec<Result<Vec2>>>;
}

/// The learned tracker: one network per view.
pub struct NetworkTracker<'a> {
    pub params: &'a [NetworkParams],
    pub preprocess: PreprocessConfig,
}

impl Tracker for NetworkTracker<'_> {
    fn track(
        &self,
        view: usize,
        drr: &Image,
        xray: &Image,
        drr_pois_px: &[Vec2],
    ) -> Result<Vec<Result<Vec2>>> {
        let params = self.params.get(view).ok_or_else(|| {
            Error::validation("params", format!("no network for view {view}"))
        })?;
        let drr = preprocess(drr, &self.preprocess)?;
        let xray = preprocess(xray, &self.preprocess)?;
        Ok(track_view(params, &drr, &xray, drr_pois_px)?
            .into_iter()
            .map(|t| t.position)
            .collect())
    }
}

/// Returns known positions, ignoring the images.
pub struct OracleTracker {
    /// Per view, per POI, in pixels.
    pub positions_px: Vec<Vec<Vec2>>,
}

impl Tracker for OracleTracker {
    fn track(&self, view: usize, _: &Image, _: &Image, pois: &[Vec2]) -> Result<Vec<Result<Vec2>>> {
        let p = &self.positions_px[view];
        if p.len() != pois.len() {
            return Err(Error::LengthMismatch(p.len(), pois.len()));
        }
        Ok(p.iter().map(|&v| Ok(v)).collect())
    }
}

pub struct RegisterInput<'a> {
    pub volume: &'a VoxelVolume,
    pub ct_pois: &'a [Vec3],
    pub xrays: &'a [Image],
    pub views: &'a [ViewPose],
    pub geometry: &'a ImagingGeometry,
    pub ray: RayIntegralConfig,
    pub current_pose: RigidPose,
}

#[derive(Clone, Debug)]
pub struct Registration {
    pub est_pose: RigidPose,
    /// Per view, per POI; `None` where tracking failed.
    pub tracked_px: Vec<Vec<Option<Vec2>>>,
    /// Per POI; `None` where the POI was dropped.
    pub triangulated: Vec<Option<Vec3>>,
    /// Number of poses at which DRRs were rendered.
    pub pose_evaluations: usize,
    pub time_s: f64,
}

/// Minimum number of POIs that must survive tracking.
pub const MIN_SURVIVORS: usize = 3;

/// One forward pass: DRRs at the current pose, tracking in every view,
/// per-POI triangulation and a rigid fit of CT POIs to triangulated POIs.
pub fn register(input: &RegisterInput<'_>, tracker: &dyn Tracker) -> Result<Registration> {
    let start = Instant::now();
    let n_views = input.views.len();
    if n_views < 2 {
        return Err(Error::validation("views", "need >= 2 views"));
    }
    if input.xrays.len() != n_views {
        return Err(Error::LengthMismatch(input.xrays.len(), n_views));
    }
    let geom = input.geometry;
    let mut pose_evaluations = 0;
    let drrs = input
        .views
        .iter()
        .map(|v| render_drr(input.volume, &input.current_pose, v, geom, &input.ray))
        .collect::<Result<Vec<_>>>()?;
    pose_evaluations += 1;

    let mut tracked_px = Vec::with_capacity(n_views);
    for (i, view) in input.views.iter().enumerate() {
        let pois_px: Vec<Vec2> = project_pois(input.ct_pois, &input.current_pose, view, geom)?
            .iter()
            .map(|p| detector_mm_to_px(p, geom))
            .collect();
        let found = tracker.track(i, &drrs[i], &input.xrays[i], &pois_px)?;
        if found.len() != pois_px.len() {
            return Err(Error::LengthMismatch(found.len(), pois_px.len()));
        }
        tracked_px.push(
            found
                .into_iter()
                .map(|r| match r {
                    Ok(p) => Ok(Some(p)),
                    Err(Error::DegenerateHeatmap(_)) | Err(Error::OutOfBounds { .. }) => Ok(None),
                    Err(e) => Err(e),
                })
                .collect::<Result<Vec<_>>>()?,
        );
    }

    let mut triangulated = Vec::with_capacity(input.ct_pois.len());
    let (mut src, mut dst) = (Vec::new(), Vec::new());
    for (j, ct) in input.ct_pois.iter().enumerate() {
        let obs: Option<Vec<Vec2>> = tracked_px
            .iter()
            .map(|v| v[j].map(|p| detector_px_to_mm(&p, geom)))
            .collect();
        let Some(obs) = obs else {
            triangulated.push(None);
            continue;
        };
        let x = build_system(&obs, input.views, geom)
            .and_then(|s| triangulate(&s))
            .map_err(|e| match e {
                Error::RankDeficient(r) => Error::RegistrationFailed(format!(
                    "triangulation is rank deficient (singular value ratio {r:.3e})"
                )),
                other => other,
            })?;
        triangulated.push(Some(x));
        src.push(*ct);
        dst.push(x);
    }
    if src.len() < MIN_SURVIVORS {
        return Err(Error::RegistrationFailed(format!(
            "{} of {} POIs survived tracking, need {MIN_SURVIVORS}",
            src.len(),
            input.ct_pois.len()
        )));
    }
    let est = procrustes_rigid(&src, &dst)?;
    Ok(Registration {
        est_pose: est.to_pose(),
        tracked_px,
        triangulated,
        pose_evaluations,
        time_s: start.elapsed().as_secs_f64(),
    })
}

/// Everything recorded about one registered case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub case_id: String,
    pub gt_pose: RigidPose,
    pub est_pose: RigidPose,
    pub initial_pose: RigidPose,
    pub tracked_px: Vec<Vec<Option<Vec2>>>,
    /// Ground-truth pixel positions, same layout as `tracked_px`.
    pub gt_px: Vec<Vec<Vec2>>,
    pub triangulated: Vec<Option<Vec3>>,
    pub mtre_initial: f64,
    pub mtre_final: f64,
    pub time_s: f64,
    pub pose_evaluations: usize,
}

impl RegistrationRecord {
    pub fn new(
        case_id: impl Into<String>,
        reg: &Registration,
        gt_pose: RigidPose,
        initial_pose: RigidPose,
        landmarks: &[Vec3],
        gt_px: Vec<Vec<Vec2>>,
    ) -> Self {
        Self {
            case_id: case_id.into(),
            gt_pose,
            est_pose: reg.est_pose,
            initial_pose,
            tracked_px: reg.tracked_px.clone(),
            gt_px,
            triangulated: reg.triangulated.clone(),
            mtre_initial: mtre(landmarks, &initial_pose, &gt_pose),
            mtre_final: mtre(landmarks, &reg.est_pose, &gt_pose),
            time_s: reg.time_s,
            pose_evaluations: reg.pose_evaluations,
        }
    }

    /// Record of a case the pipeline could not register: the estimate stays
    /// at the initial pose.
    pub fn failed(
        case_id: impl Into<String>,
        gt_pose: RigidPose,
        initial_pose: RigidPose,
        landmarks: &[Vec3],
        time_s: f64,
    ) -> Self {
        let m = mtre(landmarks, &initial_pose, &gt_pose);
        Self {
            case_id: case_id.into(),
            gt_pose,
            est_pose: initial_pose,
            initial_pose,
            tracked_px: Vec::new(),
            gt_px: Vec::new(),
            triangulated: Vec::new(),
            mtre_initial: m,
            mtre_final: m,
            time_s,
            pose_evaluations: 1,
        }
    }
}

pub fn eval_metrics(records: &[RegistrationRecord]) -> Result<MetricsSummary> {
    let f: Vec<f64> = records.iter().map(|r| r.mtre_final).collect();
    let i: Vec<f64> = records.iter().map(|r| r.mtre_initial).collect();
    let t: Vec<f64> = records.iter().map(|r| r.time_s).collect();
    summarize(&f, &i, &t)
}
