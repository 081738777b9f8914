//! Registration accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidPose, Vec2, Vec3};

/// Cases whose final mTRE exceeds this count as gross failures.
pub const GROSS_FAILURE_MM: f64 = 10.0;

/// Mean over `landmarks` of `‖est(X) − gt(X)‖`. NaN when `landmarks` is empty.
pub fn mtre(landmarks: &[Vec3], est: &RigidPose, gt: &RigidPose) -> f64 {
    let (e, g) = (est.to_transform(), gt.to_transform());
    let sum: f64 = landmarks.iter().map(|x| (e.apply(x) - g.apply(x)).norm()).sum();
    sum / landmarks.len() as f64
}

/// Mean 2D distance between tracked and true pixel positions, in mm.
pub fn mpd(tracked_px: &[Vec2], gt_px: &[Vec2], pixel_spacing_mm: f64) -> Result<f64> {
    if tracked_px.len() != gt_px.len() {
        return Err(Error::LengthMismatch(tracked_px.len(), gt_px.len()));
    }
    if tracked_px.is_empty() {
        return Err(Error::validation("tracked_px", "no points"));
    }
    let sum: f64 = tracked_px.iter().zip(gt_px).map(|(a, b)| (a - b).norm()).sum();
    Ok(sum / tracked_px.len() as f64 * pixel_spacing_mm)
}

/// Linear interpolation at rank `p/100 · (n − 1)` of ascending `sorted`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile(&v, 50.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub count: usize,
    pub mtre_p50: f64,
    pub mtre_p75: f64,
    pub mtre_p95: f64,
    /// Fraction of cases with final mTRE above [`GROSS_FAILURE_MM`].
    pub gfr: f64,
    pub mean_time_s: f64,
    pub initial_mtre_p50: f64,
}

/// Aggregates per-case final/initial mTREs and run times.
pub fn summarize(final_mtre: &[f64], initial_mtre: &[f64], times_s: &[f64]) -> Result<MetricsSummary> {
    let n = final_mtre.len();
    if n == 0 {
        return Err(Error::validation("records", "need >= 1 record"));
    }
    if initial_mtre.len() != n || times_s.len() != n {
        return Err(Error::LengthMismatch(n, initial_mtre.len().min(times_s.len())));
    }
    let mut sorted = final_mtre.to_vec();
    sorted.sort_by(f64::total_cmp);
    let failures = final_mtre.iter().filter(|&&m| m > GROSS_FAILURE_MM).count();
    Ok(MetricsSummary {
        count: n,
        mtre_p50: percentile(&sorted, 50.0),
        mtre_p75: percentile(&sorted, 75.0),
        mtre_p95: percentile(&sorted, 95.0),
        gfr: failures as f64 / n as f64,
        mean_time_s: times_s.iter().sum::<f64>() / n as f64,
        initial_mtre_p50: median(initial_mtre),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mtre_of_pure_translation() {
        let gt = RigidPose::new([3.0, -2.0, 7.0], [1.0, 2.0, 3.0]);
        let est_t = RigidPose::translation([3.0, 4.0, 0.0]).to_transform().compose(&gt.to_transform());
        let lm = vec![Vec3::new(10.0, 0.0, -5.0), Vec3::new(-30.0, 8.0, 2.0)];
        assert!((mtre(&lm, &est_t.to_pose(), &gt) - 5.0).abs() < 1e-9);
        assert_eq!(mtre(&lm, &gt, &gt), 0.0);
    }

    #[test]
    fn mpd_examples() {
        let a = [Vec2::new(1.0, 1.0)];
        assert_eq!(mpd(&a, &a, 0.388).unwrap(), 0.0);
        assert!((mpd(&a, &[Vec2::new(2.0, 1.0)], 0.388).unwrap() - 0.388).abs() < 1e-15);
        assert!(matches!(mpd(&a, &[], 1.0), Err(Error::LengthMismatch(1, 0))));
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[0.0; 4], &[1.0; 4], &[0.5; 4]).unwrap();
        assert_eq!((s.gfr, s.mtre_p50, s.mtre_p95), (0.0, 0.0, 0.0));
        let s = summarize(&[5.0, 15.0], &[20.0, 20.0], &[1.0, 1.0]).unwrap();
        assert_eq!(s.gfr, 0.5);
        assert!(summarize(&[], &[], &[]).is_err());
    }

    #[test]
    fn percentiles_interpolate() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((percentile(&v, 50.0) - 50.5).abs() < 1e-12);
        assert!((percentile(&v, 75.0) - 75.25).abs() < 1e-12);
        assert!((percentile(&v, 95.0) - 95.05).abs() < 1e-12);
    }
}
