//! Rigid Procrustes alignment of corresponded point sets.

use nalgebra::{Matrix3, SVD};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};

/// Relative gate on the singular values of the source covariance.
pub const SHAPE_TOLERANCE: f64 = 1e-10;

/// Rigid `T` minimizing `Σ‖T·source_k − target_k‖²`, with a proper rotation.
pub fn procrustes_rigid(source: &[Vec3], target: &[Vec3]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::CorrespondenceMismatch {
            source_len: source.len(),
            target_len: target.len(),
        });
    }
    let m = source.len();
    if m < 3 {
        return Err(Error::DegenerateShape(format!("need >= 3 points, got {m}")));
    }
    if source.iter().chain(target).any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::DegenerateShape("non-finite point".into()));
    }
    let mean = |pts: &[Vec3]| pts.iter().sum::<Vec3>() / m as f64;
    let (cs, ct) = (mean(source), mean(target));

    let mut spread = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        let (a, b) = (s - cs, t - ct);
        spread += a * a.transpose();
        cross += b * a.transpose();
    }
    // The covariance is symmetric PSD, so its eigenvalues are its singular
    // values. Planar sources are fine; collinear or coincident ones are not.
    let mut sv: Vec<f64> = (spread / m as f64).symmetric_eigenvalues().iter().map(|v| v.abs()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0 && sv[1] > SHAPE_TOLERANCE * sv[0]) {
        return Err(Error::DegenerateShape(format!(
            "source is collinear or coincident (singular values {:.3e}, {:.3e}, {:.3e})",
            sv[0], sv[1], sv[2]
        )));
    }

    let svd = SVD::new(cross, true, true);
    let u = svd.u.expect("svd computed with U");
    let v_t = svd.v_t.expect("svd computed with V");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // flip the direction of the smallest singular value
        let smallest = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(2);
        d[(smallest, smallest)] = -1.0;
    }
    let rotation = u * d * v_t;
    Ok(RigidTransform {
        rotation,
        translation: ct - rotation * cs,
    })
}

/// `‖T·source − target‖_F`.
pub fn alignment_residual(t: &RigidTransform, source: &[Vec3], target: &[Vec3]) -> f64 {
    source
        .iter()
        .zip(target)
        .map(|(s, q)| (t.apply(s) - q).norm_squared())
        .sum::<f64>()
        .sqrt()
}
