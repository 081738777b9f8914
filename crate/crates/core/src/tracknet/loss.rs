//! The joint tracking + triangulation loss.
//!
//! `L = mean_{i,j} BCE(σ(M̂_ij), P_ij) + (w / n) Σ_j ‖X̂_j − X_j‖`
//! over `n` views and `m` POIs.

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::imaging::Heatmap;
use crate::triangulate::LossConfig;

use super::ops::Tensor;
use super::tape::{NodeId, Tape};

/// Scalar nodes of the loss and its two terms (the tracking term already
/// averaged, the 3D term before weighting).
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub bce: NodeId,
    pub distance_sum: NodeId,
}

/// Records the loss on `tape`.
///
/// `heatmaps[i][j]` are logit nodes for view `i`, POI `j`; `targets` has the
/// same layout. `x_hat` holds 3-vector nodes matched one-to-one with `x_gt`;
/// POIs without an estimate are left out of the 3D term.
pub fn point2_loss_tape(
    tape: &mut Tape,
    heatmaps: &[Vec<NodeId>],
    targets: &[Vec<Heatmap>],
    x_hat: &[NodeId],
    x_gt: &[Vec3],
    cfg: &LossConfig,
) -> Result<LossNodes> {
    let n = heatmaps.len();
    if n == 0 || targets.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} views of heatmaps, {} of targets",
            targets.len()
        )));
    }
    let m = heatmaps[0].len();
    let mut terms = Vec::with_capacity(n * m);
    for (hs, ts) in heatmaps.iter().zip(targets) {
        if hs.len() != m || ts.len() != m {
            return Err(Error::ShapeMismatch(format!(
                "expected {m} POIs per view, got {} heatmaps and {} targets",
                hs.len(),
                ts.len()
            )));
        }
        for (&h, t) in hs.iter().zip(ts) {
            let (_, hh, hw) = tape.value(h).chw();
            if (hw, hh) != (t.width, t.height) {
                return Err(Error::ShapeMismatch(format!(
                    "heatmap {hw}x{hh} vs target {}x{}",
                    t.width, t.height
                )));
            }
            terms.push(tape.bce_with_logits(h, t.data.clone())?);
        }
    }
    let inv = 1.0 / terms.len().max(1) as f64;
    let bce = tape.weighted_sum(&terms.iter().map(|&t| (t, inv)).collect::<Vec<_>>());

    if x_hat.len() != x_gt.len() || x_hat.len() > m {
        return Err(Error::ShapeMismatch(format!(
            "{m} POIs, {} estimated and {} reference 3D points",
            x_hat.len(),
            x_gt.len()
        )));
    }
    let dists: Vec<(NodeId, f64)> = x_hat
        .iter()
        .zip(x_gt)
        .map(|(&x, g)| (tape.distance(x, g.as_slice()), 1.0))
        .collect();
    let distance_sum = tape.weighted_sum(&dists);
    let total = tape.weighted_sum(&[(bce, 1.0), (distance_sum, cfg.w / n as f64)]);
    Ok(LossNodes {
        total,
        bce,
        distance_sum,
    })
}

/// Value of the loss and its terms for precomputed logits and 3D estimates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub bce: f64,
    /// `Σ_j ‖X̂_j − X_j‖` (unweighted).
    pub distance_sum: f64,
}

pub fn point2_loss(
    pred_heatmaps: &[Vec<Heatmap>],
    targets: &[Vec<Heatmap>],
    x_hat: &[Vec3],
    x_gt: &[Vec3],
    cfg: &LossConfig,
) -> Result<LossValue> {
    let mut tape = Tape::new();
    let hs: Vec<Vec<NodeId>> = pred_heatmaps
        .iter()
        .map(|view| {
            view.iter()
                .map(|h| tape.leaf(Tensor::from_vec(&[1, h.height, h.width], h.data.clone())))
                .collect()
        })
        .collect();
    let xs: Vec<NodeId> = x_hat
        .iter()
        .map(|x| tape.leaf(Tensor::from_vec(&[3], vec![x.x, x.y, x.z])))
        .collect();
    let nodes = point2_loss_tape(&mut tape, &hs, targets, &xs, x_gt, cfg)?;
    Ok(LossValue {
        total: tape.scalar(nodes.total),
        bce: tape.scalar(nodes.bce),
        distance_sum: tape.scalar(nodes.distance_sum),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hm(w: usize, h: usize, v: f64) -> Heatmap {
        Heatmap {
            width: w,
            height: h,
            data: vec![v; w * h],
        }
    }

    #[test]
    fn single_pixel_half_probability() {
        let l = point2_loss(
            &[vec![hm(1, 1, 0.0)]],
            &[vec![hm(1, 1, 1.0)]],
            &[],
            &[],
            &LossConfig { w: 0.0 },
        )
        .unwrap();
        assert!((l.total - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn exact_points_have_zero_3d_term() {
        let x = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-4.0, 0.5, 9.0)];
        let preds = vec![vec![hm(4, 4, 0.3), hm(4, 4, -1.0)]; 2];
        let tg = vec![vec![hm(4, 4, 0.2), hm(4, 4, 0.9)]; 2];
        let l = point2_loss(&preds, &tg, &x, &x, &LossConfig::default()).unwrap();
        assert_eq!(l.distance_sum, 0.0);
        assert_eq!(l.total, l.bce);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let r = point2_loss(
            &[vec![hm(4, 4, 0.0)]],
            &[vec![hm(4, 5, 0.5)]],
            &[],
            &[],
            &LossConfig { w: 0.0 },
        );
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
        let r = point2_loss(
            &[vec![hm(4, 4, 0.0)], vec![hm(4, 4, 0.0)]],
            &[vec![hm(4, 4, 0.5)]],
            &[],
            &[],
            &LossConfig { w: 0.0 },
        );
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }
}
