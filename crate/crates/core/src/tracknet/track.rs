//! Per-view POI tracking: DRR and X-ray through the shared branch, one feature
//! kernel per DRR POI, and one similarity heatmap per POI over the X-ray.

use crate::error::Result;
use crate::geometry::Vec2;
use crate::imaging::{Heatmap, Image};

use super::network::{check_input_shape, forward_features, image_tensor, BoundParams, NetworkParams};
use super::ops::Tensor;
use super::poi::windowed_soft_argmax;
use super::tape::{NodeId, Tape};

/// Heatmap logit nodes of one view, one per POI in input order.
pub struct ViewGraph {
    pub drr_features: NodeId,
    pub xray_features: NodeId,
    pub poi_inputs: Vec<NodeId>,
    pub heatmaps: Vec<NodeId>,
}

/// Records the tracking of `drr_pois_px` from `drr` into `xray` on `tape`.
pub fn track_view_tape(
    tape: &mut Tape,
    params: &BoundParams,
    drr: &Image,
    xray: &Image,
    drr_pois_px: &[Vec2],
) -> Result<ViewGraph> {
    let cfg = params.config;
    check_input_shape(&cfg, drr.width, drr.height)?;
    check_input_shape(&cfg, xray.width, xray.height)?;
    let d_in = tape.leaf(image_tensor(drr));
    let x_in = tape.leaf(image_tensor(xray));
    let pois: Vec<NodeId> = drr_pois_px
        .iter()
        .map(|p| tape.leaf(Tensor::from_vec(&[2], vec![p.x, p.y])))
        .collect();
    track_view_nodes(tape, params, d_in, x_in, &pois)
}

/// As [`track_view_tape`], with the images (`[1, H, W]`) and POIs (2-vectors)
/// already on the tape.
pub fn track_view_nodes(
    tape: &mut Tape,
    params: &BoundParams,
    drr: NodeId,
    xray: NodeId,
    pois: &[NodeId],
) -> Result<ViewGraph> {
    let cfg = params.config;
    let drr_features = forward_features(tape, params, drr)?;
    let xray_features = forward_features(tape, params, xray)?;
    let mut heatmaps = Vec::with_capacity(pois.len());
    for &poi in pois {
        let kernel = tape.fe_sample(drr_features, poi, cfg.kernel_radius)?;
        let kernel = if cfg.use_weight {
            tape.mul(kernel, params.id("poi.weight"))
        } else {
            kernel
        };
        heatmaps.push(tape.poi_correlate(xray_features, kernel)?);
    }
    Ok(ViewGraph {
        drr_features,
        xray_features,
        poi_inputs: pois.to_vec(),
        heatmaps,
    })
}

/// Outcome of tracking one POI at inference time.
#[derive(Debug)]
pub struct TrackedPoi {
    pub heatmap: Heatmap,
    /// Soft-argmax position `(col, row)`, or the error that prevented it.
    pub position: Result<Vec2>,
}

/// Tracks every DRR POI into the X-ray. A POI whose feature kernel leaves the
/// DRR fails with `OutOfBounds`; one whose heatmap has no usable peak fails
/// with `DegenerateHeatmap`. Other POIs are unaffected.
pub fn track_view(
    params: &NetworkParams,
    drr: &Image,
    xray: &Image,
    drr_pois_px: &[Vec2],
) -> Result<Vec<TrackedPoi>> {
    let cfg = params.config;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    // Whole-image work happens once; POIs are then tracked one at a time so
    // that a failing POI does not abort the others.
    let empty = track_view_tape(&mut tape, &bound, drr, xray, &[])?;
    let mut out = Vec::with_capacity(drr_pois_px.len());
    for p in drr_pois_px {
        let poi = tape.leaf(Tensor::from_vec(&[2], vec![p.x, p.y]));
        let kernel = match tape.fe_sample(empty.drr_features, poi, cfg.kernel_radius) {
            Ok(k) => k,
            Err(e) => {
                out.push(TrackedPoi {
                    heatmap: Heatmap::zeros(xray.width, xray.height),
                    position: Err(e),
                });
                continue;
            }
        };
        let kernel = if cfg.use_weight {
            tape.mul(kernel, bound.id("poi.weight"))
        } else {
            kernel
        };
        let h = tape.poi_correlate(empty.xray_features, kernel)?;
        let data = tape.value(h).data.clone();
        let position = windowed_soft_argmax(&data, xray.width, xray.height, cfg.window_px)
            .map(|(pos, _)| pos);
        out.push(TrackedPoi {
            heatmap: Heatmap {
                width: xray.width,
                height: xray.height,
                data,
            },
            position,
        });
    }
    Ok(out)
}
