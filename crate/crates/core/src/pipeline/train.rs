//! Two-stage training: per-view tracking first, then joint fine-tuning
//! through the triangulation layer.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::imaging::{gaussian_target, preprocess, Heatmap, Image, PreprocessConfig, DEFAULT_TARGET_SIGMA_PX};
use crate::rng;
use crate::tracknet::{
    point2_loss_tape, track_view_tape, NetworkConfig, NetworkParams, Tape, Tensor,
};
use crate::triangulate::LossConfig;

use super::dataset::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr1: f64,
    pub lr2: f64,
    pub batch_size: usize,
    /// Weight of the 3D term in stage 2.
    pub w: f64,
    /// POIs drawn per training sample.
    pub poi_subset: usize,
    pub target_sigma_px: f64,
    pub seed: u64,
    pub network: NetworkConfig,
    pub preprocess: PreprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 30,
            stage2_epochs: 20,
            lr1: 0.01,
            lr2: 0.001,
            batch_size: 1,
            w: LossConfig::default().w,
            poi_subset: 16,
            target_sigma_px: DEFAULT_TARGET_SIGMA_PX,
            seed: 0,
            network: NetworkConfig::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::validation(format!("train.{f}"), m));
        if !(self.lr1.is_finite() && self.lr1 > 0.0) {
            return bad("lr1", "must be finite and > 0");
        }
        if !(self.lr2.is_finite() && self.lr2 > 0.0) {
            return bad("lr2", "must be finite and > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.w.is_finite() && self.w >= 0.0) {
            return bad("w", "must be finite and >= 0");
        }
        if self.poi_subset < 3 {
            return bad("poi_subset", "must be >= 3");
        }
        if !(self.target_sigma_px.is_finite() && self.target_sigma_px > 0.0) {
            return bad("target_sigma_px", "must be finite and > 0");
        }
        self.network.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Each view's network on its own tracking loss (`w = 0`).
    Tracking,
    /// All views jointly on the full loss.
    Joint,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Tracking => 1,
            Stage::Joint => 2,
        }
    }
}

/// One row of the loss curve: epoch means over samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurveRow {
    pub epoch: usize,
    pub stage: u8,
    pub loss: f64,
    pub bce_term: f64,
    pub tri_term: f64,
}

pub struct TrainOutput {
    pub params: Vec<NetworkParams>,
    /// Parameters at the end of stage 1.
    pub stage1_params: Vec<NetworkParams>,
    pub curve: Vec<LossCurveRow>,
}

/// Preprocessed images, computed once per training run.
pub struct TrainingImages {
    /// Per volume, per view.
    pub drrs: Vec<Vec<Image>>,
    /// Per case, per view.
    pub xrays: Vec<Vec<Image>>,
    /// Per volume, per view, per POI.
    pub drr_pois_px: Vec<Vec<Vec<Vec2>>>,
}

impl TrainingImages {
    pub fn new(ds: &Dataset, cfg: &PreprocessConfig) -> Result<Self> {
        let prep = |imgs: &[Image]| imgs.iter().map(|i| preprocess(i, cfg)).collect::<Result<Vec<_>>>();
        Ok(Self {
            drrs: ds.drrs.iter().map(|v| prep(v)).collect::<Result<_>>()?,
            xrays: ds.cases.iter().map(|c| prep(&c.xrays)).collect::<Result<_>>()?,
            drr_pois_px: (0..ds.volumes.len())
                .map(|v| (0..ds.config.views.len()).map(|i| ds.drr_pois_px(v, i)).collect())
                .collect::<Result<_>>()?,
        })
    }
}

/// Loss terms and per-view parameter gradients of one sample.
pub struct SampleGradients {
    pub loss: f64,
    pub bce: f64,
    /// `Σ_j ‖X̂_j − X_j‖` over POIs with an estimate (0 in stage 1).
    pub tri: f64,
    pub grads: Vec<Vec<Tensor>>,
}

/// Forward and backward pass for one case restricted to the POIs `subset`.
pub fn sample_gradients(
    params: &[NetworkParams],
    ds: &Dataset,
    images: &TrainingImages,
    case: usize,
    subset: &[usize],
    stage: Stage,
    cfg: &TrainConfig,
) -> Result<SampleGradients> {
    let c = &ds.cases[case];
    let geom = &ds.config.geometry;
    let n_views = ds.config.views.len();
    let mut tape = Tape::new();
    let bound: Vec<_> = params.iter().map(|p| p.bind(&mut tape)).collect();
    let mut heatmaps = Vec::with_capacity(n_views);
    let mut targets = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let pois: Vec<Vec2> = subset.iter().map(|&j| images.drr_pois_px[c.volume][i][j]).collect();
        let g = track_view_tape(
            &mut tape,
            &bound[i],
            &images.drrs[c.volume][i],
            &images.xrays[case][i],
            &pois,
        )?;
        heatmaps.push(g.heatmaps);
        targets.push(
            subset
                .iter()
                .map(|&j| gaussian_target(&c.gt_pois_px[i][j], cfg.target_sigma_px, geom.width(), geom.height()))
                .collect::<Vec<Heatmap>>(),
        );
    }

    let (loss, bce, tri) = match stage {
        Stage::Tracking => {
            // Independent per-view objectives; their sum gives every view's
            // network exactly its own gradient.
            let mut per_view = Vec::with_capacity(n_views);
            for (h, t) in heatmaps.iter().zip(&targets) {
                let nodes = point2_loss_tape(
                    &mut tape,
                    std::slice::from_ref(h),
                    std::slice::from_ref(t),
                    &[],
                    &[],
                    &LossConfig { w: 0.0 },
                )?;
                per_view.push((nodes.total, 1.0));
            }
            let total = tape.weighted_sum(&per_view);
            let mean = tape.scalar(total) / n_views as f64;
            (total, mean, 0.0)
        }
        Stage::Joint => {
            let center = geom.center_px();
            let s = geom.pixel_spacing_mm;
            let offset = [-center.x * s, -center.y * s];
            let mut x_hat = Vec::with_capacity(subset.len());
            let mut x_gt = Vec::with_capacity(subset.len());
            for (k, &j) in subset.iter().enumerate() {
                let mut pts = Vec::with_capacity(n_views);
                for view_maps in &heatmaps {
                    match tape.soft_argmax(view_maps[k], cfg.network.window_px) {
                        Ok(px) => pts.push(tape.affine(px, s, &offset)),
                        Err(Error::DegenerateHeatmap(_)) => break,
                        Err(e) => return Err(e),
                    }
                }
                if pts.len() == n_views {
                    x_hat.push(tape.triangulate(&pts, &ds.config.views, geom)?);
                    x_gt.push(c.gt_pois_3d[j]);
                }
            }
            let nodes = point2_loss_tape(
                &mut tape,
                &heatmaps,
                &targets,
                &x_hat,
                &x_gt,
                &LossConfig { w: cfg.w },
            )?;
            let bce = tape.scalar(nodes.bce);
            (nodes.total, bce, tape.scalar(nodes.distance_sum))
        }
    };
    let loss_value = match stage {
        Stage::Tracking => bce,
        Stage::Joint => tape.scalar(loss),
    };
    let g = tape.backward(loss)?;
    let grads = bound
        .iter()
        .zip(params)
        .map(|(b, p)| {
            b.ids
                .iter()
                .zip(&p.tensors)
                .map(|(&id, t)| g.get_or_zeros(id, t))
                .collect()
        })
        .collect();
    Ok(SampleGradients {
        loss: loss_value,
        bce,
        tri,
        grads,
    })
}

/// Fresh networks for every view, seeded per view.
pub fn init_params(config: NetworkConfig, n_views: usize, seed: u64) -> Vec<NetworkParams> {
    (0..n_views)
        .map(|i| NetworkParams::init(config, &mut rng::substream(seed, i as u64, 3)))
        .collect()
}

/// Runs `epochs` epochs of mini-batch SGD over the training cases.
/// `epoch_offset` numbers the curve rows.
pub fn train_stage(
    params: &mut [NetworkParams],
    ds: &Dataset,
    images: &TrainingImages,
    stage: Stage,
    epochs: usize,
    lr: f64,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&LossCurveRow),
) -> Result<Vec<LossCurveRow>> {
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut r = rng::substream(cfg.seed, stage.number() as u64, epoch as u64);
        let mut order = ds.train.clone();
        order.shuffle(&mut r);
        let plan: Vec<(usize, Vec<usize>)> = order
            .iter()
            .map(|&c| {
                let n = ds.pois[ds.cases[c].volume].len();
                let mut subset = sample(&mut r, n, cfg.poi_subset.min(n)).into_vec();
                subset.sort_unstable();
                (c, subset)
            })
            .collect();
        let (mut sum_loss, mut sum_bce, mut sum_tri) = (0.0, 0.0, 0.0);
        for (b, batch) in plan.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<SampleGradients>> = batch
                .par_iter()
                .map(|(c, subset)| sample_gradients(params, ds, images, *c, subset, stage, cfg))
                .collect();
            let mut acc: Option<Vec<Vec<Tensor>>> = None;
            for (k, res) in results.into_iter().enumerate() {
                let s = res?;
                if !s.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        stage: stage.number(),
                        epoch,
                        sample: b * cfg.batch_size + k,
                    });
                }
                sum_loss += s.loss;
                sum_bce += s.bce;
                sum_tri += s.tri;
                match &mut acc {
                    None => acc = Some(s.grads),
                    Some(a) => {
                        for (av, sv) in a.iter_mut().zip(&s.grads) {
                            for (at, st) in av.iter_mut().zip(sv) {
                                at.add_assign(st);
                            }
                        }
                    }
                }
            }
            if let Some(a) = acc {
                let step = -lr / batch.len() as f64;
                for (p, g) in params.iter_mut().zip(&a) {
                    p.add_scaled(g, step);
                }
            }
        }
        let n = plan.len().max(1) as f64;
        let row = LossCurveRow {
            epoch,
            stage: stage.number(),
            loss: sum_loss / n,
            bce_term: sum_bce / n,
            tri_term: sum_tri / n,
        };
        on_epoch(&row);
        curve.push(row);
    }
    Ok(curve)
}

/// Full two-stage schedule from freshly initialized networks.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with_progress(ds, cfg, |_| {})
}

pub fn train_with_progress(
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&LossCurveRow),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::validation("dataset.train", "no training cases"));
    }
    let images = TrainingImages::new(ds, &cfg.preprocess)?;
    let mut params = init_params(cfg.network, ds.config.views.len(), cfg.seed);
    let mut curve = train_stage(
        &mut params,
        ds,
        &images,
        Stage::Tracking,
        cfg.stage1_epochs,
        cfg.lr1,
        cfg,
        &mut on_epoch,
    )?;
    // Parameters are stored as f32; rounding here makes a saved stage-1
    // network and a resumed stage 2 identical to the in-memory run.
    params.iter_mut().for_each(NetworkParams::round_to_f32);
    let stage1_params = params.clone();
    curve.extend(train_stage(
        &mut params,
        ds,
        &images,
        Stage::Joint,
        cfg.stage2_epochs,
        cfg.lr2,
        cfg,
        &mut on_epoch,
    )?);
    params.iter_mut().for_each(NetworkParams::round_to_f32);
    Ok(TrainOutput {
        params,
        stage1_params,
        curve,
    })
}
