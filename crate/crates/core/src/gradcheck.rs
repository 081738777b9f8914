//! Central finite-difference checks of every analytic gradient.
//!
//! Each suite compares analytic derivatives against `(f(x+h) − f(x−h)) / 2h`
//! and accepts `|a − n| ≤ rel_tol · max(|a|, |n|) + abs_tol`. A failing entry
//! is retried with `h / 10` and `h / 100` in case the step straddled a kink
//! (ReLU, bilinear cell edge, window boundary).

use std::fmt;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::geometry::{project_point, ImagingGeometry, RigidPose, Vec2, Vec3, ViewPose};
use crate::imaging::{gaussian_target, Heatmap};
use crate::rng;
use crate::tracknet::{
    heatmap_to_poi, heatmap_to_poi_grad, point2_loss, point2_loss_tape, track_view_nodes, NetworkConfig,
    NetworkParams, NormMode, Tape, Tensor,
};
use crate::triangulate::{build_system, triangulate, triangulate_grad, LossConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub seeds: Vec<u64>,
    pub rel_tol: f64,
    /// Absolute floor for entries whose true derivative is (near) zero.
    pub abs_tol: f64,
    /// Step for network parameters, images and heatmaps.
    pub h: f64,
    /// Step for detector points (mm) in the triangulation suite.
    pub h_mm: f64,
    /// Also check a default-sized network on 32×32 inputs, on a random
    /// subset of this many scalars.
    pub desk_samples: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            rel_tol: 1e-4,
            abs_tol: 1e-8,
            h: 1e-4,
            h_mm: 1e-5,
            desk_samples: 300,
        }
    }
}

/// Outcome of one suite on one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub checked: usize,
    pub failures: usize,
    /// Largest `|a − n| / (rel_tol · max(|a|, |n|) + abs_tol)`; ≤ 1 passes.
    pub worst_ratio: f64,
    /// Label of the entry with the largest ratio.
    pub worst_entry: String,
    pub time_s: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} seed {:>3}: {:>6} checked, {} failed, worst {:.3} ({}), {:.2}s",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.seed,
            self.checked,
            self.failures,
            self.worst_ratio,
            self.worst_entry,
            self.time_s
        )
    }
}

struct Tally {
    report: SuiteReport,
    rel_tol: f64,
    abs_tol: f64,
    start: Instant,
}

impl Tally {
    fn new(suite: &str, seed: u64, cfg: &GradCheckConfig) -> Self {
        Self {
            report: SuiteReport {
                suite: suite.to_string(),
                seed,
                checked: 0,
                failures: 0,
                worst_ratio: 0.0,
                worst_entry: String::new(),
                time_s: 0.0,
            },
            rel_tol: cfg.rel_tol,
            abs_tol: cfg.abs_tol,
            start: Instant::now(),
        }
    }

    fn ratio(&self, a: f64, n: f64) -> f64 {
        let r = (a - n).abs() / (self.rel_tol * a.abs().max(n.abs()) + self.abs_tol);
        if r.is_finite() {
            r
        } else {
            f64::INFINITY
        }
    }

    /// `f(δ)` evaluates the function with the checked scalar shifted by `δ`.
    fn check(&mut self, label: impl FnOnce() -> String, analytic: f64, h: f64, mut f: impl FnMut(f64) -> f64) {
        let mut fd = |h: f64| (f(h) - f(-h)) / (2.0 * h);
        let mut r = self.ratio(analytic, fd(h));
        for shrink in [10.0, 100.0] {
            if r <= 1.0 {
                break;
            }
            r = r.min(self.ratio(analytic, fd(h / shrink)));
        }
        self.report.checked += 1;
        if r > 1.0 {
            self.report.failures += 1;
        }
        if r > self.report.worst_ratio || self.report.worst_entry.is_empty() {
            self.report.worst_ratio = r;
            self.report.worst_entry = label();
        }
    }

    fn finish(mut self) -> SuiteReport {
        self.report.time_s = self.start.elapsed().as_secs_f64();
        self.report
    }
}

/// Runs every suite on every seed.
pub fn run_all(cfg: &GradCheckConfig) -> Result<Vec<SuiteReport>> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        out.push(check_network_small(seed, cfg)?);
        if cfg.desk_samples > 0 {
            out.push(check_network_desk(seed, cfg)?);
        }
        out.push(check_heatmap_to_poi(seed, cfg)?);
        out.push(check_triangulate(seed, cfg)?);
        out.push(check_loss(seed, cfg)?);
    }
    Ok(out)
}

/// The full joint graph for `n` views: both Siamese branches, POI convolution,
/// soft-argmax, triangulation and the loss.
struct JointProblem {
    geom: ImagingGeometry,
    views: Vec<ViewPose>,
    targets: Vec<Vec<Heatmap>>,
    x_gt: Vec<Vec3>,
    w: f64,
}

#[derive(Clone)]
struct JointState {
    params: Vec<NetworkParams>,
    drrs: Vec<Tensor>,
    xrays: Vec<Tensor>,
    /// Per view, per POI `(col, row)`.
    pois: Vec<Vec<[f64; 2]>>,
}

impl JointState {
    fn labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            for (name, t) in p.names.iter().zip(&p.tensors) {
                out.extend((0..t.len()).map(|k| format!("view{i}.{name}[{k}]")));
            }
        }
        for (tag, imgs) in [("drr", &self.drrs), ("xray", &self.xrays)] {
            for (i, t) in imgs.iter().enumerate() {
                out.extend((0..t.len()).map(|k| format!("view{i}.{tag}[{k}]")));
            }
        }
        for (i, view) in self.pois.iter().enumerate() {
            for j in 0..view.len() {
                out.push(format!("view{i}.poi{j}.col"));
                out.push(format!("view{i}.poi{j}.row"));
            }
        }
        out
    }

    fn scalars_mut(&mut self) -> Vec<&mut f64> {
        let mut out: Vec<&mut f64> = Vec::new();
        for p in self.params.iter_mut() {
            for t in p.tensors.iter_mut() {
                out.extend(t.data.iter_mut());
            }
        }
        for t in self.drrs.iter_mut().chain(self.xrays.iter_mut()) {
            out.extend(t.data.iter_mut());
        }
        for view in self.pois.iter_mut() {
            for p in view.iter_mut() {
                out.extend(p.iter_mut());
            }
        }
        out
    }

    fn shifted(&self, index: usize, delta: f64) -> Self {
        let mut s = self.clone();
        *s.scalars_mut().swap_remove(index) += delta;
        s
    }
}

impl JointProblem {
    /// Loss and, when asked, its gradient flattened in [`JointState`] order.
    fn evaluate(&self, s: &JointState, with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound: Vec<_> = s.params.iter().map(|p| p.bind(&mut tape)).collect();
        let drr_ids: Vec<_> = s.drrs.iter().map(|t| tape.leaf(t.clone())).collect();
        let xray_ids: Vec<_> = s.xrays.iter().map(|t| tape.leaf(t.clone())).collect();
        let poi_ids: Vec<Vec<_>> = s
            .pois
            .iter()
            .map(|v| v.iter().map(|p| tape.leaf(Tensor::from_vec(&[2], p.to_vec()))).collect())
            .collect();

        let mut heatmaps = Vec::with_capacity(self.views.len());
        for i in 0..self.views.len() {
            let g = track_view_nodes(&mut tape, &bound[i], drr_ids[i], xray_ids[i], &poi_ids[i])?;
            heatmaps.push(g.heatmaps);
        }
        let center = self.geom.center_px();
        let sp = self.geom.pixel_spacing_mm;
        let offset = [-center.x * sp, -center.y * sp];
        let window = s.params[0].config.window_px;
        let mut x_hat = Vec::with_capacity(self.x_gt.len());
        for j in 0..self.x_gt.len() {
            let mut pts = Vec::with_capacity(self.views.len());
            for view_maps in &heatmaps {
                let px = tape.soft_argmax(view_maps[j], window)?;
                pts.push(tape.affine(px, sp, &offset));
            }
            x_hat.push(tape.triangulate(&pts, &self.views, &self.geom)?);
        }
        let nodes = point2_loss_tape(
            &mut tape,
            &heatmaps,
            &self.targets,
            &x_hat,
            &self.x_gt,
            &LossConfig { w: self.w },
        )?;
        let loss = tape.scalar(nodes.total);
        if !with_grad {
            return Ok((loss, Vec::new()));
        }
        let g = tape.backward(nodes.total)?;
        let mut flat = Vec::new();
        for (b, p) in bound.iter().zip(&s.params) {
            for (&id, t) in b.ids.iter().zip(&p.tensors) {
                flat.extend(g.get_or_zeros(id, t).data);
            }
        }
        for (&id, t) in drr_ids.iter().zip(&s.drrs).chain(xray_ids.iter().zip(&s.xrays)) {
            flat.extend(g.get_or_zeros(id, t).data);
        }
        for view in &poi_ids {
            for &id in view {
                flat.extend(g.get_or_zeros(id, &Tensor::zeros(&[2])).data);
            }
        }
        Ok((loss, flat))
    }
}

/// Builds a random joint problem: perturbed parameters (so every BN offset and
/// bias is generic), random images, POIs away from cell edges and targets at
/// the true projections of random 3D points.
fn joint_problem<R: Rng>(
    rng: &mut R,
    config: NetworkConfig,
    side: usize,
    n_pois: usize,
) -> Result<(JointProblem, JointState)> {
    let geom = ImagingGeometry {
        det_px: [side, side],
        pixel_spacing_mm: 256.0 / side as f64,
        ..ImagingGeometry::default()
    };
    let views = vec![ViewPose::anterior_posterior(), ViewPose::lateral()];
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let mut params = Vec::with_capacity(views.len());
    for _ in &views {
        let mut p = NetworkParams::init(config, rng);
        for t in p.tensors.iter_mut() {
            for v in t.data.iter_mut() {
                *v += noise.sample(rng);
            }
        }
        params.push(p);
    }
    let image = |rng: &mut R| Tensor::from_vec(&[1, side, side], (0..side * side).map(|_| rng.random::<f64>()).collect());
    let drrs: Vec<Tensor> = views.iter().map(|_| image(rng)).collect();
    let xrays: Vec<Tensor> = views.iter().map(|_| image(rng)).collect();

    let lo = config.kernel_radius as f64 + 0.5;
    let hi = side as f64 - 1.5 - config.kernel_radius as f64;
    let pois = views
        .iter()
        .map(|_| {
            (0..n_pois)
                .map(|_| {
                    let mut c = || {
                        let v: f64 = rng.random_range(lo..hi);
                        // Keep clear of integer coordinates, where bilinear
                        // sampling has a kink.
                        v.floor() + 0.1 + 0.8 * v.fract()
                    };
                    [c(), c()]
                })
                .collect()
        })
        .collect();

    let half = 0.3 * side as f64 * geom.pixel_spacing_mm * geom.c_mm / geom.d_mm;
    let x_gt: Vec<Vec3> = (0..n_pois)
        .map(|_| Vec3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half)))
        .collect();
    let mut targets = Vec::with_capacity(views.len());
    for v in &views {
        let mut row = Vec::with_capacity(n_pois);
        for x in &x_gt {
            let px = crate::geometry::detector_mm_to_px(&project_point(x, v, &geom)?, &geom);
            row.push(gaussian_target(&px, 1.5, side, side));
        }
        targets.push(row);
    }
    // Offset the references so the 3D term has a well-defined gradient.
    let x_gt = x_gt
        .iter()
        .map(|x| x + Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
        .collect();
    Ok((
        JointProblem {
            geom,
            views,
            targets,
            x_gt,
            w: 1.0,
        },
        JointState {
            params,
            drrs,
            xrays,
            pois,
        },
    ))
}

fn check_joint(
    suite: &str,
    seed: u64,
    cfg: &GradCheckConfig,
    config: NetworkConfig,
    side: usize,
    n_pois: usize,
    samples: Option<usize>,
) -> Result<SuiteReport> {
    let mut rng = rng::substream(seed, 0x6772_6164, side as u64);
    let (problem, state) = joint_problem(&mut rng, config, side, n_pois)?;
    let (_, grad) = problem.evaluate(&state, true)?;
    let labels = state.labels();
    let total = grad.len();
    let n_poi_scalars = 2 * n_pois * problem.views.len();
    let indices: Vec<usize> = match samples {
        None => (0..total).collect(),
        Some(k) => {
            // POI inputs always, plus a random subset of everything else.
            let rest = total - n_poi_scalars;
            let mut idx: Vec<usize> = sample(&mut rng, rest, k.min(rest)).into_vec();
            idx.sort_unstable();
            idx.extend(rest..total);
            idx
        }
    };
    let mut tally = Tally::new(suite, seed, cfg);
    let mut first_err = None;
    for i in indices {
        tally.check(
            || labels[i].clone(),
            grad[i],
            cfg.h,
            |d| match problem.evaluate(&state.shifted(i, d), false) {
                Ok((l, _)) => l,
                Err(e) => {
                    first_err.get_or_insert(e);
                    f64::NAN
                }
            },
        );
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    Ok(tally.finish())
}

/// Every parameter, image and POI-input gradient of a small two-view network
/// on 8×8 inputs, through the whole joint loss.
pub fn check_network_small(seed: u64, cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let config = NetworkConfig {
        depth: 2,
        base_channels: 4,
        max_channels: 8,
        out_channels: 4,
        kernel_radius: 1,
        use_weight: true,
        norm: NormMode::Batch,
        window_px: 8,
        ..NetworkConfig::default()
    };
    check_joint("network 8x8", seed, cfg, config, 8, 3, None)
}

/// The default network on 32×32 inputs, on a random subset of scalars.
pub fn check_network_desk(seed: u64, cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let config = NetworkConfig {
        window_px: 32,
        ..NetworkConfig::default()
    };
    check_joint("network 32x32", seed, cfg, config, 32, 3, Some(cfg.desk_samples))
}

/// `upstream · heatmap_to_poi(H)` against every heatmap value.
pub fn check_heatmap_to_poi(seed: u64, cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = rng::substream(seed, 0x6832_7030, 0);
    let (w, h) = (16, 12);
    let peak = Vec2::new(rng.random_range(4.0..12.0), rng.random_range(3.0..9.0));
    let data = (0..w * h)
        .map(|k| {
            let (c, r) = ((k % w) as f64, (k / w) as f64);
            let d2 = (c - peak.x).powi(2) + (r - peak.y).powi(2);
            4.0 * (-d2 / 8.0).exp() - 2.0 + rng.random_range(-0.5..0.5)
        })
        .collect();
    let hmap = Heatmap { width: w, height: h, data };
    let upstream = Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let mut tally = Tally::new("heatmap_to_poi", seed, cfg);
    for window in [3, 16] {
        let grad = heatmap_to_poi_grad(&hmap, window, &upstream)?;
        for k in 0..w * h {
            tally.check(
                || format!("window {window} pixel {k}"),
                grad.data[k],
                cfg.h,
                |d| {
                    let mut m = hmap.clone();
                    m.data[k] += d;
                    heatmap_to_poi(&m, window).map(|p| p.dot(&upstream)).unwrap_or(f64::NAN)
                },
            );
        }
    }
    Ok(tally.finish())
}

/// `upstream · X̂` against every view's detector point, for random views and
/// noisy observations of a random point.
pub fn check_triangulate(seed: u64, cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = rng::substream(seed, 0x7472_6931, 0);
    let geom = ImagingGeometry::default();
    let mut tally = Tally::new("triangulate_grad", seed, cfg);
    for trial in 0..20 {
        let n = 2 + trial % 3;
        let views: Vec<ViewPose> = (0..n)
            .map(|_| {
                ViewPose(RigidPose::new(
                    [0; 3].map(|_| rng.random_range(-90.0..90.0)),
                    [0; 3].map(|_| rng.random_range(-30.0..30.0)),
                ))
            })
            .collect();
        let x = Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let noisy = trial % 2 == 1;
        let pts: Vec<Vec2> = views
            .iter()
            .map(|v| {
                let p = project_point(&x, v, &geom)?;
                Ok(if noisy {
                    p + Vec2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))
                } else {
                    p
                })
            })
            .collect::<Result<_>>()?;
        let upstream = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let grads = triangulate_grad(&build_system(&pts, &views, &geom)?, &upstream)?;
        for (i, g) in grads.iter().enumerate() {
            for axis in 0..2 {
                tally.check(
                    || format!("trial {trial} view {i} axis {axis}"),
                    g[axis],
                    cfg.h_mm,
                    |d| {
                        let mut p = pts.clone();
                        p[i][axis] += d;
                        build_system(&p, &views, &geom)
                            .and_then(|s| triangulate(&s))
                            .map(|x| x.dot(&upstream))
                            .unwrap_or(f64::NAN)
                    },
                );
            }
        }
    }
    Ok(tally.finish())
}

/// The loss against every logit and every estimated 3D coordinate.
pub fn check_loss(seed: u64, cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut rng = rng::substream(seed, 0x6c6f_7373, 0);
    let (n, m, w, h) = (2, 3, 6, 5);
    let logits: Vec<Vec<Heatmap>> = (0..n)
        .map(|_| {
            (0..m)
                .map(|_| Heatmap {
                    width: w,
                    height: h,
                    data: (0..w * h).map(|_| rng.random_range(-3.0..3.0)).collect(),
                })
                .collect()
        })
        .collect();
    let targets: Vec<Vec<Heatmap>> = (0..n)
        .map(|_| {
            (0..m)
                .map(|_| gaussian_target(&Vec2::new(rng.random_range(0.0..6.0), rng.random_range(0.0..5.0)), 1.5, w, h))
                .collect()
        })
        .collect();
    let rand3 = |rng: &mut rand_chacha::ChaCha8Rng| {
        Vec3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0))
    };
    let x_hat: Vec<Vec3> = (0..m).map(|_| rand3(&mut rng)).collect();
    let x_gt: Vec<Vec3> = (0..m).map(|_| rand3(&mut rng)).collect();
    let loss_cfg = LossConfig { w: 0.5 };

    let mut tape = Tape::new();
    let hs: Vec<Vec<_>> = logits
        .iter()
        .map(|v| v.iter().map(|l| tape.leaf(Tensor::from_vec(&[1, h, w], l.data.clone()))).collect())
        .collect();
    let xs: Vec<_> = x_hat.iter().map(|x| tape.leaf(Tensor::from_vec(&[3], vec![x.x, x.y, x.z]))).collect();
    let nodes = point2_loss_tape(&mut tape, &hs, &targets, &xs, &x_gt, &loss_cfg)?;
    let g = tape.backward(nodes.total)?;

    let mut tally = Tally::new("point2_loss", seed, cfg);
    let value = |l: &[Vec<Heatmap>], x: &[Vec3]| {
        point2_loss(l, &targets, x, &x_gt, &loss_cfg)
            .map(|v| v.total)
            .unwrap_or(f64::NAN)
    };
    for i in 0..n {
        for j in 0..m {
            let a = g.get_or_zeros(hs[i][j], tape.value(hs[i][j]));
            for k in 0..w * h {
                tally.check(|| format!("view {i} poi {j} logit {k}"), a.data[k], cfg.h, |d| {
                    let mut l = logits.clone();
                    l[i][j].data[k] += d;
                    value(&l, &x_hat)
                });
            }
        }
    }
    for (j, &id) in xs.iter().enumerate() {
        let a = g.get_or_zeros(id, tape.value(id));
        for axis in 0..3 {
            tally.check(|| format!("poi {j} X̂[{axis}]"), a.data[axis], cfg.h, |d| {
                let mut x = x_hat.clone();
                x[j][axis] += d;
                value(&logits, &x)
            });
        }
    }
    Ok(tally.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradCheckConfig {
        GradCheckConfig {
            seeds: vec![7],
            desk_samples: 20,
            ..GradCheckConfig::default()
        }
    }

    #[test]
    fn all_suites_pass_on_one_seed() {
        for r in run_all(&quick()).unwrap() {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let cfg = quick();
        let mut t = Tally::new("probe", 0, &cfg);
        t.check(|| "x²".into(), 2.0 * 3.0 * 1.01, 1e-4, |d| (3.0 + d) * (3.0 + d));
        t.check(|| "x²".into(), 2.0 * 3.0, 1e-4, |d| (3.0 + d) * (3.0 + d));
        let r = t.finish();
        assert_eq!((r.checked, r.failures), (2, 1));
        assert!(!r.passed());
    }
}
