//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Each operation evaluates eagerly, stores its output and enough context to
//! run its adjoint, and returns a [`NodeId`]. [`Tape::backward`] walks the
//! nodes in reverse creation order. A tape is single-threaded; build one per
//! training sample.

use crate::error::{Error, Result};
use crate::geometry::{ImagingGeometry, Vec2, Vec3, ViewPose};
use crate::triangulate::{build_system, triangulate, triangulate_grad, TriSystem};

use super::ops::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    Deconv2x2 {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        means: Vec<f64>,
        inv_stds: Vec<f64>,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    FeSample {
        fmap: NodeId,
        poi: NodeId,
        radius: usize,
    },
    PoiCorrelate {
        fmap: NodeId,
        kernel: NodeId,
    },
    BceLogits {
        logits: NodeId,
        target: Vec<f64>,
    },
    SoftArgmax {
        hmap: NodeId,
        window: [usize; 4],
    },
    Affine {
        x: NodeId,
        scale: f64,
    },
    Triangulate {
        points_mm: Vec<NodeId>,
        system: TriSystem,
    },
    Distance {
        x: NodeId,
        target: Vec<f64>,
    },
    Sum {
        terms: Vec<(NodeId, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(&like.shape))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data[0]
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let out = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    pub fn deconv2x2(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let out = ops::deconv2x2(self.value(x), self.value(w), self.value(b));
        self.push(out, Op::Deconv2x2 { x, w, b })
    }

    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (out, means, inv_stds) =
            ops::batch_norm(self.value(x), self.value(gamma), self.value(beta));
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                means,
                inv_stds,
            },
        )
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let out = ops::leaky_relu(self.value(x), slope);
        self.push(out, Op::LeakyRelu { x, slope })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = ops::concat(self.value(a), self.value(b));
        self.push(out, Op::Concat { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "elementwise product of different shapes");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(&va.shape, data);
        self.push(out, Op::Mul { a, b })
    }

    /// Bilinear feature kernel of radius `radius` around the 2-vector node `poi`
    /// (pixel `(col, row)`).
    pub fn fe_sample(&mut self, fmap: NodeId, poi: NodeId, radius: usize) -> Result<NodeId> {
        let p = self.value(poi);
        let at = (p.data[0], p.data[1]);
        let out = ops::fe_sample(self.value(fmap), at, radius)
            .map_err(|(dx, dy)| Error::OutOfBounds { dx, dy })?;
        Ok(self.push(out, Op::FeSample { fmap, poi, radius }))
    }

    pub fn poi_correlate(&mut self, fmap: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (fc, kc) = (self.value(fmap).shape[0], self.value(kernel).shape[0]);
        if fc != kc {
            return Err(Error::ChannelMismatch { kernel: kc, map: fc });
        }
        let out = ops::poi_correlate(self.value(fmap), self.value(kernel));
        Ok(self.push(out, Op::PoiCorrelate { fmap, kernel }))
    }

    /// Mean pixelwise `BCE(σ(logits), target)`; scalar output.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: Vec<f64>) -> Result<NodeId> {
        if self.value(logits).len() != target.len() {
            return Err(Error::ShapeMismatch(format!(
                "heatmap has {} pixels, target {}",
                self.value(logits).len(),
                target.len()
            )));
        }
        let loss = ops::bce_with_logits(&self.value(logits).data, &target);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { logits, target }))
    }

    /// σ-weighted mean pixel position over the window of radius `window_px`
    /// around the argmax of a `[1, H, W]` heatmap; output `(col, row)`.
    pub fn soft_argmax(&mut self, hmap: NodeId, window_px: usize) -> Result<NodeId> {
        let v = self.value(hmap);
        let (_, h, w) = v.chw();
        let (pos, window) = super::poi::windowed_soft_argmax(&v.data, w, h, window_px)?;
        Ok(self.push(
            Tensor::from_vec(&[2], vec![pos.x, pos.y]),
            Op::SoftArgmax { hmap, window },
        ))
    }

    /// `scale * x + offset`.
    pub fn affine(&mut self, x: NodeId, scale: f64, offset: &[f64]) -> NodeId {
        let v = self.value(x);
        assert_eq!(v.len(), offset.len());
        let data = v.data.iter().zip(offset).map(|(a, o)| scale * a + o).collect();
        let out = Tensor::from_vec(&v.shape, data);
        self.push(out, Op::Affine { x, scale })
    }

    /// Triangulates one 3D point from per-view detector points (mm, 2-vectors).
    pub fn triangulate(
        &mut self,
        points_mm: &[NodeId],
        views: &[ViewPose],
        geom: &ImagingGeometry,
    ) -> Result<NodeId> {
        let pts: Vec<Vec2> = points_mm
            .iter()
            .map(|&id| {
                let v = self.value(id);
                Vec2::new(v.data[0], v.data[1])
            })
            .collect();
        let system = build_system(&pts, views, geom)?;
        let x = triangulate(&system)?;
        Ok(self.push(
            Tensor::from_vec(&[3], vec![x.x, x.y, x.z]),
            Op::Triangulate {
                points_mm: points_mm.to_vec(),
                system,
            },
        ))
    }

    /// Euclidean distance to a constant target; scalar output.
    pub fn distance(&mut self, x: NodeId, target: &[f64]) -> NodeId {
        let v = self.value(x);
        let d = v
            .data
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        self.push(
            Tensor::scalar(d),
            Op::Distance {
                x,
                target: target.to_vec(),
            },
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let total = terms.iter().map(|&(id, c)| c * self.scalar(id)).sum();
        self.push(
            Tensor::scalar(total),
            Op::Sum {
                terms: terms.to_vec(),
            },
        )
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_vec(
            &self.nodes[loss.0].value.shape,
            vec![1.0; self.nodes[loss.0].value.len()],
        ));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut acc = |id: NodeId, g: Tensor| match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf => {}
                &Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (gx, gw, gb) =
                        ops::conv2d_backward(self.value(x), self.value(w), &gy, stride, pad);
                    acc(x, gx);
                    acc(w, gw);
                    acc(b, gb);
                }
                &Op::Deconv2x2 { x, w, b } => {
                    let (gx, gw, gb) = ops::deconv2x2_backward(self.value(x), self.value(w), &gy);
                    acc(x, gx);
                    acc(w, gw);
                    acc(b, gb);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    means,
                    inv_stds,
                } => {
                    let (gx, gg, gbeta) = ops::batch_norm_backward(
                        self.value(*x),
                        self.value(*gamma),
                        means,
                        inv_stds,
                        &gy,
                    );
                    acc(*x, gx);
                    acc(*gamma, gg);
                    acc(*beta, gbeta);
                }
                &Op::LeakyRelu { x, slope } => {
                    acc(x, ops::leaky_relu_backward(self.value(x), slope, &gy));
                }
                &Op::Concat { a, b } => {
                    let na = self.value(a).len();
                    acc(a, Tensor::from_vec(&self.value(a).shape, gy.data[..na].to_vec()));
                    acc(b, Tensor::from_vec(&self.value(b).shape, gy.data[na..].to_vec()));
                }
                &Op::Mul { a, b } => {
                    let (va, vb) = (self.value(a), self.value(b));
                    let ga = gy.data.iter().zip(&vb.data).map(|(g, v)| g * v).collect();
                    let gb = gy.data.iter().zip(&va.data).map(|(g, v)| g * v).collect();
                    acc(a, Tensor::from_vec(&va.shape, ga));
                    acc(b, Tensor::from_vec(&vb.shape, gb));
                }
                &Op::FeSample { fmap, poi, radius } => {
                    let p = self.value(poi);
                    let (gmap, gpoi) = ops::fe_sample_backward(
                        self.value(fmap),
                        (p.data[0], p.data[1]),
                        radius,
                        &gy,
                    );
                    acc(fmap, gmap);
                    acc(poi, Tensor::from_vec(&[2], gpoi.to_vec()));
                }
                &Op::PoiCorrelate { fmap, kernel } => {
                    let (gmap, gker) =
                        ops::poi_correlate_backward(self.value(fmap), self.value(kernel), &gy);
                    acc(fmap, gmap);
                    acc(kernel, gker);
                }
                Op::BceLogits { logits, target } => {
                    let z = self.value(*logits);
                    let n = z.len() as f64;
                    let g = z
                        .data
                        .iter()
                        .zip(target)
                        .map(|(&zv, &p)| gy.data[0] * (ops::sigmoid(zv) - p) / n)
                        .collect();
                    acc(*logits, Tensor::from_vec(&z.shape, g));
                }
                &Op::SoftArgmax { hmap, window } => {
                    let v = self.value(hmap);
                    let (_, _, w) = v.chw();
                    let g = super::poi::soft_argmax_backward(
                        &v.data,
                        w,
                        window,
                        [node.value.data[0], node.value.data[1]],
                        [gy.data[0], gy.data[1]],
                    );
                    acc(hmap, Tensor::from_vec(&v.shape, g));
                }
                &Op::Affine { x, scale } => {
                    let g = gy.data.iter().map(|g| g * scale).collect();
                    acc(x, Tensor::from_vec(&gy.shape, g));
                }
                Op::Triangulate { points_mm, system } => {
                    let up = Vec3::new(gy.data[0], gy.data[1], gy.data[2]);
                    let per_view = triangulate_grad(system, &up)?;
                    for (&id, g) in points_mm.iter().zip(per_view) {
                        acc(id, Tensor::from_vec(&[2], vec![g.x, g.y]));
                    }
                }
                Op::Distance { x, target } => {
                    let v = self.value(*x);
                    let d = node.value.data[0];
                    let g = if d > 0.0 {
                        v.data
                            .iter()
                            .zip(target)
                            .map(|(a, b)| gy.data[0] * (a - b) / d)
                            .collect()
                    } else {
                        vec![0.0; v.len()]
                    };
                    acc(*x, Tensor::from_vec(&v.shape, g));
                }
                Op::Sum { terms } => {
                    for &(id, c) in terms {
                        acc(id, Tensor::scalar(gy.data[0] * c));
                    }
                }
            }
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }
}
