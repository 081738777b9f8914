//! The Siamese feature branch: an encoder/decoder with skip connections that
//! maps an `H × W` image to an `H × W × C` feature map.
//!
//! Encoder block `k`: norm → 3×3 conv, stride 2 → LeakyReLU.
//! Decoder block `k`: norm → 2×2 transposed conv, stride 2 → ReLU, then
//! concatenation with the encoder output of the same resolution (the input
//! image at full resolution). A linear 3×3 head produces the `C` channels.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

use super::ops::Tensor;
use super::poi::{FeatureKernel, FeatureMap, DEFAULT_WINDOW_PX};
use super::tape::{NodeId, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Per-channel statistics of the current image.
    Batch,
    /// Normalization layers are the identity.
    PassThrough,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Feature channels `C`.
    pub out_channels: usize,
    /// Feature kernel radius `K`; kernels are `(2K+1)²`.
    pub kernel_radius: usize,
    pub use_weight: bool,
    pub leaky_slope: f64,
    pub norm: NormMode,
    pub window_px: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            max_channels: 32,
            out_channels: 8,
            kernel_radius: 1,
            use_weight: true,
            leaky_slope: 0.2,
            norm: NormMode::Batch,
            window_px: DEFAULT_WINDOW_PX,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::validation(format!("network.{f}"), m));
        if self.depth < 1 {
            return bad("depth", "must be >= 1");
        }
        if self.base_channels < 1 {
            return bad("base_channels", "must be >= 1");
        }
        if self.max_channels < self.base_channels {
            return bad("max_channels", "must be >= base_channels");
        }
        if self.out_channels < 1 {
            return bad("out_channels", "must be >= 1");
        }
        if self.window_px < 1 {
            return bad("window_px", "must be >= 1");
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad("leaky_slope", "must be finite and >= 0");
        }
        Ok(())
    }

    fn encoder_channels(&self, k: usize) -> usize {
        (self.base_channels << k).min(self.max_channels)
    }

    /// Channels of the skip tensor at level `k` (level 0 is the input image).
    fn skip_channels(&self, k: usize) -> usize {
        if k == 0 {
            1
        } else {
            self.encoder_channels(k - 1)
        }
    }

    fn decoder_out(&self, k: usize) -> usize {
        if k == 0 {
            self.base_channels
        } else {
            self.encoder_channels(k - 1)
        }
    }

    fn decoder_in(&self, k: usize) -> usize {
        if k + 1 == self.depth {
            self.encoder_channels(k)
        } else {
            self.decoder_out(k + 1) + self.skip_channels(k + 1)
        }
    }

    pub fn kernel_side(&self) -> usize {
        2 * self.kernel_radius + 1
    }

    /// Names and shapes of all parameters, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for k in 0..self.depth {
            let cin = self.skip_channels(k);
            let cout = self.encoder_channels(k);
            out.push((format!("enc{k}.norm.gamma"), vec![cin]));
            out.push((format!("enc{k}.norm.beta"), vec![cin]));
            out.push((format!("enc{k}.conv.weight"), vec![cout, cin, 3, 3]));
            out.push((format!("enc{k}.conv.bias"), vec![cout]));
        }
        for k in (0..self.depth).rev() {
            let cin = self.decoder_in(k);
            let cout = self.decoder_out(k);
            out.push((format!("dec{k}.norm.gamma"), vec![cin]));
            out.push((format!("dec{k}.norm.beta"), vec![cin]));
            out.push((format!("dec{k}.deconv.weight"), vec![cin, cout, 2, 2]));
            out.push((format!("dec{k}.deconv.bias"), vec![cout]));
        }
        let head_in = self.decoder_out(0) + self.skip_channels(0);
        out.push(("head.weight".into(), vec![self.out_channels, head_in, 3, 3]));
        out.push(("head.bias".into(), vec![self.out_channels]));
        let s = self.kernel_side();
        out.push(("poi.weight".into(), vec![self.out_channels, s, s]));
        out
    }
}

/// All trainable tensors of one POINT network, including the POI weight `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl NetworkParams {
    pub fn zeros(config: NetworkConfig) -> Self {
        let (names, tensors) = config
            .layout()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .unzip();
        Self {
            config,
            names,
            tensors,
        }
    }

    /// He-normal convolution weights, zero biases, unit norm scales and a
    /// constant POI weight.
    pub fn init<R: Rng>(config: NetworkConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let poi_scale = 1.0 / (config.kernel_side() * config.kernel_side()) as f64;
        for (name, t) in p.names.iter().zip(p.tensors.iter_mut()) {
            if name.ends_with("norm.gamma") {
                t.data.fill(1.0);
            } else if name == "poi.weight" {
                t.data.fill(poi_scale);
            } else if name.ends_with("weight") {
                let fan_in = if name.contains("deconv") {
                    t.shape[0]
                } else {
                    t.shape[1] * t.shape[2] * t.shape[3]
                };
                let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("valid std");
                for v in &mut t.data {
                    *v = normal.sample(rng);
                }
            }
        }
        p
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn poi_weight(&self) -> FeatureKernel {
        FeatureKernel::from_tensor(self.get("poi.weight").expect("poi.weight").clone())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * delta`, tensor by tensor.
    pub fn add_scaled(&mut self, delta: &[Tensor], scale: f64) {
        assert_eq!(delta.len(), self.tensors.len());
        for (t, d) in self.tensors.iter_mut().zip(delta) {
            for (a, b) in t.data.iter_mut().zip(&d.data) {
                *a += scale * b;
            }
        }
    }

    /// Rounds every value to the nearest `f32`, matching the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Registers every tensor as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            config: self.config,
            names: self.names.clone(),
            ids: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }
}

/// Parameter leaves on a particular tape.
pub struct BoundParams {
    pub config: NetworkConfig,
    names: Vec<String>,
    pub ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> NodeId {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[i]
    }
}

pub fn check_input_shape(config: &NetworkConfig, width: usize, height: usize) -> Result<()> {
    let m = 1usize << config.depth;
    if width == 0 || height == 0 || width % m != 0 || height % m != 0 {
        return Err(Error::BadShape(format!(
            "image {width}x{height} must be a nonzero multiple of {m} in both dimensions"
        )));
    }
    Ok(())
}

fn norm(tape: &mut Tape, p: &BoundParams, x: NodeId, prefix: &str) -> NodeId {
    match p.config.norm {
        NormMode::Batch => tape.batch_norm(
            x,
            p.id(&format!("{prefix}.norm.gamma")),
            p.id(&format!("{prefix}.norm.beta")),
        ),
        NormMode::PassThrough => x,
    }
}

/// Records the feature branch on `tape` for an input node of shape `[1, H, W]`.
pub fn forward_features(tape: &mut Tape, p: &BoundParams, input: NodeId) -> Result<NodeId> {
    let cfg = p.config;
    let (c, h, w) = tape.value(input).chw();
    if c != 1 {
        return Err(Error::BadShape(format!("expected 1 input channel, got {c}")));
    }
    check_input_shape(&cfg, w, h)?;
    let mut skips = vec![input];
    let mut x = input;
    for k in 0..cfg.depth {
        let prefix = format!("enc{k}");
        let n = norm(tape, p, x, &prefix);
        let y = tape.conv2d(
            n,
            p.id(&format!("{prefix}.conv.weight")),
            p.id(&format!("{prefix}.conv.bias")),
            2,
            1,
        );
        x = tape.leaky_relu(y, cfg.leaky_slope);
        skips.push(x);
    }
    for k in (0..cfg.depth).rev() {
        let prefix = format!("dec{k}");
        let n = norm(tape, p, x, &prefix);
        let y = tape.deconv2x2(
            n,
            p.id(&format!("{prefix}.deconv.weight")),
            p.id(&format!("{prefix}.deconv.bias")),
        );
        let y = tape.relu(y);
        x = tape.concat(y, skips[k]);
    }
    Ok(tape.conv2d(x, p.id("head.weight"), p.id("head.bias"), 1, 1))
}

pub fn image_tensor(img: &Image) -> Tensor {
    Tensor::from_vec(&[1, img.height, img.width], img.to_f64())
}

/// Feature map of one image through the (shared) branch.
pub fn extract_features(params: &NetworkParams, img: &Image) -> Result<FeatureMap> {
    check_input_shape(&params.config, img.width, img.height)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let input = tape.leaf(image_tensor(img));
    let out = forward_features(&mut tape, &bound, input)?;
    Ok(FeatureMap::from_tensor(tape.value(out).clone()))
}
