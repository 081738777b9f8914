//! Feature kernels at POIs, POI convolution and heatmap-to-POI.

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::imaging::Heatmap;

use super::ops::{self, sigmoid, Tensor};

/// Default radius of the soft-argmax window.
pub const DEFAULT_WINDOW_PX: usize = 8;

/// Per-pixel feature grid, `data[(c * height + row) * width + col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn from_tensor(t: Tensor) -> Self {
        let (channels, height, width) = t.chw();
        Self {
            channels,
            height,
            width,
            data: t.data,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.channels, self.height, self.width], self.data.clone())
    }

    pub fn at(&self, c: usize, col: usize, row: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    /// Feature vector at a pixel.
    pub fn vector(&self, col: usize, row: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.at(c, col, row)).collect()
    }
}

/// `(2K+1) × (2K+1) × C` block of features, `data[(c * side + j) * side + i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureKernel {
    pub channels: usize,
    pub radius: usize,
    pub data: Vec<f64>,
}

impl FeatureKernel {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn from_tensor(t: Tensor) -> Self {
        let (channels, side, _) = t.chw();
        Self {
            channels,
            radius: side / 2,
            data: t.data,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let s = self.side();
        Tensor::from_vec(&[self.channels, s, s], self.data.clone())
    }

    pub fn ones(channels: usize, radius: usize) -> Self {
        let s = 2 * radius + 1;
        Self {
            channels,
            radius,
            data: vec![1.0; channels * s * s],
        }
    }
}

/// Bilinearly samples `fmap` at `poi_px + (dx, dy)` for integer offsets in
/// `[-k, k]²`.
pub fn fe_layer(fmap: &FeatureMap, poi_px: &Vec2, k: usize) -> Result<FeatureKernel> {
    let t = ops::fe_sample(&fmap.to_tensor(), (poi_px.x, poi_px.y), k)
        .map_err(|(dx, dy)| Error::OutOfBounds { dx, dy })?;
    Ok(FeatureKernel::from_tensor(t))
}

/// Cross-correlates `fmap_x` with `W ⊙ kernel` at every pixel (zero padding).
/// With `use_weight` off the weight is all ones.
pub fn poi_convolution(
    fmap_x: &FeatureMap,
    kernel: &FeatureKernel,
    weight: &FeatureKernel,
    use_weight: bool,
) -> Result<Heatmap> {
    if kernel.channels != fmap_x.channels {
        return Err(Error::ChannelMismatch {
            kernel: kernel.channels,
            map: fmap_x.channels,
        });
    }
    let weighted: Vec<f64> = if use_weight {
        if weight.data.len() != kernel.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "weight has {} values, kernel {}",
                weight.data.len(),
                kernel.data.len()
            )));
        }
        kernel.data.iter().zip(&weight.data).map(|(k, w)| k * w).collect()
    } else {
        kernel.data.clone()
    };
    let s = kernel.side();
    let out = ops::poi_correlate(
        &fmap_x.to_tensor(),
        &Tensor::from_vec(&[kernel.channels, s, s], weighted),
    );
    Ok(Heatmap {
        width: fmap_x.width,
        height: fmap_x.height,
        data: out.data,
    })
}

/// σ-weighted centroid over a window around the argmax. Returns the position
/// `(col, row)` and the window as `[col0, row0, col1, row1]` (inclusive).
pub(crate) fn windowed_soft_argmax(
    data: &[f64],
    width: usize,
    height: usize,
    window_px: usize,
) -> Result<(Vec2, [usize; 4])> {
    if window_px < 1 {
        return Err(Error::validation("window_px", "must be >= 1"));
    }
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    let (ax, ay) = (best % width, best / width);
    let window = [
        ax.saturating_sub(window_px),
        ay.saturating_sub(window_px),
        (ax + window_px).min(width - 1),
        (ay + window_px).min(height - 1),
    ];
    let (mut norm, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for row in window[1]..=window[3] {
        for col in window[0]..=window[2] {
            let s = sigmoid(data[row * width + col]);
            norm += s;
            sx += s * col as f64;
            sy += s * row as f64;
        }
    }
    if !(norm >= 1e-12) {
        return Err(Error::DegenerateHeatmap(norm));
    }
    Ok((Vec2::new(sx / norm, sy / norm), window))
}

pub(crate) fn soft_argmax_backward(
    data: &[f64],
    width: usize,
    window: [usize; 4],
    pos: [f64; 2],
    upstream: [f64; 2],
) -> Vec<f64> {
    let mut norm = 0.0;
    for row in window[1]..=window[3] {
        for col in window[0]..=window[2] {
            norm += sigmoid(data[row * width + col]);
        }
    }
    let mut g = vec![0.0; data.len()];
    for row in window[1]..=window[3] {
        for col in window[0]..=window[2] {
            let s = sigmoid(data[row * width + col]);
            let along = (col as f64 - pos[0]) * upstream[0] + (row as f64 - pos[1]) * upstream[1];
            g[row * width + col] = s * (1.0 - s) * along / norm;
        }
    }
    g
}

/// Tracked POI `(col, row)` from a pre-sigmoid heatmap.
pub fn heatmap_to_poi(hmap: &Heatmap, window_px: usize) -> Result<Vec2> {
    windowed_soft_argmax(&hmap.data, hmap.width, hmap.height, window_px).map(|(p, _)| p)
}

/// Gradient of `upstream · heatmap_to_poi(hmap)` with respect to the heatmap.
pub fn heatmap_to_poi_grad(hmap: &Heatmap, window_px: usize, upstream: &Vec2) -> Result<Heatmap> {
    let (pos, window) = windowed_soft_argmax(&hmap.data, hmap.width, hmap.height, window_px)?;
    Ok(Heatmap {
        width: hmap.width,
        height: hmap.height,
        data: soft_argmax_backward(
            &hmap.data,
            hmap.width,
            window,
            [pos.x, pos.y],
            [upstream.x, upstream.y],
        ),
    })
}
