//! 2D image containers, intensity preprocessing and ground-truth heatmaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;

/// Row-major single-channel image; `data[row * width + col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixel_spacing_mm: f64,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, pixel_spacing_mm: f64) -> Self {
        Self {
            width,
            height,
            pixel_spacing_mm,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(
        width: usize,
        height: usize,
        pixel_spacing_mm: f64,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "image {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("image.data", "values must be finite"));
        }
        Ok(Self {
            width,
            height,
            pixel_spacing_mm,
            data,
        })
    }

    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Per-pixel real-valued map on an image grid. Used both for network
/// similarity scores (pre-sigmoid) and for target probability maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Position `(col, row)` of the first maximal value.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }
}

/// `max(img) - img`.
pub fn invert_intensity(img: &Image) -> Image {
    let max = img.max();
    Image {
        data: img.data.iter().map(|&v| max - v).collect(),
        ..img.clone()
    }
}

/// Histogram equalization onto `[0, 1]` with `bins` equal-width bins between
/// the image min and max. A constant image is returned unchanged.
pub fn hist_equalize(img: &Image, bins: usize) -> Result<Image> {
    if bins < 2 {
        return Err(Error::validation("bins", "must be >= 2"));
    }
    let (lo, hi) = (img.min() as f64, img.max() as f64);
    if img.data.is_empty() || hi <= lo {
        return Ok(img.clone());
    }
    let bin_of = |v: f32| -> usize {
        let b = ((v as f64 - lo) / (hi - lo) * bins as f64).floor() as usize;
        b.min(bins - 1)
    };
    let mut hist = vec![0usize; bins];
    for &v in &img.data {
        hist[bin_of(v)] += 1;
    }
    let n = img.data.len() as f64;
    let mut cdf = vec![0.0f64; bins];
    let mut acc = 0usize;
    for (c, h) in cdf.iter_mut().zip(&hist) {
        acc += h;
        *c = acc as f64 / n;
    }
    Ok(Image {
        data: img.data.iter().map(|&v| cdf[bin_of(v)] as f32).collect(),
        ..img.clone()
    })
}

/// Intensity preprocessing applied to both images before tracking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Invert intensities first (raw detector images are bright where
    /// attenuation is low; DRRs are the opposite).
    pub invert: bool,
    /// Histogram-equalization bins; `None` skips equalization.
    pub equalize_bins: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            invert: false,
            equalize_bins: Some(256),
        }
    }
}

pub fn preprocess(img: &Image, cfg: &PreprocessConfig) -> Result<Image> {
    let img = if cfg.invert {
        invert_intensity(img)
    } else {
        img.clone()
    };
    match cfg.equalize_bins {
        Some(bins) => hist_equalize(&img, bins),
        None => Ok(img),
    }
}

pub const TARGET_EPS: f64 = 1e-6;
pub const DEFAULT_TARGET_SIGMA_PX: f64 = 2.0;

/// Gaussian probability map centered on `poi_px = (col, row)`, clamped to
/// `[ε, 1 - ε]`.
pub fn gaussian_target(poi_px: &Vec2, sigma_px: f64, width: usize, height: usize) -> Heatmap {
    assert!(sigma_px > 0.0, "sigma_px must be positive");
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    let mut data = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let dx = col as f64 - poi_px.x;
            let dy = row as f64 - poi_px.y;
            let p = (-(dx * dx + dy * dy) * inv).exp();
            data.push(p.clamp(TARGET_EPS, 1.0 - TARGET_EPS));
        }
    }
    Heatmap {
        width,
        height,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(data: Vec<f32>, w: usize) -> Image {
        let h = data.len() / w;
        Image::from_data(w, h, 1.0, data).unwrap()
    }

    #[test]
    fn invert_constant_is_zero() {
        let out = invert_intensity(&img(vec![3.0; 6], 3));
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invert_two_levels() {
        let out = invert_intensity(&img(vec![0.0, 10.0], 2));
        assert_eq!(out.data, vec![10.0, 0.0]);
    }

    #[test]
    fn double_inversion_restores_shifted_original() {
        let src = img(vec![2.0, 5.0, 3.5, 9.0], 2);
        let back = invert_intensity(&invert_intensity(&src));
        let min = src.min();
        for (a, b) in src.data.iter().zip(&back.data) {
            assert_eq!(a - min, *b);
        }
    }

    #[test]
    fn equalize_constant_is_fixed_point() {
        let src = img(vec![4.0; 9], 3);
        assert_eq!(hist_equalize(&src, 256).unwrap(), src);
    }

    #[test]
    fn equalize_rejects_single_bin() {
        assert!(hist_equalize(&img(vec![0.0, 1.0], 2), 1).is_err());
    }

    #[test]
    fn equalize_two_levels_half_split() {
        let src = img(vec![1.0, 1.0, 7.0, 7.0], 2);
        // brute-force: fraction of pixels <= each level
        let oracle: Vec<f32> = src
            .data
            .iter()
            .map(|&v| src.data.iter().filter(|&&u| u <= v).count() as f32 / 4.0)
            .collect();
        let out = hist_equalize(&src, 256).unwrap();
        assert_eq!(out.data, oracle);
        assert_eq!(out.data, vec![0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn target_values() {
        let t = gaussian_target(&Vec2::new(10.0, 10.0), 2.0, 64, 64);
        assert_eq!(t.get(10, 10), 1.0 - TARGET_EPS);
        assert!((t.get(12, 10) - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(t.get(30, 10), TARGET_EPS);
    }

    #[test]
    fn target_is_radially_symmetric() {
        let t = gaussian_target(&Vec2::new(16.0, 16.0), 3.0, 33, 33);
        for (dx, dy) in [(3, 4), (4, 3), (-3, 4), (5, 0), (0, -5), (-4, -3)] {
            let v = t.get((16 + dx) as usize, (16 + dy) as usize);
            assert_eq!(v, t.get(21, 16));
        }
    }

    proptest! {
        #[test]
        fn equalize_is_monotone(values in proptest::collection::vec(-50.0f32..50.0, 16)) {
            let src = img(values, 4);
            let out = hist_equalize(&src, 32).unwrap();
            for i in 0..16 {
                for j in 0..16 {
                    if src.data[i] <= src.data[j] {
                        prop_assert!(out.data[i] <= out.data[j]);
                    }
                }
            }
        }

        #[test]
        fn equalize_is_nearly_idempotent(values in proptest::collection::vec(0.0f32..100.0, 64), bins in 2usize..300) {
            let once = hist_equalize(&img(values, 8), bins).unwrap();
            let twice = hist_equalize(&once, bins).unwrap();
            for (a, b) in once.data.iter().zip(&twice.data) {
                prop_assert!(((a - b).abs() as f64) < 1.0 / bins as f64 + 1e-6);
            }
        }
    }
}
