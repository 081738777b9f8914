//! Forward and backward kernels on `[channels, height, width]` tensors.
//!
//! Every kernel parallelizes only over independent outputs and sums in a
//! fixed order, so results are bitwise independent of the thread count.

use rayon::prelude::*;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} values",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected [C, H, W], got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Cross-correlation with weights `[co, ci, k, k]`, bias `[co]`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = x.chw();
    let (co, k) = (w.shape[0], w.shape[2]);
    assert_eq!(w.shape[1], ci, "conv input channels");
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(wd, k, stride, pad));
    let mut out = Tensor::zeros(&[co, ho, wo]);
    out.data
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(o, plane)| {
            plane.fill(b.data[o]);
            for i in 0..ci {
                let src = &x.data[i * h * wd..(i + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w.data[((o * ci + i) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * wd..(iy as usize + 1) * wd];
                            let dst = &mut plane[oy * wo..(oy + 1) * wo];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    *d += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Returns `(dx, dw, db)` for [`conv2d`] given the output gradient.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (ci, h, wd) = x.chw();
    let (co, k) = (w.shape[0], w.shape[2]);
    let (_, ho, wo) = gy.chw();

    let mut gx = Tensor::zeros(&x.shape);
    gx.data
        .par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(i, plane)| {
            for o in 0..co {
                let g = &gy.data[o * ho * wo..(o + 1) * ho * wo];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w.data[((o * ci + i) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut plane[iy as usize * wd..(iy as usize + 1) * wd];
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            for (ox, gv) in grow.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    dst[ix as usize] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut gw = Tensor::zeros(&w.shape);
    gw.data
        .par_chunks_mut(ci * k * k)
        .enumerate()
        .for_each(|(o, wo_slice)| {
            let g = &gy.data[o * ho * wo..(o + 1) * ho * wo];
            for i in 0..ci {
                let src = &x.data[i * h * wd..(i + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * wd..(iy as usize + 1) * wd];
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            for (ox, gv) in grow.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    acc += gv * row[ix as usize];
                                }
                            }
                        }
                        wo_slice[(i * k + ky) * k + kx] = acc;
                    }
                }
            }
        });

    let gb = Tensor::from_vec(
        &[co],
        gy.data.chunks(ho * wo).map(|c| c.iter().sum()).collect(),
    );
    (gx, gw, gb)
}

/// Transposed convolution with a 2×2 kernel and stride 2 (non-overlapping),
/// weights `[ci, co, 2, 2]`. Doubles the spatial size.
pub fn deconv2x2(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (ci, h, wd) = x.chw();
    let co = w.shape[1];
    assert_eq!(w.shape[0], ci, "deconv input channels");
    let (ho, wo) = (2 * h, 2 * wd);
    let mut out = Tensor::zeros(&[co, ho, wo]);
    out.data
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(o, plane)| {
            plane.fill(b.data[o]);
            for i in 0..ci {
                let src = &x.data[i * h * wd..(i + 1) * h * wd];
                let wk = &w.data[(i * co + o) * 4..(i * co + o) * 4 + 4];
                for y in 0..h {
                    for xx in 0..wd {
                        let v = src[y * wd + xx];
                        plane[(2 * y) * wo + 2 * xx] += wk[0] * v;
                        plane[(2 * y) * wo + 2 * xx + 1] += wk[1] * v;
                        plane[(2 * y + 1) * wo + 2 * xx] += wk[2] * v;
                        plane[(2 * y + 1) * wo + 2 * xx + 1] += wk[3] * v;
                    }
                }
            }
        });
    out
}

pub fn deconv2x2_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (_, h, wd) = x.chw();
    let co = w.shape[1];
    let wo = 2 * wd;
    let plane = 4 * h * wd;

    let mut gx = Tensor::zeros(&x.shape);
    gx.data
        .par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(i, dst)| {
            for o in 0..co {
                let g = &gy.data[o * plane..(o + 1) * plane];
                let wk = &w.data[(i * co + o) * 4..(i * co + o) * 4 + 4];
                for y in 0..h {
                    for xx in 0..wd {
                        dst[y * wd + xx] += wk[0] * g[(2 * y) * wo + 2 * xx]
                            + wk[1] * g[(2 * y) * wo + 2 * xx + 1]
                            + wk[2] * g[(2 * y + 1) * wo + 2 * xx]
                            + wk[3] * g[(2 * y + 1) * wo + 2 * xx + 1];
                    }
                }
            }
        });

    let mut gw = Tensor::zeros(&w.shape);
    gw.data
        .par_chunks_mut(co * 4)
        .enumerate()
        .for_each(|(i, wslice)| {
            let src = &x.data[i * h * wd..(i + 1) * h * wd];
            for o in 0..co {
                let g = &gy.data[o * plane..(o + 1) * plane];
                let mut acc = [0.0f64; 4];
                for y in 0..h {
                    for xx in 0..wd {
                        let v = src[y * wd + xx];
                        acc[0] += v * g[(2 * y) * wo + 2 * xx];
                        acc[1] += v * g[(2 * y) * wo + 2 * xx + 1];
                        acc[2] += v * g[(2 * y + 1) * wo + 2 * xx];
                        acc[3] += v * g[(2 * y + 1) * wo + 2 * xx + 1];
                    }
                }
                wslice[o * 4..o * 4 + 4].copy_from_slice(&acc);
            }
        });

    let gb = Tensor::from_vec(&[co], gy.data.chunks(plane).map(|c| c.iter().sum()).collect());
    (gx, gw, gb)
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel normalization over the spatial positions of one image,
/// followed by the affine `gamma * x̂ + beta`. Returns the output and the
/// per-channel `(mean, 1/std)` needed by the backward pass.
pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (c, h, w) = x.chw();
    let n = (h * w) as f64;
    let mut out = Tensor::zeros(&x.shape);
    let mut means = Vec::with_capacity(c);
    let mut inv_stds = Vec::with_capacity(c);
    for ch in 0..c {
        let src = &x.data[ch * h * w..(ch + 1) * h * w];
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + BN_EPS).sqrt();
        let dst = &mut out.data[ch * h * w..(ch + 1) * h * w];
        for (d, s) in dst.iter_mut().zip(src) {
            *d = gamma.data[ch] * (s - mean) * inv_std + beta.data[ch];
        }
        means.push(mean);
        inv_stds.push(inv_std);
    }
    (out, means, inv_stds)
}

pub fn batch_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    means: &[f64],
    inv_stds: &[f64],
    gy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = x.chw();
    let n = (h * w) as f64;
    let mut gx = Tensor::zeros(&x.shape);
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let range = ch * h * w..(ch + 1) * h * w;
        let src = &x.data[range.clone()];
        let g = &gy.data[range.clone()];
        let (mean, inv_std) = (means[ch], inv_stds[ch]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for (gv, s) in g.iter().zip(src) {
            let xhat = (s - mean) * inv_std;
            sum_g += gv;
            sum_gx += gv * xhat;
        }
        ggamma.data[ch] = sum_gx;
        gbeta.data[ch] = sum_g;
        let scale = gamma.data[ch] * inv_std;
        for ((d, gv), s) in gx.data[range].iter_mut().zip(g).zip(src) {
            let xhat = (s - mean) * inv_std;
            *d = scale * (gv - sum_g / n - xhat * sum_gx / n);
        }
    }
    (gx, ggamma, gbeta)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect(),
    }
}

pub fn leaky_relu_backward(x: &Tensor, slope: f64, gy: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&gy.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
            .collect(),
    }
}

/// Concatenates two `[C, H, W]` tensors along channels.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, h, w) = a.chw();
    let (cb, hb, wb) = b.chw();
    assert_eq!((h, w), (hb, wb), "concat spatial sizes differ");
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor::from_vec(&[ca + cb, h, w], data)
}

/// Bilinear sample of all channels at `(x, y)` with zero weight on
/// out-of-range neighbors. The caller guarantees the point lies inside
/// `[0, w-1] × [0, h-1]`.
fn bilinear_taps(x: f64, y: f64, w: usize, h: usize) -> [(usize, usize, f64, f64, f64); 4] {
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    // (col, row, weight, d weight/dx, d weight/dy)
    [
        (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (x1, y0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (x0, y1, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (x1, y1, fx * fy, fy, fx),
    ]
}

/// Samples `fmap` at `poi + (dx, dy)` for all `dx, dy ∈ [-k, k]`; output
/// `[C, 2k+1, 2k+1]`. Returns `Err((dx, dy))` for the first offset whose
/// sample point leaves the map.
pub fn fe_sample(fmap: &Tensor, poi: (f64, f64), k: usize) -> Result<Tensor, (i64, i64)> {
    let (c, h, w) = fmap.chw();
    let side = 2 * k + 1;
    let mut out = Tensor::zeros(&[c, side, side]);
    for j in 0..side {
        for i in 0..side {
            let (dx, dy) = (i as i64 - k as i64, j as i64 - k as i64);
            let (sx, sy) = (poi.0 + dx as f64, poi.1 + dy as f64);
            if !(sx >= 0.0 && sy >= 0.0 && sx <= (w - 1) as f64 && sy <= (h - 1) as f64) {
                return Err((dx, dy));
            }
            for (col, row, wt, _, _) in bilinear_taps(sx, sy, w, h) {
                if wt == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    out.data[(ch * side + j) * side + i] += wt * fmap.data[(ch * h + row) * w + col];
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`fe_sample`] with respect to the map and the POI position.
pub fn fe_sample_backward(
    fmap: &Tensor,
    poi: (f64, f64),
    k: usize,
    gy: &Tensor,
) -> (Tensor, [f64; 2]) {
    let (c, h, w) = fmap.chw();
    let side = 2 * k + 1;
    let mut gmap = Tensor::zeros(&fmap.shape);
    let mut gpoi = [0.0f64; 2];
    for j in 0..side {
        for i in 0..side {
            let (sx, sy) = (poi.0 + i as f64 - k as f64, poi.1 + j as f64 - k as f64);
            for (col, row, wt, dwx, dwy) in bilinear_taps(sx, sy, w, h) {
                for ch in 0..c {
                    let g = gy.data[(ch * side + j) * side + i];
                    let v = fmap.data[(ch * h + row) * w + col];
                    gmap.data[(ch * h + row) * w + col] += wt * g;
                    gpoi[0] += dwx * v * g;
                    gpoi[1] += dwy * v * g;
                }
            }
        }
    }
    (gmap, gpoi)
}

/// `out(x) = Σ_{c, d} fmap(c, x + d) · kernel(c, d)` over `d ∈ [-k, k]²`,
/// zero padding; output `[1, H, W]`.
pub fn poi_correlate(fmap: &Tensor, kernel: &Tensor) -> Tensor {
    let (c, h, w) = fmap.chw();
    let side = kernel.shape[1];
    let k = side / 2;
    let mut out = Tensor::zeros(&[1, h, w]);
    out.data.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for ch in 0..c {
            for j in 0..side {
                let sy = y as isize + j as isize - k as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let src = &fmap.data[(ch * h + sy as usize) * w..(ch * h + sy as usize + 1) * w];
                for i in 0..side {
                    let kv = kernel.data[(ch * side + j) * side + i];
                    if kv == 0.0 {
                        continue;
                    }
                    let off = i as isize - k as isize;
                    let lo = (-off).max(0) as usize;
                    let hi = (w as isize - off).min(w as isize) as usize;
                    for x in lo..hi {
                        row[x] += kv * src[(x as isize + off) as usize];
                    }
                }
            }
        }
    });
    out
}

pub fn poi_correlate_backward(fmap: &Tensor, kernel: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let (_, h, w) = fmap.chw();
    let side = kernel.shape[1];
    let k = side / 2;
    let mut gmap = Tensor::zeros(&fmap.shape);
    gmap.data
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(ch, plane)| {
            for j in 0..side {
                for i in 0..side {
                    let kv = kernel.data[(ch * side + j) * side + i];
                    if kv == 0.0 {
                        continue;
                    }
                    let (oy, ox) = (j as isize - k as isize, i as isize - k as isize);
                    for y in 0..h as isize {
                        let sy = y + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let g = &gy.data[y as usize * w..(y as usize + 1) * w];
                        let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        let lo = (-ox).max(0) as usize;
                        let hi = (w as isize - ox).min(w as isize) as usize;
                        for x in lo..hi {
                            dst[(x as isize + ox) as usize] += kv * g[x];
                        }
                    }
                }
            }
        });
    let mut gker = Tensor::zeros(&kernel.shape);
    gker.data
        .par_chunks_mut(side * side)
        .enumerate()
        .for_each(|(ch, kslice)| {
            for j in 0..side {
                for i in 0..side {
                    let (oy, ox) = (j as isize - k as isize, i as isize - k as isize);
                    let mut acc = 0.0;
                    for y in 0..h as isize {
                        let sy = y + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let g = &gy.data[y as usize * w..(y as usize + 1) * w];
                        let src = &fmap.data
                            [(ch * h + sy as usize) * w..(ch * h + sy as usize + 1) * w];
                        let lo = (-ox).max(0) as usize;
                        let hi = (w as isize - ox).min(w as isize) as usize;
                        for x in lo..hi {
                            acc += g[x] * src[(x as isize + ox) as usize];
                        }
                    }
                    kslice[j * side + i] = acc;
                }
            }
        });
    (gmap, gker)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean over elements of `BCE(σ(z), p) = softplus(z) - p z`.
pub fn bce_with_logits(logits: &[f64], target: &[f64]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(target)
        .map(|(&z, &p)| softplus(z) - p * z)
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::from_vec(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data[4] = 1.0;
        let y = conv2d(&x, &w, &Tensor::from_vec(&[1], vec![0.5]), 1, 1);
        assert_eq!(y.data, x.data.iter().map(|v| v + 0.5).collect::<Vec<_>>());
    }

    #[test]
    fn strided_conv_shape() {
        let x = Tensor::zeros(&[2, 8, 6]);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[3]), 2, 1);
        assert_eq!(y.shape, vec![3, 4, 3]);
    }

    #[test]
    fn deconv_spreads_each_pixel() {
        let x = Tensor::from_vec(&[1, 1, 2], vec![1.0, 2.0]);
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = deconv2x2(&x, &w, &Tensor::zeros(&[1]));
        assert_eq!(y.shape, vec![1, 2, 4]);
        assert_eq!(y.data, vec![1.0, 2.0, 2.0, 4.0, 3.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }
}
