//! Forward and backward kernels over raw NHWC buffers.
//!
//! These are the numeric cores behind the [`Graph`](super::Graph) ops. They
//! take plain slices so tests and oracles can drive them directly.

use super::gemm::{gemm, Mat};
use super::Padding;
use crate::error::{Error, Result};

/// Resolved shape arithmetic for one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let needed = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, needed / 2)
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [batch, in_h, in_w, in_c] = *input_shape else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be NHWC, got {input_shape:?}"),
            ));
        };
        let [k_h, k_w, k_in, out_c] = *kernel_shape else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be [kh, kw, cin, cout], got {kernel_shape:?}"),
            ));
        };
        if k_in != in_c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel axis 2 (c_in = {k_in}) != input axis 3 (channels = {in_c})"),
            ));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be at least 1"));
        }
        if k_h == 0 || k_w == 0 {
            return Err(Error::shape("conv2d", "kernel spatial size must be positive"));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if k_h > in_h || k_w > in_w {
                    return Err(Error::shape(
                        "conv2d",
                        format!(
                            "kernel {k_h}x{k_w} larger than input axes 1-2 ({in_h}x{in_w}) under valid padding"
                        ),
                    ));
                }
                ((in_h - k_h) / stride + 1, (in_w - k_w) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let (oh, pt) = same_padding(in_h, k_h, stride);
                let (ow, pl) = same_padding(in_w, k_w, stride);
                (oh, ow, pt, pl)
            }
        };
        Ok(Self {
            batch,
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_c,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, self.out_c]
    }

    fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    /// A 1×1 stride-1 kernel reads the input as its own patch matrix.
    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1
    }

    fn im2col(&self, image: &[f32], col: &mut [f32]) {
        let c = self.in_c;
        let row_len = self.patch_len();
        let span = self.k_w * c;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut col[(oy * self.out_w + ox) * row_len..][..row_len];
                let ix0 = (ox * self.stride) as isize - self.pad_left as isize;
                let interior = ix0 >= 0 && ix0 as usize + self.k_w <= self.in_w;
                for ky in 0..self.k_h {
                    let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                    let dst_row = &mut row[ky * span..][..span];
                    if iy < 0 || iy >= self.in_h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let line = iy as usize * self.in_w;
                    if interior {
                        // whole kernel row is in bounds: one contiguous copy
                        let src = (line + ix0 as usize) * c;
                        dst_row.copy_from_slice(&image[src..src + span]);
                        continue;
                    }
                    for kx in 0..self.k_w {
                        let ix = ix0 + kx as isize;
                        let dst = &mut dst_row[kx * c..][..c];
                        if ix < 0 || ix >= self.in_w as isize {
                            dst.fill(0.0);
                        } else {
                            let src = (line + ix as usize) * c;
                            dst.copy_from_slice(&image[src..src + c]);
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f32], image: &mut [f32]) {
        let c = self.in_c;
        let row_len = self.patch_len();
        let span = self.k_w * c;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &col[(oy * self.out_w + ox) * row_len..][..row_len];
                let ix0 = (ox * self.stride) as isize - self.pad_left as isize;
                let interior = ix0 >= 0 && ix0 as usize + self.k_w <= self.in_w;
                for ky in 0..self.k_h {
                    let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    let line = iy as usize * self.in_w;
                    let src_row = &row[ky * span..][..span];
                    if interior {
                        let dst = (line + ix0 as usize) * c;
                        for (d, s) in image[dst..dst + span].iter_mut().zip(src_row) {
                            *d += s;
                        }
                        continue;
                    }
                    for kx in 0..self.k_w {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        let dst = (line + ix as usize) * c;
                        for (d, s) in image[dst..dst + c].iter_mut().zip(&src_row[kx * c..][..c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(geo: &ConvGeometry, input: &[f32], kernel: &[f32], bias: &[f32]) -> Vec<f32> {
    let m = geo.out_pixels();
    let k = geo.patch_len();
    let n = geo.out_c;
    let mut out = vec![0.0; geo.batch * m * n];
    let mut col = if geo.is_pointwise() { Vec::new() } else { vec![0.0; m * k] };
    for (b, out_b) in out.chunks_exact_mut(m * n).enumerate() {
        let image = &input[b * geo.in_len()..][..geo.in_len()];
        let patches = if geo.is_pointwise() {
            image
        } else {
            geo.im2col(image, &mut col);
            &col
        };
        for row in out_b.chunks_exact_mut(n) {
            row.copy_from_slice(bias);
        }
        gemm(Mat::new(patches, m, k), Mat::new(kernel, k, n), 1.0, out_b);
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

pub fn conv2d_backward(
    geo: &ConvGeometry,
    input: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    need_input_grad: bool,
) -> ConvGrads {
    let m = geo.out_pixels();
    let k = geo.patch_len();
    let n = geo.out_c;
    let mut d_kernel = vec![0.0; k * n];
    let mut d_bias = vec![0.0; n];
    let mut d_input = need_input_grad.then(|| vec![0.0; input.len()]);
    let mut col = if geo.is_pointwise() { Vec::new() } else { vec![0.0; m * k] };
    let mut d_col = vec![0.0; if need_input_grad { m * k } else { 0 }];

    for b in 0..geo.batch {
        let image = &input[b * geo.in_len()..][..geo.in_len()];
        let g = &grad_out[b * m * n..][..m * n];
        for row in g.chunks_exact(n) {
            for (acc, v) in d_bias.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let patches = if geo.is_pointwise() {
            image
        } else {
            geo.im2col(image, &mut col);
            &col
        };
        gemm(Mat::new(patches, m, k).t(), Mat::new(g, m, n), 1.0, &mut d_kernel);

        if let Some(d_input) = d_input.as_mut() {
            let d_image = &mut d_input[b * geo.in_len()..][..geo.in_len()];
            if geo.is_pointwise() {
                gemm(Mat::new(g, m, n), Mat::new(kernel, k, n).t(), 1.0, d_image);
            } else {
                gemm(Mat::new(g, m, n), Mat::new(kernel, k, n).t(), 0.0, &mut d_col);
                geo.col2im_add(&d_col, d_image);
            }
        }
    }
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}

/// 2×2 stride-2 max pooling. Odd trailing rows/columns are dropped.
/// Returns the pooled values and, per output cell, the flat input index of
/// the winning element.
pub fn maxpool2_forward(shape: &[usize], input: &[f32]) -> (Vec<usize>, Vec<f32>, Vec<u32>) {
    let [n, h, w, c] = *shape else {
        unreachable!("caller validated NHWC")
    };
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(out.capacity());
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_idx = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = input[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
    (vec![n, oh, ow, c], out, argmax)
}

pub fn maxpool2_backward(input_len: usize, argmax: &[u32], grad_out: &[f32]) -> Vec<f32> {
    let mut d = vec![0.0; input_len];
    for (&idx, g) in argmax.iter().zip(grad_out) {
        d[idx as usize] += g;
    }
    d
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2_forward(shape: &[usize], input: &[f32]) -> (Vec<usize>, Vec<f32>) {
    let [n, h, w, c] = *shape else {
        unreachable!("caller validated NHWC")
    };
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((b * h + oy / 2) * w + ox / 2) * c;
                let dst = ((b * oh + oy) * ow + ox) * c;
                out[dst..dst + c].copy_from_slice(&input[src..src + c]);
            }
        }
    }
    (vec![n, oh, ow, c], out)
}

pub fn upsample2_backward(shape: &[usize], grad_out: &[f32]) -> Vec<f32> {
    let [n, h, w, c] = *shape else {
        unreachable!("caller validated NHWC")
    };
    let (oh, ow) = (2 * h, 2 * w);
    let mut d = vec![0.0; n * h * w * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((b * h + oy / 2) * w + ox / 2) * c;
                let src = ((b * oh + oy) * ow + ox) * c;
                for (acc, g) in d[dst..dst + c].iter_mut().zip(&grad_out[src..src + c]) {
                    *acc += g;
                }
            }
        }
    }
    d
}

/// `x · W + b` for `x: batch × features`, `W: features × units`.
pub fn dense_forward(input: &[f32], weights: &[f32], bias: &[f32], batch: usize, features: usize) -> Vec<f32> {
    let units = bias.len();
    let mut out = Vec::with_capacity(batch * units);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    gemm(
        Mat::new(input, batch, features),
        Mat::new(weights, features, units),
        1.0,
        &mut out,
    );
    out
}

pub struct DenseGrads {
    pub input: Option<Vec<f32>>,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

pub fn dense_backward(
    input: &[f32],
    weights: &[f32],
    grad_out: &[f32],
    batch: usize,
    features: usize,
    need_input_grad: bool,
) -> DenseGrads {
    let units = weights.len() / features.max(1);
    let mut d_w = vec![0.0; features * units];
    gemm(
        Mat::new(input, batch, features).t(),
        Mat::new(grad_out, batch, units),
        0.0,
        &mut d_w,
    );
    let mut d_b = vec![0.0; units];
    for row in grad_out.chunks_exact(units) {
        for (acc, g) in d_b.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let d_x = need_input_grad.then(|| {
        let mut d = vec![0.0; batch * features];
        gemm(
            Mat::new(grad_out, batch, units),
            Mat::new(weights, features, units).t(),
            0.0,
            &mut d,
        );
        d
    });
    DenseGrads {
        input: d_x,
        weights: d_w,
        bias: d_b,
    }
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows(input: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; input.len()];
    for (row, dst) in input.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            sum += *d as f64;
        }
        let inv = (1.0 / sum) as f32;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-channel statistics of an NHWC buffer over `N × H × W` (biased variance).
pub fn channel_moments(input: &[f32], channels: usize) -> (Vec<f32>, Vec<f32>) {
    let count = (input.len() / channels).max(1) as f64;
    let mut sum = vec![0.0f64; channels];
    for px in input.chunks_exact(channels) {
        for (s, &v) in sum.iter_mut().zip(px) {
            *s += v as f64;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let mut sq = vec![0.0f64; channels];
    for px in input.chunks_exact(channels) {
        for ((s, &v), m) in sq.iter_mut().zip(px).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    (
        mean.iter().map(|&m| m as f32).collect(),
        sq.iter().map(|s| (s / count) as f32).collect(),
    )
}

pub struct NormOutput {
    pub out: Vec<f32>,
    pub normalized: Vec<f32>,
    pub inv_std: Vec<f32>,
}

pub fn normalize_channels(
    input: &[f32],
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> NormOutput {
    let c = mean.len();
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = vec![0.0; input.len()];
    let mut out = vec![0.0; input.len()];
    for ((px, nx), ox) in input
        .chunks_exact(c)
        .zip(normalized.chunks_exact_mut(c))
        .zip(out.chunks_exact_mut(c))
    {
        for ch in 0..c {
            let xh = (px[ch] - mean[ch]) * inv_std[ch];
            nx[ch] = xh;
            ox[ch] = gamma[ch] * xh + beta[ch];
        }
    }
    NormOutput {
        out,
        normalized,
        inv_std,
    }
}

pub struct NormGrads {
    pub input: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

/// Backward pass of channel normalization. With `batch_stats` the moments
/// are treated as functions of the input (training mode); otherwise they
/// are constants (inference mode).
pub fn normalize_channels_backward(
    grad_out: &[f32],
    normalized: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    batch_stats: bool,
) -> NormGrads {
    let c = gamma.len();
    let count = (grad_out.len() / c) as f32;
    let mut d_gamma = vec![0.0f32; c];
    let mut d_beta = vec![0.0f32; c];
    for (g, xh) in grad_out.chunks_exact(c).zip(normalized.chunks_exact(c)) {
        for ch in 0..c {
            d_beta[ch] += g[ch];
            d_gamma[ch] += g[ch] * xh[ch];
        }
    }
    let mut d_input = vec![0.0; grad_out.len()];
    for ((dx, g), xh) in d_input
        .chunks_exact_mut(c)
        .zip(grad_out.chunks_exact(c))
        .zip(normalized.chunks_exact(c))
    {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            dx[ch] = if batch_stats {
                scale * (g[ch] - d_beta[ch] / count - xh[ch] * d_gamma[ch] / count)
            } else {
                scale * g[ch]
            };
        }
    }
    NormGrads {
        input: d_input,
        gamma: d_gamma,
        beta: d_beta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn conv_reference(geo: &ConvGeometry, input: &[f32], kernel: &[f32], bias: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; geo.batch * geo.out_h * geo.out_w * geo.out_c];
        for b in 0..geo.batch {
            for oy in 0..geo.out_h {
                for ox in 0..geo.out_w {
                    for co in 0..geo.out_c {
                        let mut acc = bias[co] as f64;
                        for ky in 0..geo.k_h {
                            for kx in 0..geo.k_w {
                                let iy = (oy * geo.stride + ky) as isize - geo.pad_top as isize;
                                let ix = (ox * geo.stride + kx) as isize - geo.pad_left as isize;
                                if iy < 0 || ix < 0 || iy >= geo.in_h as isize || ix >= geo.in_w as isize {
                                    continue;
                                }
                                for ci in 0..geo.in_c {
                                    let x = input[((b * geo.in_h + iy as usize) * geo.in_w + ix as usize)
                                        * geo.in_c
                                        + ci];
                                    let w = kernel[((ky * geo.k_w + kx) * geo.in_c + ci) * geo.out_c + co];
                                    acc += (x * w) as f64;
                                }
                            }
                        }
                        out[((b * geo.out_h + oy) * geo.out_w + ox) * geo.out_c + co] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn pseudo(len: usize, salt: f32) -> Vec<f32> {
        (0..len).map(|i| ((i as f32 + salt) * 0.7391).sin()).collect()
    }

    #[test]
    fn conv_matches_nested_loops_across_strides_and_padding() {
        for (stride, padding, h, w) in [
            (1, Padding::Same, 7, 6),
            (2, Padding::Same, 7, 6),
            (1, Padding::Valid, 5, 5),
            (2, Padding::Valid, 8, 7),
            (3, Padding::Same, 9, 4),
        ] {
            let geo = ConvGeometry::new(&[2, h, w, 3], &[3, 3, 3, 4], stride, padding).unwrap();
            let x = pseudo(2 * h * w * 3, 0.1);
            let k = pseudo(3 * 3 * 3 * 4, 1.3);
            let b = pseudo(4, 2.0);
            let got = conv2d_forward(&geo, &x, &k, &b);
            let want = conv_reference(&geo, &x, &k, &b);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-5, "stride {stride} {padding:?}");
            }
        }
    }

    #[test]
    fn same_padding_output_sizes() {
        let geo = ConvGeometry::new(&[1, 400, 400, 3], &[3, 3, 3, 8], 1, Padding::Same).unwrap();
        assert_eq!(geo.output_shape(), vec![1, 400, 400, 8]);
        let geo = ConvGeometry::new(&[1, 64, 64, 3], &[3, 3, 3, 8], 2, Padding::Same).unwrap();
        assert_eq!(geo.output_shape(), vec![1, 32, 32, 8]);
    }

    #[test]
    fn conv_reports_offending_axes() {
        let err = ConvGeometry::new(&[1, 4, 4, 2], &[3, 3, 3, 1], 1, Padding::Same).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("c_in = 3") && msg.contains("channels = 2"), "{msg}");
    }

    #[test]
    fn maxpool_drops_odd_trailing_row_and_column() {
        let input: Vec<f32> = (0..15).map(|v| v as f32).collect();
        let (shape, out, _) = maxpool2_forward(&[1, 3, 5, 1], &input);
        assert_eq!(shape, vec![1, 1, 2, 1]);
        assert_eq!(out, vec![6.0, 8.0]);
    }
}
