//! Raw slice kernels behind the tape ops.
//!
//! Layouts are row-major: images are `[planes][h][w]`, convolution weights
//! `[out][in][k][k]`. The convolution kernels lower to im2col and a blocked
//! matrix product whose per-output accumulation order is `bias, then
//! (channel, ky, kx)` in increasing order, which is the order of a naive
//! nested-loop convolution, so both agree bit for bit.

use super::{Result, TensorError};

/// Column block width for the matrix products.
const BLOCK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| TensorError::InvalidArgument {
            op: "conv2d",
            reason,
        };
        if self.stride == 0 {
            return Err(bad("stride must be positive".into()));
        }
        if self.kernel == 0 {
            return Err(bad("kernel size must be positive".into()));
        }
        if self.height + 2 * self.padding < self.kernel || self.width + 2 * self.padding < self.kernel
        {
            return Err(bad(format!(
                "kernel {} does not fit a {}x{} input with padding {}",
                self.kernel, self.height, self.width, self.padding
            )));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Lowers one image `[in_channels][h][w]` into `[patch][out_pixels]` columns.
pub fn im2col(input: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let np = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into an image gradient.
pub fn col2im(cols: &[f64], g: &ConvGeometry, grad_input: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let np = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut grad_input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * np..(row + 1) * np];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, ra) = a.split_at(a.len() / 4 * 4);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `out[o][j] = bias[o] + sum_k weight[o][k] * cols[k][j]`.
fn gemm_forward(weight: &[f64], bias: Option<&[f64]>, cols: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for o in 0..m {
        let b = bias.map_or(0.0, |b| b[o]);
        out[o * n..(o + 1) * n].fill(b);
    }
    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        for kk in 0..k {
            let c = &cols[kk * n + start..kk * n + end];
            for o in 0..m {
                let w = weight[o * k + kk];
                axpy(w, c, &mut out[o * n + start..o * n + end]);
            }
        }
        start = end;
    }
}

/// Forward convolution over a batch. Returns the output and the cached
/// columns (one `[patch][out_pixels]` block per image).
pub fn conv2d_forward(
    input: &[f64],
    batch: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>) {
    let (kp, np) = (g.patch_len(), g.out_pixels());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * np;
    let mut cols = vec![0.0; batch * kp * np];
    let mut out = vec![0.0; batch * out_len];
    for b in 0..batch {
        let col = &mut cols[b * kp * np..(b + 1) * kp * np];
        im2col(&input[b * in_len..(b + 1) * in_len], g, col);
        gemm_forward(weight, bias, col, g.out_channels, kp, np, &mut out[b * out_len..(b + 1) * out_len]);
    }
    (out, cols)
}

/// Gradients of a convolution given the cached columns. Each output is
/// accumulated into the provided buffer when present.
pub fn conv2d_backward(
    grad_out: &[f64],
    cols: &[f64],
    weight: &[f64],
    batch: usize,
    g: &ConvGeometry,
    grad_input: Option<&mut [f64]>,
    grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let (kp, np, m) = (g.patch_len(), g.out_pixels(), g.out_channels);
    let in_len = g.in_channels * g.height * g.width;
    let out_len = m * np;

    if let Some(gb) = grad_bias {
        for b in 0..batch {
            for o in 0..m {
                gb[o] += grad_out[b * out_len + o * np..b * out_len + (o + 1) * np].iter().sum::<f64>();
            }
        }
    }
    if let Some(gw) = grad_weight {
        for b in 0..batch {
            let go = &grad_out[b * out_len..(b + 1) * out_len];
            let col = &cols[b * kp * np..(b + 1) * kp * np];
            for o in 0..m {
                let row = &go[o * np..(o + 1) * np];
                for kk in 0..kp {
                    gw[o * kp + kk] += dot(row, &col[kk * np..(kk + 1) * np]);
                }
            }
        }
    }
    if let Some(gi) = grad_input {
        let mut dcol = vec![0.0; kp * np];
        for b in 0..batch {
            dcol.fill(0.0);
            let go = &grad_out[b * out_len..(b + 1) * out_len];
            let mut start = 0;
            while start < np {
                let end = (start + BLOCK).min(np);
                for kk in 0..kp {
                    let dst = &mut dcol[kk * np + start..kk * np + end];
                    for o in 0..m {
                        axpy(weight[o * kp + kk], &go[o * np + start..o * np + end], dst);
                    }
                }
                start = end;
            }
            col2im(&dcol, g, &mut gi[b * in_len..(b + 1) * in_len]);
        }
    }
}

/// Max pooling of `planes` images of `h x w`. Returns values and the flat
/// input index of each window's maximum (first in row-major order on ties).
pub fn max_pool2d(input: &[f64], planes: usize, h: usize, w: usize, factor: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(TensorError::InvalidArgument {
            op: "max_pool2d",
            reason: format!("{h}x{w} is not divisible by factor {factor}"),
        });
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * factor * w + ox * factor;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let idx = base + (oy * factor + dy) * w + ox * factor + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    Ok((out, arg))
}

/// Source taps of half-pixel-center bilinear resampling along one axis:
/// output `i` reads `(i + 0.5) / factor - 0.5`, clamped to the input range.
pub fn bilinear_taps(in_len: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..in_len * factor)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

pub fn upsample_bilinear(input: &[f64], planes: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    if factor == 1 {
        return input.to_vec();
    }
    let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(grad_out: &[f64], planes: usize, h: usize, w: usize, factor: usize, grad_in: &mut [f64]) {
    if factor == 1 {
        for (g, &d) in grad_in.iter_mut().zip(grad_out) {
            *g += d;
        }
        return;
    }
    let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    for p in 0..planes {
        let go = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let gi = &mut grad_in[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let d = go[oy * ow + ox];
                gi[y0 * w + x0] += wy0 * wx0 * d;
                gi[y0 * w + x1] += wy0 * wx1 * d;
                gi[y1 * w + x0] += wy1 * wx0 * d;
                gi[y1 * w + x1] += wy1 * wx1 * d;
            }
        }
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-plane standardization. Returns outputs and per-plane `1/std`.
pub fn instance_norm(input: &[f64], planes: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; input.len()];
    let mut inv_std = Vec::with_capacity(planes);
    for p in 0..planes {
        let x = &input[p * len..(p + 1) * len];
        let mean = x.iter().sum::<f64>() / len as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let is = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        for (o, &v) in out[p * len..(p + 1) * len].iter_mut().zip(x) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (out, inv_std)
}

pub fn instance_norm_backward(grad_out: &[f64], output: &[f64], inv_std: &[f64], len: usize, grad_in: &mut [f64]) {
    for (p, &is) in inv_std.iter().enumerate() {
        let dy = &grad_out[p * len..(p + 1) * len];
        let y = &output[p * len..(p + 1) * len];
        let mean_dy = dy.iter().sum::<f64>() / len as f64;
        let mean_dyy = dot(dy, y) / len as f64;
        for ((g, &d), &yy) in grad_in[p * len..(p + 1) * len].iter_mut().zip(dy).zip(y) {
            *g += is * (d - mean_dy - yy * mean_dyy);
        }
    }
}
