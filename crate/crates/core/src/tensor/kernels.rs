//! Raw forward and backward kernels on NCHW buffers.
//!
//! Shapes are validated by the graph before these are called.

use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// 1×1 stride-1 unpadded convolutions read the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + kj − padding`
/// falls inside `0..len`.
fn valid_range(len: usize, out: usize, k_off: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if k_off >= padding { 0 } else { (padding - k_off).div_ceil(stride) };
    let hi = if len + padding > k_off {
        (len + padding - k_off).div_ceil(stride).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one sample into rows `c·k·k + ki·k + kj` of `col`, writing
/// `oh·ow` entries per row starting at column `offset` of a row of length
/// `stride_cols`.
fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], col: &mut [T], stride_cols: usize, offset: usize) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (ylo, yhi) = valid_range(g.height, oh, ki, s, p);
            for kj in 0..k {
                let (xlo, xhi) = valid_range(g.width, ow, kj, s, p);
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * stride_cols + offset..row * stride_cols + offset + oh * ow];
                dst[..ylo * ow].fill(T::zero());
                dst[yhi * ow..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * s + ki - p;
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    if xlo < xhi {
                        let start = xlo * s + kj - p;
                        if s == 1 {
                            line[xlo..xhi].copy_from_slice(&src[start..start + xhi - xlo]);
                        } else {
                            for (d, v) in line[xlo..xhi].iter_mut().zip(src[start..].iter().step_by(s)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], dx: &mut [T], stride_cols: usize, offset: usize) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            let (ylo, yhi) = valid_range(g.height, oh, ki, s, p);
            for kj in 0..k {
                let (xlo, xhi) = valid_range(g.width, ow, kj, s, p);
                if xlo >= xhi {
                    continue;
                }
                let row = (c * k + ki) * k + kj;
                let src = &col[row * stride_cols + offset..row * stride_cols + offset + oh * ow];
                for oy in ylo..yhi {
                    let iy = oy * s + ki - p;
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let line = &src[oy * ow + xlo..oy * ow + xhi];
                    let start = xlo * s + kj - p;
                    if s == 1 {
                        for (d, v) in dst[start..start + line.len()].iter_mut().zip(line) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst[start..].iter_mut().step_by(s).zip(line) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Columns of the whole batch side by side: `[C·k·k, N·oh·ow]`.
fn batch_im2col<T: Scalar>(g: &ConvGeometry, x: &[T]) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_sz = g.in_channels * g.height * g.width;
    let total = g.batch * cols;
    let mut col = vec![T::zero(); rows * total];
    for n in 0..g.batch {
        im2col(g, &x[n * in_sz..(n + 1) * in_sz], &mut col, total, n * cols);
    }
    col
}

/// `[N, C, P]` <-> `[C, N·P]`.
fn nchw_to_cn<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p].copy_from_slice(&x[(b * c + ch) * p..(b * c + ch + 1) * p]);
        }
    }
    out
}

fn cn_to_nchw<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..(b * c + ch + 1) * p].copy_from_slice(&x[ch * n * p + b * p..ch * n * p + (b + 1) * p]);
        }
    }
    out
}

/// Cross-correlation as one GEMM over the batch-wide column matrix.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T]) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let total = g.batch * cols;
    let col = if g.is_pointwise() {
        nchw_to_cn(x, g.batch, g.in_channels, cols)
    } else {
        batch_im2col(g, x)
    };
    let mut out = vec![T::zero(); g.out_channels * total];
    T::matmul(g.out_channels, rows, total, w, false, &col, false, &mut out, false);
    cn_to_nchw(&out, g.batch, g.out_channels, cols)
}

/// Returns `(d input, d weight)`.
pub fn conv2d_backward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], dy: &[T]) -> (Vec<T>, Vec<T>) {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let total = g.batch * cols;
    let in_sz = g.in_channels * g.height * g.width;
    let dy_cn = nchw_to_cn(dy, g.batch, g.out_channels, cols);
    let col = if g.is_pointwise() {
        nchw_to_cn(x, g.batch, g.in_channels, cols)
    } else {
        batch_im2col(g, x)
    };
    let mut dw = vec![T::zero(); g.out_channels * rows];
    T::matmul(g.out_channels, total, rows, &dy_cn, false, &col, true, &mut dw, false);
    let mut dcol = col;
    T::matmul(rows, g.out_channels, total, w, true, &dy_cn, false, &mut dcol, false);
    let dx = if g.is_pointwise() {
        cn_to_nchw(&dcol, g.batch, g.in_channels, cols)
    } else {
        let mut dx = vec![T::zero(); g.batch * in_sz];
        for n in 0..g.batch {
            col2im(g, &dcol, &mut dx[n * in_sz..(n + 1) * in_sz], total, n * cols);
        }
        dx
    };
    (dx, dw)
}

/// Cached batch statistics for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Training-mode batch normalization over `(N, H, W)` for each channel.
pub fn batchnorm_forward<T: Scalar>(
    dims: [usize; 4],
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, BatchNormCache<T>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut y = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            sum += x[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            sq += x[off..off + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>();
        }
        let istd = 1.0 / (sq / count + eps).sqrt();
        inv_std[ch] = T::from_f64_lossy(istd);
        let mean_t = T::from_f64_lossy(mean);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xh = (x[i] - mean_t) * inv_std[ch];
                normalized[i] = xh;
                y[i] = xh * gamma[ch] + beta[ch];
            }
        }
    }
    (y, BatchNormCache { normalized, inv_std })
}

/// Returns `(d input, d gamma, d beta)`.
pub fn batchnorm_backward<T: Scalar>(
    dims: [usize; 4],
    cache: &BatchNormCache<T>,
    gamma: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let count = T::from_usize(n * plane).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                sum_dy += dy[i];
                sum_dy_xh += dy[i] * cache.normalized[i];
            }
        }
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * cache.inv_std[ch] / count;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dx[i] = scale * (count * dy[i] - sum_dy - cache.normalized[i] * sum_dy_xh);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// 3×3, stride 1, padding 1 average pooling; padded cells are not counted.
pub fn avgpool3_forward<T: Scalar>(dims: [usize; 4], x: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let mut y = vec![T::zero(); x.len()];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            let (r0, r1) = (i.saturating_sub(1), (i + 1).min(h - 1));
            for j in 0..w {
                let (c0, c1) = (j.saturating_sub(1), (j + 1).min(w - 1));
                let mut acc = T::zero();
                for r in r0..=r1 {
                    for cc in c0..=c1 {
                        acc += src[r * w + cc];
                    }
                }
                dst[i * w + j] = acc / T::from_usize((r1 - r0 + 1) * (c1 - c0 + 1)).unwrap();
            }
        }
    }
    y
}

pub fn avgpool3_backward<T: Scalar>(dims: [usize; 4], dy: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let mut dx = vec![T::zero(); dy.len()];
    for p in 0..n * c {
        let src = &dy[p * h * w..(p + 1) * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            let (r0, r1) = (i.saturating_sub(1), (i + 1).min(h - 1));
            for j in 0..w {
                let (c0, c1) = (j.saturating_sub(1), (j + 1).min(w - 1));
                let share = src[i * w + j] / T::from_usize((r1 - r0 + 1) * (c1 - c0 + 1)).unwrap();
                for r in r0..=r1 {
                    for cc in c0..=c1 {
                        dst[r * w + cc] += share;
                    }
                }
            }
        }
    }
    dx
}

/// 2×2, stride 2 average pooling (reduction shortcut).
pub fn avgpool2_forward<T: Scalar>(dims: [usize; 4], x: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut y = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let s = src[2 * i * w + 2 * j]
                    + src[2 * i * w + 2 * j + 1]
                    + src[(2 * i + 1) * w + 2 * j]
                    + src[(2 * i + 1) * w + 2 * j + 1];
                y[p * oh * ow + i * ow + j] = s * quarter;
            }
        }
    }
    y
}

pub fn avgpool2_backward<T: Scalar>(dims: [usize; 4], dy: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let g = dy[p * oh * ow + i * ow + j] * quarter;
                dst[2 * i * w + 2 * j] = g;
                dst[2 * i * w + 2 * j + 1] = g;
                dst[(2 * i + 1) * w + 2 * j] = g;
                dst[(2 * i + 1) * w + 2 * j + 1] = g;
            }
        }
    }
    dx
}

pub fn global_avg_pool_forward<T: Scalar>(dims: [usize; 4], x: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let denom = T::from_usize(h * w).unwrap();
    (0..n * c)
        .map(|p| x[p * h * w..(p + 1) * h * w].iter().copied().sum::<T>() / denom)
        .collect()
}

pub fn global_avg_pool_backward<T: Scalar>(dims: [usize; 4], dy: &[T]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let denom = T::from_usize(h * w).unwrap();
    let mut dx = Vec::with_capacity(n * c * h * w);
    for &g in &dy[..n * c] {
        dx.extend(std::iter::repeat_n(g / denom, h * w));
    }
    dx
}

/// `y = x Wᵀ + b` for `x: [N, in]`, `W: [out, in]`.
pub fn linear_forward<T: Scalar>(
    batch: usize,
    inputs: usize,
    outputs: usize,
    x: &[T],
    w: &[T],
    b: &[T],
) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * outputs);
    for _ in 0..batch {
        y.extend_from_slice(b);
    }
    T::matmul(batch, inputs, outputs, x, false, w, true, &mut y, true);
    y
}

/// Returns `(d x, d W, d b)`.
pub fn linear_backward<T: Scalar>(
    batch: usize,
    inputs: usize,
    outputs: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); batch * inputs];
    T::matmul(batch, outputs, inputs, dy, false, w, false, &mut dx, false);
    let mut dw = vec![T::zero(); outputs * inputs];
    T::matmul(outputs, batch, inputs, dy, true, x, false, &mut dw, false);
    let mut db = vec![T::zero(); outputs];
    for row in dy.chunks(outputs) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    (dx, dw, db)
}

/// Mean softmax cross-entropy; returns `(loss, probabilities)`.
pub fn softmax_cross_entropy<T: Scalar>(
    batch: usize,
    classes: usize,
    logits: &[T],
    labels: &[usize],
) -> (f64, Vec<T>) {
    let mut probs = vec![T::zero(); batch * classes];
    let mut loss = 0.0f64;
    for n in 0..batch {
        let row = &logits[n * classes..(n + 1) * classes];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (c, e) in exps.iter().enumerate() {
            probs[n * classes + c] = T::from_f64_lossy(e / z);
        }
        loss += z.ln() + max - row[labels[n]].as_f64();
    }
    (loss / batch as f64, probs)
}

pub fn relu_mask<T: Scalar>(x: &Tensor<T>) -> Vec<bool> {
    x.data().iter().map(|&v| v > T::zero()).collect()
}
