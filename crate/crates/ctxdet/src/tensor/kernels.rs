//! Raw computational kernels shared by the tape and inference paths.
//!
//! Layout conventions: images and feature maps are H x W x C row-major,
//! convolution weights are k x k x Cin x Cout. Convolutions are
//! cross-correlations with zero padding, pooling windows may be truncated at
//! the border.

use super::Real;
use crate::error::{Error, Result};

/// Output extent of a pooling window sweep along one spatial dimension.
///
/// Ceil mode rounds the sweep up and truncates border windows, but a window
/// must still start inside the input; the rounding can only produce such a
/// phantom window when stride exceeds kernel.
pub fn pool_out_extent(input: usize, kernel: usize, stride: usize, ceil_mode: bool) -> usize {
    if ceil_mode {
        if input <= kernel {
            return 1;
        }
        let mut extent = (input - kernel).div_ceil(stride) + 1;
        if (extent - 1) * stride >= input {
            extent -= 1;
        }
        extent
    } else {
        (input - kernel) / stride + 1
    }
}

pub fn check_pool_params(
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    ceil_mode: bool,
) -> Result<()> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Parameter(format!(
            "pooling kernel/stride must be positive, got kernel={kernel} stride={stride}"
        )));
    }
    if !ceil_mode && (kernel > h || kernel > w) {
        return Err(Error::Parameter(format!(
            "pooling kernel {kernel} exceeds map {h}x{w} and ceil_mode is off"
        )));
    }
    Ok(())
}

/// Max pool over H x W x C. Returns (output, argmax input index per output element).
///
/// Ties go to the first window element in row-major order.
pub fn max_pool_forward<F: Real>(
    x: &[F],
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    stride: usize,
    ceil_mode: bool,
) -> (Vec<F>, Vec<usize>, usize, usize) {
    let oh = pool_out_extent(h, kernel, stride, ceil_mode);
    let ow = pool_out_extent(w, kernel, stride, ceil_mode);
    let mut out = vec![F::zero(); oh * ow * c];
    let mut argmax = vec![0usize; oh * ow * c];
    for u in 0..oh {
        let y0 = u * stride;
        let y1 = (y0 + kernel).min(h);
        for v in 0..ow {
            let x0 = v * stride;
            let x1 = (x0 + kernel).min(w);
            for ch in 0..c {
                let mut best = F::from_f64(f64::NEG_INFINITY);
                let mut best_idx = 0usize;
                for y in y0..y1 {
                    for xp in x0..x1 {
                        let idx = (y * w + xp) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (u * ow + v) * c + ch;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax, oh, ow)
}

pub fn max_pool_backward<F: Real>(grad_out: &[F], argmax: &[usize], grad_in: &mut [F]) {
    for (g, &idx) in grad_out.iter().zip(argmax.iter()) {
        grad_in[idx] += *g;
    }
}

/// Average pool; border windows divide by their actual (truncated) size.
pub fn avg_pool_forward<F: Real>(
    x: &[F],
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    stride: usize,
    ceil_mode: bool,
) -> (Vec<F>, usize, usize) {
    let oh = pool_out_extent(h, kernel, stride, ceil_mode);
    let ow = pool_out_extent(w, kernel, stride, ceil_mode);
    let mut out = vec![F::zero(); oh * ow * c];
    for u in 0..oh {
        let y0 = u * stride;
        let y1 = (y0 + kernel).min(h);
        for v in 0..ow {
            let x0 = v * stride;
            let x1 = (x0 + kernel).min(w);
            let count = F::from_f64(((y1 - y0) * (x1 - x0)) as f64);
            for ch in 0..c {
                let mut acc = F::zero();
                for y in y0..y1 {
                    for xp in x0..x1 {
                        acc += x[(y * w + xp) * c + ch];
                    }
                }
                out[(u * ow + v) * c + ch] = acc / count;
            }
        }
    }
    (out, oh, ow)
}

#[allow(clippy::too_many_arguments)]
pub fn avg_pool_backward<F: Real>(
    grad_out: &[F],
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    stride: usize,
    ceil_mode: bool,
    grad_in: &mut [F],
) {
    let oh = pool_out_extent(h, kernel, stride, ceil_mode);
    let ow = pool_out_extent(w, kernel, stride, ceil_mode);
    for u in 0..oh {
        let y0 = u * stride;
        let y1 = (y0 + kernel).min(h);
        for v in 0..ow {
            let x0 = v * stride;
            let x1 = (x0 + kernel).min(w);
            let count = F::from_f64(((y1 - y0) * (x1 - x0)) as f64);
            for ch in 0..c {
                let g = grad_out[(u * ow + v) * c + ch] / count;
                for y in y0..y1 {
                    for xp in x0..x1 {
                        grad_in[(y * w + xp) * c + ch] += g;
                    }
                }
            }
        }
    }
}

/// Conv output extent for one spatial dimension.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Unrolls padded k x k patches into rows of (oh*ow) x (k*k*cin).
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Real>(
    x: &[F],
    h: usize,
    w: usize,
    cin: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let patch = kernel * kernel * cin;
    let mut cols = vec![F::zero(); oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * patch;
            for ky in 0..kernel {
                let y = (oy * stride + ky) as isize - padding as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let xp = (ox * stride + kx) as isize - padding as isize;
                    if xp < 0 || xp >= w as isize {
                        continue;
                    }
                    let src = (y as usize * w + xp as usize) * cin;
                    let dst = row + (ky * kernel + kx) * cin;
                    cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    cols
}

/// Scatter-adds column gradients back into the (unpadded) input gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im<F: Real>(
    cols: &[F],
    h: usize,
    w: usize,
    cin: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    grad_in: &mut [F],
) {
    let patch = kernel * kernel * cin;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * patch;
            for ky in 0..kernel {
                let y = (oy * stride + ky) as isize - padding as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let xp = (ox * stride + kx) as isize - padding as isize;
                    if xp < 0 || xp >= w as isize {
                        continue;
                    }
                    let dst = (y as usize * w + xp as usize) * cin;
                    let src = row + (ky * kernel + kx) * cin;
                    for ch in 0..cin {
                        grad_in[dst + ch] += cols[src + ch];
                    }
                }
            }
        }
    }
}

/// Cross-correlation of H x W x Cin with k x k x Cin x Cout weights.
pub fn conv2d_forward<F: Real>(
    x: &[F],
    dims: (usize, usize, usize),
    w: &[F],
    wdims: (usize, usize, usize),
    stride: usize,
    padding: usize,
) -> (Vec<F>, usize, usize) {
    let (h, wd, cin) = dims;
    let (kernel, _, cout) = (wdims.0, wdims.1, wdims.2);
    let oh = conv_out_extent(h, kernel, stride, padding);
    let ow = conv_out_extent(wd, kernel, stride, padding);
    let patch = kernel * kernel * cin;
    let cols = im2col(x, h, wd, cin, kernel, stride, padding, oh, ow);
    let mut out = vec![F::zero(); oh * ow * cout];
    // (oh*ow) x patch times patch x cout; the weight memory layout is already
    // (ky, kx, cin) x cout
    F::gemm(oh * ow, patch, cout, F::one(), &cols, false, w, false, F::zero(), &mut out);
    (out, oh, ow)
}

/// Gradients of conv2d w.r.t. input and weights.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Real>(
    grad_out: &[F],
    x: &[F],
    dims: (usize, usize, usize),
    w: &[F],
    wdims: (usize, usize, usize),
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> (Vec<F>, Vec<F>) {
    let (h, wd, cin) = dims;
    let (kernel, _, cout) = (wdims.0, wdims.1, wdims.2);
    let patch = kernel * kernel * cin;
    let cols = im2col(x, h, wd, cin, kernel, stride, padding, oh, ow);

    // dW = colsᵀ · dY
    let mut grad_w = vec![F::zero(); patch * cout];
    F::gemm(
        patch,
        oh * ow,
        cout,
        F::one(),
        &cols,
        true,
        grad_out,
        false,
        F::zero(),
        &mut grad_w,
    );

    // dCols = dY · Wᵀ, scattered back through col2im
    let mut grad_cols = vec![F::zero(); oh * ow * patch];
    F::gemm(
        oh * ow,
        cout,
        patch,
        F::one(),
        grad_out,
        false,
        w,
        true,
        F::zero(),
        &mut grad_cols,
    );
    let mut grad_in = vec![F::zero(); h * wd * cin];
    col2im(&grad_cols, h, wd, cin, kernel, stride, padding, oh, ow, &mut grad_in);
    (grad_in, grad_w)
}

/// Row-wise softmax with max-subtraction stabilization.
pub fn softmax_rows_forward<F: Real>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut m = row[0];
        for &v in row {
            m = m.maximum(v);
        }
        let mut sum = F::zero();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
            let e = (v - m).exp();
            *o = e;
            sum += e;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o = *o / sum;
        }
    }
    out
}

/// Softmax Jacobian product: dx_i = y_i * (dy_i - sum_j dy_j y_j) per row.
pub fn softmax_rows_backward<F: Real>(
    y: &[F],
    grad_out: &[F],
    rows: usize,
    cols: usize,
    grad_in: &mut [F],
) {
    for r in 0..rows {
        let y_row = &y[r * cols..(r + 1) * cols];
        let g_row = &grad_out[r * cols..(r + 1) * cols];
        let mut dot = F::zero();
        for (yi, gi) in y_row.iter().zip(g_row.iter()) {
            dot += *yi * *gi;
        }
        for ((out, yi), gi) in grad_in[r * cols..(r + 1) * cols]
            .iter_mut()
            .zip(y_row.iter())
            .zip(g_row.iter())
        {
            *out += *yi * (*gi - dot);
        }
    }
}

/// Row-wise log-sum-exp, used by the cross-entropy kernel.
pub fn log_sum_exp_row<F: Real>(row: &[F]) -> F {
    let mut m = row[0];
    for &v in row {
        m = m.maximum(v);
    }
    let mut sum = F::zero();
    for &v in row {
        sum += (v - m).exp();
    }
    m + sum.ln()
}

/// Numerically stable binary cross-entropy with logits for a single element.
pub fn bce_with_logits<F: Real>(logit: F, target: F) -> F {
    // max(x,0) - x*t + ln(1 + e^{-|x|})
    logit.maximum(F::zero()) - logit * target + (F::one() + (-logit.abs()).exp()).ln()
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_extents() {
        // ceil: (7-3)/3 -> ceil(4/3)=2 -> 3 outputs; floor: 4/3=1 -> 2 outputs
        assert_eq!(pool_out_extent(7, 3, 3, true), 3);
        // stride > kernel: the rounded-up window would start outside
        assert_eq!(pool_out_extent(4, 1, 2, true), 2);
        assert_eq!(pool_out_extent(7, 3, 3, false), 2);
        assert_eq!(pool_out_extent(2, 3, 3, true), 1);
        assert_eq!(pool_out_extent(8, 2, 2, true), 4);
        assert_eq!(pool_out_extent(8, 2, 2, false), 4);
    }

    #[test]
    fn conv_identity_1x1() {
        // 1x1 kernel, identity channel mix: output equals input
        let x: Vec<f64> = (0..2 * 2 * 2).map(|i| i as f64).collect();
        let w = vec![1.0, 0.0, 0.0, 1.0]; // 1x1x2x2 identity
        let (y, oh, ow) = conv2d_forward(&x, (2, 2, 2), &w, (1, 2, 2), 1, 0);
        assert_eq!((oh, ow), (2, 2));
        assert_eq!(y, x);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = vec![0.0f64, 2.0_f64.ln(), 5.0, 5.0, 5.0, 5.0];
        let y = softmax_rows_forward(&x, 2, 3);
        for r in 0..2 {
            let s: f64 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_matches_naive() {
        for &(x, t) in &[(0.3f64, 1.0), (-2.0, 0.0), (5.0, 1.0), (-7.0, 1.0)] {
            let naive = -(t * sigmoid(x).ln() + (1.0 - t) * (1.0 - sigmoid(x)).ln());
            assert!((bce_with_logits(x, t) - naive).abs() < 1e-9);
        }
    }
}
