//! Single-example layer kernels on channel-major `[C][H][W]` buffers.

use matrixmultiply::dgemm;

/// `C = alpha * A . B + beta * C` over strided row/column layouts.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the debug assertions above describe the extent of every operand;
    // callers pass buffers sized from the same dimensions.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Unfolds a `[c][h][w]` tensor into `(c*9) x (h*w)` columns for a 3x3, pad-1 convolution.
pub fn im2col3x3(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; c * 9 * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3x3`]: accumulates column gradients back onto the input grid.
pub fn col2im3x3(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    x
}

/// 3x3 stride-1 pad-1 convolution from precomputed columns; returns `[c_out][h*w]`.
pub fn conv3x3_forward(cols: &[f64], weight: &[f64], bias: &[f64], c_in: usize, hw: usize) -> Vec<f64> {
    let c_out = bias.len();
    let mut out = Vec::with_capacity(c_out * hw);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, hw));
    }
    let kk = c_in * 9;
    gemm(c_out, kk, hw, weight, (kk, 1), cols, (hw, 1), 1.0, &mut out, (hw, 1));
    out
}

/// Accumulates weight and bias gradients; returns the column gradient if requested.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    cols: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    c_in: usize,
    c_out: usize,
    hw: usize,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let kk = c_in * 9;
    // dW += dZ . cols^T
    gemm(c_out, hw, kk, grad_out, (hw, 1), cols, (1, hw), 1.0, grad_weight, (kk, 1));
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out[co * hw..(co + 1) * hw].iter().sum::<f64>();
    }
    need_input_grad.then(|| {
        // dcols = W^T . dZ
        let mut dcols = vec![0.0; kk * hw];
        gemm(kk, c_out, hw, weight, (1, kk), grad_out, (hw, 1), 0.0, &mut dcols, (hw, 1));
        dcols
    })
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the activation was clipped.
pub fn relu_backward_inplace(grad: &mut [f64], activation: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 stride-2 max pooling. Ties resolve to the first element in row-major window order.
/// Returns pooled values and the flat input index of each maximum.
pub fn maxpool2x2(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for cand in [
                    base + 2 * y * w + 2 * xo + 1,
                    base + (2 * y + 1) * w + 2 * xo,
                    base + (2 * y + 1) * w + 2 * xo + 1,
                ] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

/// Routes pooled gradients back to the recorded maxima.
pub fn unpool(grad_out: &[f64], indices: &[usize], input_len: usize) -> Vec<f64> {
    let mut grad = vec![0.0; input_len];
    for (&g, &i) in grad_out.iter().zip(indices) {
        grad[i] += g;
    }
    grad
}

/// Max over the full height of `[c][h][t]`, giving `[c][t]`; first index wins ties.
pub fn column_maxpool(x: &[f64], c: usize, h: usize, t: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(c * t);
    let mut idx = Vec::with_capacity(c * t);
    for ci in 0..c {
        for ti in 0..t {
            let mut best = ci * h * t + ti;
            for y in 1..h {
                let cand = ci * h * t + y * t + ti;
                if x[cand] > x[best] {
                    best = cand;
                }
            }
            out.push(x[best]);
            idx.push(best);
        }
    }
    (out, idx)
}

/// Transposed 1-D convolution along time.
///
/// `weight` is `[c_in][c_out][kernel]`; input `[c_in][len]`; output
/// `[c_out][(len - 1) * stride + kernel]`.
pub fn deconv_time_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    c_in: usize,
    len: usize,
    kernel: usize,
    stride: usize,
) -> Vec<f64> {
    let c_out = bias.len();
    let out_len = (len - 1) * stride + kernel;
    let mut out = Vec::with_capacity(c_out * out_len);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, out_len));
    }
    for j in 0..kernel {
        // out[o, t*stride + j] += sum_c W[c, o, j] x[c, t]
        gemm(
            c_out,
            c_in,
            len,
            &weight[j..],
            (kernel, c_out * kernel),
            x,
            (len, 1),
            1.0,
            &mut out[j..],
            (out_len, stride),
        );
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn deconv_time_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    c_in: usize,
    c_out: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Vec<f64> {
    let out_len = (len - 1) * stride + kernel;
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out[o * out_len..(o + 1) * out_len].iter().sum::<f64>();
    }
    let mut grad_x = vec![0.0; c_in * len];
    for j in 0..kernel {
        // dW[c, o, j] += sum_t dY[o, t*stride + j] x[c, t]
        gemm(
            c_out,
            len,
            c_in,
            &grad_out[j..],
            (out_len, stride),
            x,
            (1, len),
            1.0,
            &mut grad_weight[j..],
            (kernel, c_out * kernel),
        );
        // dx[c, t] += sum_o W[c, o, j] dY[o, t*stride + j]
        gemm(
            c_in,
            c_out,
            len,
            &weight[j..],
            (c_out * kernel, kernel),
            &grad_out[j..],
            (out_len, stride),
            1.0,
            &mut grad_x,
            (len, 1),
        );
    }
    grad_x
}

/// 1x1 convolution over `[c_in][t]`: `out = W . x + b`, `W` is `[c_out][c_in]`.
pub fn pointwise_forward(x: &[f64], weight: &[f64], bias: &[f64], c_in: usize, t: usize) -> Vec<f64> {
    let c_out = bias.len();
    let mut out = Vec::with_capacity(c_out * t);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, t));
    }
    gemm(c_out, c_in, t, weight, (c_in, 1), x, (t, 1), 1.0, &mut out, (t, 1));
    out
}

#[allow(clippy::too_many_arguments)]
pub fn pointwise_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    c_in: usize,
    c_out: usize,
    t: usize,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Vec<f64> {
    gemm(c_out, t, c_in, grad_out, (t, 1), x, (1, t), 1.0, grad_weight, (c_in, 1));
    for (o, gb) in grad_bias.iter_mut().enumerate() {
        *gb += grad_out[o * t..(o + 1) * t].iter().sum::<f64>();
    }
    let mut grad_x = vec![0.0; c_in * t];
    gemm(c_in, c_out, t, weight, (1, c_in), grad_out, (t, 1), 0.0, &mut grad_x, (t, 1));
    grad_x
}

/// Softmax over rows for every column of a `[k][t]` buffer.
pub fn softmax_columns(logits: &[f64], k: usize, t: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * t];
    for ti in 0..t {
        let max = (0..k).map(|c| logits[c * t + ti]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            let e = (logits[c * t + ti] - max).exp();
            out[c * t + ti] = e;
            sum += e;
        }
        for c in 0..k {
            out[c * t + ti] /= sum;
        }
    }
    out
}
