//! Raw numeric kernels shared by the tape and the no-grad inference path.
//!
//! All kernels work on flat row-major slices with explicit extents. The
//! matrix loops are ordered i-k-j so the inner loop runs contiguously over
//! both the output row and the right-hand row.

use crate::error::{Error, Result};

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// C[m,n] += A[m,k] * B[n,k]^T
///
/// B is transposed into row-major [k,n] once so the inner loop stays
/// contiguous; for the gradient-sized matrices here the copy is cheap
/// against the multiply.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose2d(b, n, k);
    matmul_acc(a, &bt, c, m, k, n);
}

/// Row-major transpose of a [rows, cols] matrix.
pub fn transpose2d(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = &a[r * cols..(r + 1) * cols];
        for (ci, &v) in src.iter().enumerate() {
            out[ci * rows + r] = v;
        }
    }
    out
}

/// C[k,n] += A[m,k]^T * B[m,n]
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            if ap == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += ap * bv;
            }
        }
    }
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if kernel > padded {
        return Err(Error::shape(
            "conv2d",
            format!("kernel extent {kernel} exceeds padded input {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Unfolds one image [C,H,W] into columns [C*kh*kw, oh*ow] for the given
/// stride and zero padding. `cols` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let patch = oh * ow;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ch * kh + ky) * kw + kx) * patch..][..patch];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns [C*kh*kw, oh*ow] back onto an image gradient [C,H,W].
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    img: &mut [f64],
) {
    let patch = oh * ow;
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ch * kh + ky) * kw + kx) * patch..][..patch];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of x[N,C,H,W] with kernels[K,C,kh,kw].
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    kernels: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Vec<f64>> {
    let oh = conv_out_extent(h, kh, stride, pad)?;
    let ow = conv_out_extent(w, kw, stride, pad)?;
    let patch = oh * ow;
    let ckk = c * kh * kw;
    let mut out = vec![0.0; n * k * patch];
    let mut cols = vec![0.0; ckk * patch];
    for item in 0..n {
        im2col(&x[item * c * h * w..][..c * h * w], c, h, w, kh, kw, stride, pad, oh, ow, &mut cols);
        matmul_acc(kernels, &cols, &mut out[item * k * patch..][..k * patch], k, ckk, patch);
    }
    Ok(out)
}

/// Gradients of `conv2d` w.r.t. input and kernels given the output cotangent.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    grad_x: &mut [f64],
    grad_kernels: &mut [f64],
) {
    let oh = conv_out_extent(h, kh, stride, pad).expect("shape already validated in forward");
    let ow = conv_out_extent(w, kw, stride, pad).expect("shape already validated in forward");
    let patch = oh * ow;
    let ckk = c * kh * kw;
    let mut cols = vec![0.0; ckk * patch];
    let mut dcols = vec![0.0; ckk * patch];
    for item in 0..n {
        let gout = &grad_out[item * k * patch..][..k * patch];
        im2col(&x[item * c * h * w..][..c * h * w], c, h, w, kh, kw, stride, pad, oh, ow, &mut cols);
        // dW += gout * cols^T
        matmul_nt_acc(gout, &cols, grad_kernels, k, patch, ckk);
        // dcols = kernels^T * gout
        dcols.fill(0.0);
        matmul_tn_acc(kernels, gout, &mut dcols, k, ckk, patch);
        col2im_acc(
            &dcols,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
            &mut grad_x[item * c * h * w..][..c * h * w],
        );
    }
}

/// 2x2 max pooling with stride 2 over x[N,C,H,W]; odd trailing rows/columns
/// are dropped. Returns pooled values and the flat input index of each max
/// (scan order, first maximum wins ties).
pub fn maxpool2(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0; n * c * oh * ow];
    let mut idx = vec![0u32; n * c * oh * ow];
    for plane in 0..n * c {
        let src_base = plane * h * w;
        let dst_base = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = src_base + (2 * oy) * w + 2 * ox;
                let candidates = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = candidates[0];
                let mut bv = x[best];
                for &cand in &candidates[1..] {
                    if x[cand] > bv {
                        bv = x[cand];
                        best = cand;
                    }
                }
                out[dst_base + oy * ow + ox] = bv;
                idx[dst_base + oy * ow + ox] = best as u32;
            }
        }
    }
    (out, idx)
}

pub fn leaky_relu(x: &[f64], leak: f64) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { leak * v }).collect()
}

/// Numerically stable softmax over each row of a [rows, l] matrix.
/// Subtracting the row max keeps exponents non-positive, so shifting every
/// logit by the same amount leaves the output bit-for-bit unchanged.
pub fn softmax_rows(logits: &[f64], rows: usize, l: usize) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = vec![0.0; rows * l];
    for r in 0..rows {
        let row = &logits[r * l..(r + 1) * l];
        let dst = &mut out[r * l..(r + 1) * l];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            let e = (v - max).exp();
            *d = e;
            sum += e;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Ok(out)
}

/// Softmax of a single logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    softmax_rows(logits, 1, logits.len())
}

/// Index of the largest element, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Index of the smallest element, lowest index on ties.
pub fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Mean Gaussian kernel exp(-||b_i - z||^2 / sigma2) between `z` and every
/// row of `bank` (n rows of dimension d). Result floored at the smallest
/// positive normal so `ln` of it stays finite.
pub fn kernel_density(z: &[f64], bank: &[f64], sigma2: f64) -> f64 {
    let d = z.len();
    debug_assert!(d > 0 && bank.len() % d == 0);
    let n = bank.len() / d;
    let mut acc = 0.0;
    for row in bank.chunks_exact(d) {
        let mut dist2 = 0.0;
        for (&bi, &zi) in row.iter().zip(z) {
            let diff = bi - zi;
            dist2 += diff * diff;
        }
        acc += (-dist2 / sigma2).exp();
    }
    (acc / n as f64).max(f64::MIN_POSITIVE)
}

/// Gradient of `kernel_density` w.r.t. `z`, scaled by `grad_out`.
pub fn kernel_density_backward(z: &[f64], bank: &[f64], sigma2: f64, grad_out: f64, grad_z: &mut [f64]) {
    let d = z.len();
    let n = (bank.len() / d) as f64;
    let scale = grad_out / n;
    for row in bank.chunks_exact(d) {
        let mut dist2 = 0.0;
        for (&bi, &zi) in row.iter().zip(z) {
            let diff = bi - zi;
            dist2 += diff * diff;
        }
        let kern = (-dist2 / sigma2).exp();
        let coeff = scale * kern * 2.0 / sigma2;
        for ((g, &bi), &zi) in grad_z.iter_mut().zip(row).zip(z.iter()) {
            *g += coeff * (bi - zi);
        }
    }
}
