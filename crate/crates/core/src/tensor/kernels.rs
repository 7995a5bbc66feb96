//! Forward and backward kernels on raw row-major slices.
//!
//! All reductions run in a fixed sequential order so repeated evaluations are
//! bit-identical.

use crate::scalar::{lit, Scalar};

/// Temporal kernel width of every convolution in the generator.
pub const CONV_KERNEL: usize = 5;
/// Zero padding on each side, which keeps stride-1 lengths unchanged.
pub const CONV_PAD: usize = 2;
/// Variance floor used by group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// `a[m×k] · b[k×n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow
                .iter()
                .zip(brow)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Output length of a kernel-5, padding-2 convolution with the given stride.
pub fn conv1d_out_len(len: usize, stride: usize) -> usize {
    (len + 2 * CONV_PAD - CONV_KERNEL) / stride + 1
}

/// Cross-correlation of `x[c_in×len]` with `w[c_out×c_in×5]`, zero padding 2.
pub fn conv1d<T: Scalar>(
    x: &[T],
    w: &[T],
    c_in: usize,
    len: usize,
    c_out: usize,
    stride: usize,
) -> Vec<T> {
    let out_len = conv1d_out_len(len, stride);
    let mut out = vec![T::zero(); c_out * out_len];
    for o in 0..c_out {
        for c in 0..c_in {
            let wk = &w[(o * c_in + c) * CONV_KERNEL..(o * c_in + c + 1) * CONV_KERNEL];
            let xrow = &x[c * len..(c + 1) * len];
            for j in 0..out_len {
                let mut acc = T::zero();
                for (k, &wv) in wk.iter().enumerate() {
                    let pos = (j * stride + k) as isize - CONV_PAD as isize;
                    if pos >= 0 && (pos as usize) < len {
                        acc = acc + wv * xrow[pos as usize];
                    }
                }
                out[o * out_len + j] = out[o * out_len + j] + acc;
            }
        }
    }
    out
}

/// Gradients of [`conv1d`] with respect to input and kernel.
pub fn conv1d_backward<T: Scalar>(
    grad: &[T],
    x: &[T],
    w: &[T],
    c_in: usize,
    len: usize,
    c_out: usize,
    stride: usize,
) -> (Vec<T>, Vec<T>) {
    let out_len = conv1d_out_len(len, stride);
    let mut gx = vec![T::zero(); c_in * len];
    let mut gw = vec![T::zero(); w.len()];
    for o in 0..c_out {
        for c in 0..c_in {
            let base = (o * c_in + c) * CONV_KERNEL;
            for j in 0..out_len {
                let g = grad[o * out_len + j];
                for k in 0..CONV_KERNEL {
                    let pos = (j * stride + k) as isize - CONV_PAD as isize;
                    if pos >= 0 && (pos as usize) < len {
                        let p = c * len + pos as usize;
                        gx[p] = gx[p] + g * w[base + k];
                        gw[base + k] = gw[base + k] + g * x[p];
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Per-group statistics saved by the group-norm forward pass.
#[derive(Clone, Debug)]
pub struct GroupStats<T> {
    pub normalized: Vec<T>,
    pub rstd: Vec<T>,
}

/// Group normalization of `x[channels×len]` without affine parameters.
///
/// A group whose values are all identical normalizes to exact zeros.
pub fn group_norm<T: Scalar>(x: &[T], channels: usize, len: usize, groups: usize) -> GroupStats<T> {
    let per_group = channels / groups * len;
    let n: T = lit(per_group as f64);
    let eps: T = lit(GROUP_NORM_EPS);
    let mut normalized = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(groups);
    for (gi, chunk) in x.chunks(per_group).enumerate() {
        let first = chunk[0];
        let constant = chunk.iter().all(|&v| v == first);
        let out = &mut normalized[gi * per_group..(gi + 1) * per_group];
        if constant {
            rstd.push(T::one() / eps.sqrt());
            continue;
        }
        let mean = chunk.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = chunk
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / n;
        let r = T::one() / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    GroupStats { normalized, rstd }
}

pub fn group_norm_backward<T: Scalar>(grad: &[T], stats: &GroupStats<T>, groups: usize) -> Vec<T> {
    let per_group = grad.len() / groups;
    let n: T = lit(per_group as f64);
    let mut gx = vec![T::zero(); grad.len()];
    for gi in 0..groups {
        let range = gi * per_group..(gi + 1) * per_group;
        let dy = &grad[range.clone()];
        let xh = &stats.normalized[range.clone()];
        let mean_dy = dy.iter().fold(T::zero(), |a, &v| a + v) / n;
        let mean_dy_xh = dy
            .iter()
            .zip(xh)
            .fold(T::zero(), |a, (&d, &h)| a + d * h)
            / n;
        let r = stats.rstd[gi];
        for ((o, &d), &h) in gx[range].iter_mut().zip(dy).zip(xh) {
            *o = r * (d - mean_dy - h * mean_dy_xh);
        }
    }
    gx
}

/// `ln(1 + eˣ)` without overflow for large `|x|`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn mish<T: Scalar>(x: T) -> T {
    x * softplus(x).tanh()
}

#[inline]
pub fn mish_grad<T: Scalar>(x: T) -> T {
    let t = softplus(x).tanh();
    t + x * (T::one() - t * t) * sigmoid(x)
}

/// Row-wise softmax of `x[rows×cols]` with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let o = &mut out[i * cols..(i + 1) * cols];
        let mut sum = T::zero();
        for (oj, &v) in o.iter_mut().zip(row) {
            *oj = (v - m).exp();
            sum = sum + *oj;
        }
        for oj in o.iter_mut() {
            *oj = *oj / sum;
        }
    }
    out
}

pub fn softmax_rows_backward<T: Scalar>(grad: &[T], y: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); rows * cols];
    for i in 0..rows {
        let r = i * cols..(i + 1) * cols;
        let dot = grad[r.clone()]
            .iter()
            .zip(&y[r.clone()])
            .fold(T::zero(), |a, (&g, &v)| a + g * v);
        for ((o, &g), &v) in gx[r.clone()].iter_mut().zip(&grad[r.clone()]).zip(&y[r]) {
            *o = v * (g - dot);
        }
    }
    gx
}

/// Nearest-neighbour 2× temporal upsampling of `x[channels×len]`.
pub fn upsample2x<T: Scalar>(x: &[T], channels: usize, len: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(channels * len * 2);
    for c in 0..channels {
        for &v in &x[c * len..(c + 1) * len] {
            out.push(v);
            out.push(v);
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(grad: &[T], channels: usize, len: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); channels * len];
    for c in 0..channels {
        for t in 0..len {
            let base = c * 2 * len + 2 * t;
            gx[c * len + t] = grad[base] + grad[base + 1];
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3×2
        let ab = matmul(&a, &b, 2, 3, 2);
        assert_eq!(ab, vec![58.0, 64.0, 139.0, 154.0]);
        let bt = transpose(&b, 3, 2);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), ab);
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 2), ab);
    }

    #[test]
    fn conv_lengths() {
        assert_eq!(conv1d_out_len(16, 1), 16);
        assert_eq!(conv1d_out_len(16, 2), 8);
        assert_eq!(conv1d_out_len(7, 2), 4);
        assert_eq!(conv1d_out_len(1, 2), 1);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
