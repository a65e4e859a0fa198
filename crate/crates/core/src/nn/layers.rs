//! Forward and backward kernels for the layer kinds the architectures use.
//!
//! All kernels work on the `[C][B][H][W]` layout of [`Tensor`]. Parameter
//! gradients are accumulated (`+=`) into caller-provided buffers.

use rand::Rng;

use super::scalar::{gemm, MatRef, Scalar};
use super::tensor::Tensor;
use crate::rng::Stream;

/// Upper bound on im2col buffer elements per chunk of samples.
const COL_BUDGET: usize = 1 << 23;

fn samples_per_chunk(k: usize, hw: usize, b: usize) -> usize {
    (COL_BUDGET / (k * hw).max(1)).clamp(1, b.max(1))
}

/// Unfold 3x3 same-padded neighbourhoods of samples `b0..b0+nb` into
/// `col[(ci*3+ky)*3+kx][bi*hw + y*w + x]`.
fn im2col<T: Scalar>(x: &Tensor<T>, b0: usize, nb: usize, col: &mut [T]) {
    let (h, w, hw) = (x.h, x.w, x.hw());
    let ncols = nb * hw;
    for ci in 0..x.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 3 + ky) * 3 + kx) * ncols..][..ncols];
                let x_lo = 1usize.saturating_sub(kx);
                let x_hi = (w + 1 - kx).min(w);
                for bi in 0..nb {
                    let src = &x.data[(ci * x.b + b0 + bi) * hw..][..hw];
                    for y in 0..h {
                        let dst = &mut row[bi * hw + y * w..][..w];
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            dst.fill(T::zero());
                            continue;
                        }
                        let srow = &src[(sy - 1) * w..][..w];
                        dst[..x_lo].fill(T::zero());
                        dst[x_hi..].fill(T::zero());
                        if x_lo < x_hi {
                            dst[x_lo..x_hi].copy_from_slice(&srow[x_lo + kx - 1..x_hi + kx - 1]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx`.
fn col2im<T: Scalar>(col: &[T], b0: usize, nb: usize, dx: &mut Tensor<T>) {
    let (h, w, hw, bt) = (dx.h, dx.w, dx.hw(), dx.b);
    let ncols = nb * hw;
    for ci in 0..dx.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 3 + ky) * 3 + kx) * ncols..][..ncols];
                let x_lo = 1usize.saturating_sub(kx);
                let x_hi = (w + 1 - kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for bi in 0..nb {
                    let dst = &mut dx.data[(ci * bt + b0 + bi) * hw..][..hw];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let src = &row[bi * hw + y * w..][..w];
                        let drow = &mut dst[(sy - 1) * w..][..w];
                        for (d, &s) in drow[x_lo + kx - 1..x_hi + kx - 1].iter_mut().zip(&src[x_lo..x_hi]) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution with a `ksize x ksize` kernel
/// (`ksize` is 1 or 3). `weight` is `[cout][cin][ky][kx]`.
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, ksize: usize) -> Tensor<T> {
    let k = x.c * ksize * ksize;
    debug_assert_eq!(weight.len(), cout * k);
    let mut out = Tensor::zeros(cout, x.b, x.h, x.w);
    let ld = x.cols();
    let wm = MatRef::rows(weight, cout, k, k);
    if ksize == 1 {
        gemm(T::one(), wm, MatRef::rows(&x.data, k, ld, ld), T::zero(), &mut out.data, ld);
    } else {
        let hw = x.hw();
        let nb = samples_per_chunk(k, hw, x.b);
        let mut col = vec![T::zero(); k * nb * hw];
        let mut b0 = 0;
        while b0 < x.b {
            let n = nb.min(x.b - b0);
            let ncols = n * hw;
            im2col(x, b0, n, &mut col);
            gemm(
                T::one(),
                wm,
                MatRef::rows(&col, k, ncols, ncols),
                T::zero(),
                &mut out.data[b0 * hw..],
                ld,
            );
            b0 += n;
        }
    }
    for (row, &b) in out.data.chunks_exact_mut(ld).zip(bias) {
        for v in row {
            *v = *v + b;
        }
    }
    out
}

/// Accumulates weight/bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    cout: usize,
    ksize: usize,
    dy: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let k = x.c * ksize * ksize;
    let ld = x.cols();
    for (row, db) in dy.data.chunks_exact(ld).zip(dbias.iter_mut()) {
        *db = *db + row.iter().copied().sum();
    }
    let wm = MatRef::rows(weight, cout, k, k);
    let mut dx = need_dx.then(|| Tensor::zeros(x.c, x.b, x.h, x.w));
    if ksize == 1 {
        let dym = MatRef::rows(&dy.data, cout, ld, ld);
        let xm = MatRef::rows(&x.data, k, ld, ld);
        gemm(T::one(), dym, xm.t(), T::one(), dweight, k);
        if let Some(dx) = dx.as_mut() {
            gemm(T::one(), wm.t(), dym, T::zero(), &mut dx.data, ld);
        }
        return dx;
    }
    let hw = x.hw();
    let nb = samples_per_chunk(k, hw, x.b);
    let mut col = vec![T::zero(); k * nb * hw];
    let mut b0 = 0;
    while b0 < x.b {
        let n = nb.min(x.b - b0);
        let ncols = n * hw;
        im2col(x, b0, n, &mut col);
        let dym = MatRef {
            data: &dy.data[b0 * hw..],
            rows: cout,
            cols: ncols,
            rs: ld,
            cs: 1,
        };
        gemm(T::one(), dym, MatRef::rows(&col, k, ncols, ncols).t(), T::one(), dweight, k);
        if let Some(dx) = dx.as_mut() {
            gemm(T::one(), wm.t(), dym, T::zero(), &mut col, ncols);
            col2im(&col[..k * ncols], b0, n, dx);
        }
        b0 += n;
    }
    dx
}

/// 2x2 stride-2 max pooling. Returns the output and the winning offset
/// (0..4, row-major within the window) per output element.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, x.b, oh, ow);
    let mut arg = vec![0u8; out.len()];
    let (hw, ohw) = (x.hw(), oh * ow);
    for plane in 0..x.c * x.b {
        let src = &x.data[plane * hw..][..hw];
        let dst = &mut out.data[plane * ohw..][..ohw];
        let am = &mut arg[plane * ohw..][..ohw];
        for y in 0..oh {
            for xx in 0..ow {
                let base = 2 * y * x.w + 2 * xx;
                let cand = [src[base], src[base + 1], src[base + x.w], src[base + x.w + 1]];
                let mut best = 0;
                for i in 1..4 {
                    if cand[i] > cand[best] {
                        best = i;
                    }
                }
                dst[y * ow + xx] = cand[best];
                am[y * ow + xx] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(x: &Tensor<T>, arg: &[u8], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x.c, x.b, x.h, x.w);
    let (hw, ohw) = (x.hw(), dy.hw());
    for plane in 0..x.c * x.b {
        let g = &dy.data[plane * ohw..][..ohw];
        let a = &arg[plane * ohw..][..ohw];
        let d = &mut dx.data[plane * hw..][..hw];
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let i = y * dy.w + xx;
                let off = a[i] as usize;
                d[(2 * y + off / 2) * x.w + 2 * xx + off % 2] = g[i];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, x.b, oh, ow);
    let (hw, ohw) = (x.hw(), oh * ow);
    for plane in 0..x.c * x.b {
        let src = &x.data[plane * hw..][..hw];
        let dst = &mut out.data[plane * ohw..][..ohw];
        for y in 0..oh {
            let srow = &src[(y / 2) * x.w..][..x.w];
            for (xx, d) in dst[y * ow..][..ow].iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    out
}

pub fn upsample_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, dy.b, h, w);
    let (hw, ohw) = (h * w, dy.hw());
    for plane in 0..dy.c * dy.b {
        let g = &dy.data[plane * ohw..][..ohw];
        let d = &mut dx.data[plane * hw..][..hw];
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let i = (y / 2) * w + xx / 2;
                d[i] = d[i] + g[y * dy.w + xx];
            }
        }
    }
    dx
}

/// Learned 2x upsampling: 2x2 kernel, stride 2, `weight[cout][cin][dy][dx]`.
pub fn upconv_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize) -> Tensor<T> {
    let (cin, ld) = (x.c, x.cols());
    let mut out = Tensor::zeros(cout, x.b, x.h * 2, x.w * 2);
    let mut tmp = vec![T::zero(); cout * ld];
    let xm = MatRef::rows(&x.data, cin, ld, ld);
    for tap in 0..4 {
        let wm = MatRef {
            data: &weight[tap..],
            rows: cout,
            cols: cin,
            rs: cin * 4,
            cs: 4,
        };
        gemm(T::one(), wm, xm, T::zero(), &mut tmp, ld);
        let (ty, tx) = (tap / 2, tap % 2);
        for co in 0..cout {
            for bi in 0..x.b {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let v = tmp[co * ld + bi * x.hw() + y * x.w + xx];
                        out.data[((co * x.b + bi) * out.h + 2 * y + ty) * out.w + 2 * xx + tx] = v + bias[co];
                    }
                }
            }
        }
    }
    out
}

pub fn upconv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    cout: usize,
    dy: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (cin, ld) = (x.c, x.cols());
    let ohw = dy.hw();
    for co in 0..cout {
        let s: T = dy.data[co * dy.b * ohw..][..dy.b * ohw].iter().copied().sum();
        dbias[co] = dbias[co] + s;
    }
    let mut dx = need_dx.then(|| Tensor::zeros(cin, x.b, x.h, x.w));
    let mut g = vec![T::zero(); cout * ld];
    let mut dw = vec![T::zero(); cout * cin];
    let xm = MatRef::rows(&x.data, cin, ld, ld);
    for tap in 0..4 {
        let (ty, tx) = (tap / 2, tap % 2);
        for co in 0..cout {
            for bi in 0..x.b {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        g[co * ld + bi * x.hw() + y * x.w + xx] =
                            dy.data[((co * x.b + bi) * dy.h + 2 * y + ty) * dy.w + 2 * xx + tx];
                    }
                }
            }
        }
        let gm = MatRef::rows(&g, cout, ld, ld);
        gemm(T::one(), gm, xm.t(), T::zero(), &mut dw, cin);
        for co in 0..cout {
            for ci in 0..cin {
                let i = (co * cin + ci) * 4 + tap;
                dweight[i] = dweight[i] + dw[co * cin + ci];
            }
        }
        if let Some(dx) = dx.as_mut() {
            let wm = MatRef {
                data: &weight[tap..],
                rows: cout,
                cols: cin,
                rs: cin * 4,
                cs: 4,
            };
            gemm(T::one(), wm.t(), gm, T::one(), &mut dx.data, ld);
        }
    }
    dx
}

/// Channel concatenation; with the channel-major layout this is an append.
pub fn concat_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        b: a.b,
        h: a.h,
        w: a.w,
        data,
    }
}

pub fn concat_backward<T: Scalar>(dy: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let split = ca * dy.cols();
    let mk = |c: usize, data: &[T]| Tensor {
        c,
        b: dy.b,
        h: dy.h,
        w: dy.w,
        data: data.to_vec(),
    };
    (mk(ca, &dy.data[..split]), mk(dy.c - ca, &dy.data[split..]))
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (0 or `1 / (1 - rate)`).
pub fn dropout_forward<T: Scalar>(x: &Tensor<T>, rate: f64, rng: &mut Stream) -> (Tensor<T>, Vec<T>) {
    let keep = 1.0 - rate;
    let scale = T::from_f64(1.0 / keep);
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
        .collect();
    let mut out = x.clone();
    for (v, &m) in out.data.iter_mut().zip(&mask) {
        *v = *v * m;
    }
    (out, mask)
}

pub fn dropout_backward<T: Scalar>(dy: &Tensor<T>, mask: &[T]) -> Tensor<T> {
    let mut dx = dy.clone();
    for (v, &m) in dx.data.iter_mut().zip(mask) {
        *v = *v * m;
    }
    dx
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in &mut out.data {
        *v = v.max(T::zero());
    }
    out
}

pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &o) in dx.data.iter_mut().zip(&y.data) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

pub fn sigmoid_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in &mut out.data {
        *v = T::one() / (T::one() + (-*v).exp());
    }
    out
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &o) in dx.data.iter_mut().zip(&y.data) {
        *d = *d * o * (T::one() - o);
    }
    dx
}

/// Softmax over the feature axis of a `[F, B]` tensor.
pub fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (f, b) = (x.c, x.b);
    let mut out = x.clone();
    for bi in 0..b {
        let mx = (0..f).map(|i| x.data[i * b + bi]).fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for i in 0..f {
            let e = (x.data[i * b + bi] - mx).exp();
            out.data[i * b + bi] = e;
            total = total + e;
        }
        for i in 0..f {
            out.data[i * b + bi] = out.data[i * b + bi] / total;
        }
    }
    out
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (f, b) = (y.c, y.b);
    let mut dx = dy.clone();
    for bi in 0..b {
        let dot: T = (0..f).map(|i| y.data[i * b + bi] * dy.data[i * b + bi]).sum();
        for i in 0..f {
            let k = i * b + bi;
            dx.data[k] = y.data[k] * (dy.data[k] - dot);
        }
    }
    dx
}

/// `[C, B, H, W]` to `[C*H*W, B, 1, 1]`, feature index `c*H*W + y*W + x`.
pub fn flatten_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (hw, b) = (x.hw(), x.b);
    let mut out = Tensor::zeros(x.c * hw, b, 1, 1);
    for ci in 0..x.c {
        for bi in 0..b {
            let src = &x.data[(ci * b + bi) * hw..][..hw];
            for (p, &v) in src.iter().enumerate() {
                out.data[(ci * hw + p) * b + bi] = v;
            }
        }
    }
    out
}

pub fn flatten_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (hw, b) = (x.hw(), x.b);
    let mut dx = Tensor::zeros(x.c, b, x.h, x.w);
    for ci in 0..x.c {
        for bi in 0..b {
            let dst = &mut dx.data[(ci * b + bi) * hw..][..hw];
            for (p, d) in dst.iter_mut().enumerate() {
                *d = dy.data[(ci * hw + p) * b + bi];
            }
        }
    }
    dx
}

/// `y[fout, B] = W[fout, fin] x[fin, B] + b`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], fout: usize) -> Tensor<T> {
    let (fin, b) = (x.c, x.b);
    let mut out = Tensor::zeros(fout, b, 1, 1);
    gemm(
        T::one(),
        MatRef::rows(weight, fout, fin, fin),
        MatRef::rows(&x.data, fin, b, b),
        T::zero(),
        &mut out.data,
        b,
    );
    for (row, &bb) in out.data.chunks_exact_mut(b).zip(bias) {
        for v in row {
            *v = *v + bb;
        }
    }
    out
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    fout: usize,
    dy: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (fin, b) = (x.c, x.b);
    for (row, db) in dy.data.chunks_exact(b).zip(dbias.iter_mut()) {
        *db = *db + row.iter().copied().sum();
    }
    let dym = MatRef::rows(&dy.data, fout, b, b);
    gemm(T::one(), dym, MatRef::rows(&x.data, fin, b, b).t(), T::one(), dweight, fin);
    need_dx.then(|| {
        let mut dx = Tensor::zeros(fin, b, 1, 1);
        gemm(T::one(), MatRef::rows(weight, fout, fin, fin).t(), dym, T::zero(), &mut dx.data, b);
        dx
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_tensor(c: usize, b: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(c, b, h, w);
        for v in &mut t.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    /// Direct 3x3 convolution, zero-padded.
    fn naive_conv(x: &Tensor<f64>, wt: &[f64], bias: &[f64], cout: usize) -> Tensor<f64> {
        let mut out = Tensor::zeros(cout, x.b, x.h, x.w);
        for co in 0..cout {
            for bi in 0..x.b {
                for y in 0..x.h as isize {
                    for xx in 0..x.w as isize {
                        let mut s = bias[co];
                        for ci in 0..x.c {
                            for ky in 0..3isize {
                                for kx in 0..3isize {
                                    let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let wv = wt[((co * x.c + ci) * 3 + ky as usize) * 3 + kx as usize];
                                    s += wv * x.data[((ci * x.b + bi) * x.h + sy as usize) * x.w + sx as usize];
                                }
                            }
                        }
                        out.data[((co * x.b + bi) * x.h + y as usize) * x.w + xx as usize] = s;
                    }
                }
            }
        }
        out
    }

    fn close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = rand_tensor(3, 2, 5, 4, 1);
        let w = rand_tensor(4 * 3 * 9, 1, 1, 1, 2).data;
        let b = vec![0.1, -0.2, 0.3, 0.0];
        close(&conv_forward(&x, &w, &b, 4, 3).data, &naive_conv(&x, &w, &b, 4).data);
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, conv(x)> is linear in x and w: check dx and dw against it.
        let x = rand_tensor(2, 3, 4, 6, 3);
        let w = rand_tensor(5 * 2 * 9, 1, 1, 1, 4).data;
        let zero_b = vec![0.0; 5];
        let dy = rand_tensor(5, 3, 4, 6, 5);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 5];
        let dx = conv_backward(&x, &w, 5, 3, &dy, &mut dw, &mut db, true).unwrap();
        let y = conv_forward(&x, &w, &zero_b, 5, 3);
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let via_dx: f64 = dx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let via_dw: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - via_dx).abs() < 1e-9);
        assert!((lhs - via_dw).abs() < 1e-9);
        let total: f64 = dy.data.iter().sum();
        assert!((db.iter().sum::<f64>() - total).abs() < 1e-9);
    }

    #[test]
    fn pointwise_conv_and_dense_agree_with_loops() {
        let x = rand_tensor(3, 2, 2, 2, 6);
        let w = rand_tensor(2 * 3, 1, 1, 1, 7).data;
        let y = conv_forward(&x, &w, &[0.5, -0.5], 2, 1);
        for co in 0..2 {
            for j in 0..x.cols() {
                let s: f64 = (0..3).map(|ci| w[co * 3 + ci] * x.data[ci * x.cols() + j]).sum();
                assert!((y.data[co * x.cols() + j] - s - [0.5, -0.5][co]).abs() < 1e-12);
            }
        }
        let f = flatten_forward(&x);
        let d = dense_forward(&f, &rand_tensor(4 * 12, 1, 1, 1, 8).data, &[0.0; 4], 4);
        assert_eq!((d.c, d.b), (4, 2));
        assert_eq!(flatten_backward(&x, &f), x);
    }

    #[test]
    fn pool_and_upsample() {
        let mut x = Tensor::<f64>::zeros(1, 1, 2, 4);
        x.data = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0];
        let (p, arg) = maxpool_forward(&x);
        assert_eq!(p.data, vec![5.0, 9.0]);
        let dx = maxpool_backward(&x, &arg, &Tensor { data: vec![1.0, 2.0], ..p.clone() });
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let u = upsample_forward(&p);
        assert_eq!(u.data, vec![5.0, 5.0, 9.0, 9.0, 5.0, 5.0, 9.0, 9.0]);
        assert_eq!(upsample_backward(&u).data, vec![20.0, 36.0]);
    }

    #[test]
    fn upconv_backward_is_adjoint() {
        let x = rand_tensor(3, 2, 2, 3, 9);
        let w = rand_tensor(4 * 3 * 4, 1, 1, 1, 10).data;
        let dy = rand_tensor(4, 2, 4, 6, 11);
        let y = upconv_forward(&x, &w, &[0.0; 4], 4);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 4];
        let dx = upconv_backward(&x, &w, 4, &dy, &mut dw, &mut db, true).unwrap();
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let via_dx: f64 = dx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let via_dw: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - via_dx).abs() < 1e-9);
        assert!((lhs - via_dw).abs() < 1e-9);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let x = rand_tensor(3, 4, 1, 1, 12);
        let y = softmax_forward(&x);
        for bi in 0..4 {
            let s: f64 = (0..3).map(|i| y.data[i * 4 + bi]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
