//! Numeric kernels behind the graph operations.
//!
//! Everything here works on raw tensors and assumes shapes were validated
//! when the graph node was created.

use rayon::prelude::*;

use crate::tensor::Tensor;

/// Lower clamp applied to probabilities inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Left zero-padding for a "same" convolution. The right side receives the
/// remainder, so even kernels put the extra tap on the right.
pub fn same_padding_left(kernel: usize, dilation: usize) -> usize {
    (kernel - 1) * dilation / 2
}

fn tap_offset(k: usize, dilation: usize, pad_left: usize) -> isize {
    (k * dilation) as isize - pad_left as isize
}

/// Range of output positions `t` for which `t + off` lies in `[0, len)`.
fn valid_range(off: isize, len: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

/// `c = a · b + beta · c` on row-major slices; `a` and `b` are read
/// through `(row, col)` strides, `c` is contiguous `[m, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * sa.0 + (k - 1) * sa.1 < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * sb.0 + (n - 1) * sb.1 < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one sample `x: [Cin, L]` into `cols: [Cin·K, L]` where row
/// `c·K + k` holds `x[c]` shifted by tap `k`, zero outside the series.
fn im2col(x: &[f64], cin: usize, len: usize, k: usize, dilation: usize, cols: &mut [f64]) {
    let pad = same_padding_left(k, dilation);
    cols.fill(0.0);
    for c in 0..cin {
        let xrow = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let off = tap_offset(kk, dilation, pad);
            let (lo, hi) = valid_range(off, len);
            if lo == hi {
                continue;
            }
            let dst = &mut cols[(c * k + kk) * len..(c * k + kk + 1) * len];
            dst[lo..hi].copy_from_slice(&xrow[(lo as isize + off) as usize..(hi as isize + off) as usize]);
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` back into `x`.
fn col2im(cols: &[f64], cin: usize, len: usize, k: usize, dilation: usize, x: &mut [f64]) {
    let pad = same_padding_left(k, dilation);
    for c in 0..cin {
        let xrow = &mut x[c * len..(c + 1) * len];
        for kk in 0..k {
            let off = tap_offset(kk, dilation, pad);
            let (lo, hi) = valid_range(off, len);
            if lo == hi {
                continue;
            }
            let src = &cols[(c * k + kk) * len + lo..(c * k + kk) * len + hi];
            for (d, v) in xrow[(lo as isize + off) as usize..(hi as isize + off) as usize].iter_mut().zip(src) {
                *d += v;
            }
        }
    }
}

/// Cross-correlation with stride 1 and zero "same" padding.
/// `x: [B, Cin, L]`, `w: [Cout, Cin, K]` -> `[B, Cout, L]`.
pub fn conv1d(x: &Tensor, w: &Tensor, dilation: usize) -> Tensor {
    let (b, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let mut out = vec![0.0; b * cout * len];
    let xd = x.data();
    let wd = w.data();
    out.par_chunks_mut(cout * len).enumerate().for_each_init(
        || vec![0.0; cin * k * len],
        |cols, (bi, ob)| {
            im2col(&xd[bi * cin * len..(bi + 1) * cin * len], cin, len, k, dilation, cols);
            gemm(cout, cin * k, len, wd, (cin * k, 1), cols, (len, 1), 0.0, ob);
        },
    );
    Tensor::from_raw(vec![b, cout, len], out)
}

/// Adjoint of [`conv1d`] with respect to its input.
/// `g: [B, Cout, L]`, `w: [Cout, Cin, K]` -> `[B, Cin, L]`.
pub fn conv1d_input_grad(g: &Tensor, w: &Tensor, dilation: usize) -> Tensor {
    let (b, cout, len) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let (cin, k) = (w.shape()[1], w.shape()[2]);
    let mut out = vec![0.0; b * cin * len];
    let gd = g.data();
    let wd = w.data();
    out.par_chunks_mut(cin * len).enumerate().for_each_init(
        || vec![0.0; cin * k * len],
        |cols, (bi, xb)| {
            // cols = wᵀ · g_b
            let gb = &gd[bi * cout * len..(bi + 1) * cout * len];
            gemm(cin * k, cout, len, wd, (1, cin * k), gb, (len, 1), 0.0, cols);
            col2im(cols, cin, len, k, dilation, xb);
        },
    );
    Tensor::from_raw(vec![b, cin, len], out)
}

/// Adjoint of [`conv1d`] with respect to its kernel, summed over the batch.
/// `g: [B, Cout, L]`, `x: [B, Cin, L]` -> `[Cout, Cin, K]`.
pub fn conv1d_weight_grad(g: &Tensor, x: &Tensor, dilation: usize, k: usize) -> Tensor {
    let (b, cout, len) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let cin = x.shape()[1];
    let mut out = vec![0.0; cout * cin * k];
    let mut cols = vec![0.0; cin * k * len];
    // Samples are accumulated in order so the sum does not depend on threading.
    for bi in 0..b {
        im2col(&x.data()[bi * cin * len..(bi + 1) * cin * len], cin, len, k, dilation, &mut cols);
        let gb = &g.data()[bi * cout * len..(bi + 1) * cout * len];
        gemm(cout, len, cin * k, gb, (len, 1), &cols, (1, len), 1.0, &mut out);
    }
    Tensor::from_raw(vec![cout, cin, k], out)
}

/// Logical matrix dimensions `(rows, cols)` of the last two axes after an
/// optional transpose.
pub fn mat_dims(shape: &[usize], transpose: bool) -> (usize, usize) {
    let r = shape[shape.len() - 2];
    let c = shape[shape.len() - 1];
    if transpose {
        (c, r)
    } else {
        (r, c)
    }
}

/// `op(a) · op(b)` for rank-2 operands, or batched over a shared leading
/// axis for rank-3 operands.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (m, ka) = mat_dims(a.shape(), ta);
    let (kb, n) = mat_dims(b.shape(), tb);
    debug_assert_eq!(ka, kb);
    let batch = if a.rank() == 3 { a.shape()[0] } else { 1 };
    let a_mat = a.shape()[a.rank() - 2] * a.shape()[a.rank() - 1];
    let b_mat = b.shape()[b.rank() - 2] * b.shape()[b.rank() - 1];
    let (rsa, csa) = if ta { (1, m as isize) } else { (ka as isize, 1) };
    let (rsb, csb) = if tb { (1, ka as isize) } else { (n as isize, 1) };
    let mut out = vec![0.0; batch * m * n];
    let ad = a.data();
    let bd = b.data();
    out.par_chunks_mut(m * n).enumerate().for_each(|(bi, c)| {
        let ap = &ad[bi * a_mat..(bi + 1) * a_mat];
        let bp = &bd[bi * b_mat..(bi + 1) * b_mat];
        // SAFETY: the slices cover exactly the strided extents described to dgemm.
        unsafe {
            matrixmultiply::dgemm(
                m,
                ka,
                n,
                1.0,
                ap.as_ptr(),
                rsa,
                csa,
                bp.as_ptr(),
                rsb,
                csb,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
    let shape = if a.rank() == 3 { vec![batch, m, n] } else { vec![m, n] };
    Tensor::from_raw(shape, out)
}

/// Splits a shape around `axis` into `(outer, axis_len, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Adds `b[c]` to every element whose index along `axis` is `c`.
pub fn broadcast_add(x: &Tensor, b: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = x.data().to_vec();
    let bd = b.data();
    for o in 0..outer {
        for (c, &bv) in bd.iter().enumerate().take(n) {
            let start = (o * n + c) * inner;
            for v in &mut out[start..start + inner] {
                *v += bv;
            }
        }
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

/// Sums over every axis except `axis`, giving a vector of length `shape[axis]`.
pub fn reduce_to_axis(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; n];
    let xd = x.data();
    for o in 0..outer {
        for (c, acc) in out.iter_mut().enumerate() {
            let start = (o * n + c) * inner;
            *acc += xd[start..start + inner].iter().sum::<f64>();
        }
    }
    Tensor::from_raw(vec![n], out)
}

/// Repeats a vector along every axis except `axis` to fill `shape`.
pub fn broadcast_along(v: &Tensor, axis: usize, shape: &[usize]) -> Tensor {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * n * inner);
    for _ in 0..outer {
        for &val in v.data() {
            out.extend(std::iter::repeat_n(val, inner));
        }
    }
    Tensor::from_raw(shape.to_vec(), out)
}

pub fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut out = x.data().to_vec();
    if inner == 1 {
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        return Tensor::from_raw(x.shape().to_vec(), out);
    }
    for o in 0..outer {
        for i in 0..inner {
            let idx = |c: usize| (o * n + c) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for c in 0..n {
                max = max.max(out[idx(c)]);
            }
            let mut total = 0.0;
            for c in 0..n {
                let e = (out[idx(c)] - max).exp();
                out[idx(c)] = e;
                total += e;
            }
            for c in 0..n {
                out[idx(c)] /= total;
            }
        }
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

/// Vector-Jacobian product of softmax: `y ⊙ (g − Σ_axis g⊙y)`.
pub fn softmax_grad(g: &Tensor, y: &Tensor, axis: usize) -> Tensor {
    let (outer, n, inner) = split_axis(y.shape(), axis);
    let gd = g.data();
    let yd = y.data();
    let mut out = vec![0.0; yd.len()];
    if inner == 1 {
        for ((o, g), y) in out.chunks_exact_mut(n).zip(gd.chunks_exact(n)).zip(yd.chunks_exact(n)) {
            let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
            for ((o, g), y) in o.iter_mut().zip(g).zip(y) {
                *o = y * (g - dot);
            }
        }
        return Tensor::from_raw(y.shape().to_vec(), out);
    }
    for o in 0..outer {
        for i in 0..inner {
            let idx = |c: usize| (o * n + c) * inner + i;
            let dot: f64 = (0..n).map(|c| gd[idx(c)] * yd[idx(c)]).sum();
            for c in 0..n {
                out[idx(c)] = yd[idx(c)] * (gd[idx(c)] - dot);
            }
        }
    }
    Tensor::from_raw(y.shape().to_vec(), out)
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::from_raw(shape, out)
}

/// Takes `len` entries starting at `start` along `axis`.
pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::from_raw(shape, out)
}

/// Zero-pads `x` along `axis` so it occupies `[start, start+len)` of a
/// dimension of size `total`. Adjoint of [`slice`].
pub fn pad(x: &Tensor, axis: usize, start: usize, total: usize) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = total;
    let mut out = vec![0.0; outer * total * inner];
    for o in 0..outer {
        let dst = (o * total + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&x.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_raw(shape, out)
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1-1e-7]`.
pub fn bce(p: &Tensor, target: &Tensor) -> f64 {
    let n = p.len() as f64;
    p.data()
        .iter()
        .zip(target.data())
        .map(|(&p, &o)| {
            let p = clamp_prob(p);
            -(o * p.ln() + (1.0 - o) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Gradient of [`bce`] with respect to `p`, scaled by the upstream scalar.
/// Zero where the clamp is active.
pub fn bce_grad(upstream: f64, p: &Tensor, target: &Tensor) -> Tensor {
    let n = p.len() as f64;
    let data = p
        .data()
        .iter()
        .zip(target.data())
        .map(
            |(&p, &o)| {
                if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                    0.0
                } else {
                    upstream * (p - o) / (p * (1.0 - p)) / n
                }
            },
        )
        .collect();
    Tensor::from_raw(p.shape().to_vec(), data)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn padding_convention() {
        assert_eq!(same_padding_left(3, 1), 1);
        assert_eq!(same_padding_left(3, 2), 2);
        // Even kernels put the extra tap on the right.
        assert_eq!(same_padding_left(4, 1), 1);
        assert_eq!(same_padding_left(10, 1), 4);
        assert_eq!(same_padding_left(4, 3), 4);
    }

    #[test]
    fn conv_examples() {
        let ident = conv1d(&t(&[1, 1, 4], &[1., 2., 3., 4.]), &t(&[1, 1, 3], &[0., 1., 0.]), 1);
        assert_eq!(ident.data(), &[1., 2., 3., 4.]);
        let dil = conv1d(&t(&[1, 1, 5], &[1., 2., 3., 4., 5.]), &t(&[1, 1, 3], &[1., 1., 1.]), 2);
        assert_eq!(dil.data(), &[4., 6., 9., 6., 8.]);
        let ones = conv1d(&t(&[1, 1, 3], &[1., 1., 1.]), &t(&[1, 1, 3], &[1., 1., 1.]), 1);
        assert_eq!(ones.data(), &[2., 3., 2.]);
    }

    #[test]
    fn conv_adjoints_agree() {
        // <g, conv(x, w)> == <conv_input_grad(g, w), x> == <conv_weight_grad(g, x), w>
        let x = t(&[2, 2, 5], &(0..20).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
        let w = t(&[3, 2, 4], &(0..24).map(|i| (i as f64 * 0.91).cos()).collect::<Vec<_>>());
        let g = t(&[2, 3, 5], &(0..30).map(|i| (i as f64 * 0.53).sin()).collect::<Vec<_>>());
        for dil in 1..=3 {
            let y = conv1d(&x, &w, dil);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let gx = conv1d_input_grad(&g, &w, dil);
            let mid: f64 = gx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let gw = conv1d_weight_grad(&g, &x, dil, 4);
            let rhs: f64 = gw.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - mid).abs() < 1e-12 && (lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_transposes() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 2], &[1., 0., 0., 1., 1., 1.]);
        assert_eq!(matmul(&a, &b, false, false).data(), &[4., 5., 10., 11.]);
        let bt = t(&[2, 3], &[1., 0., 1., 0., 1., 1.]);
        assert_eq!(matmul(&a, &bt, false, true).data(), &[4., 5., 10., 11.]);
        let at = t(&[3, 2], &[1., 4., 2., 5., 3., 6.]);
        assert_eq!(matmul(&at, &bt, true, true).data(), &[4., 5., 10., 11.]);
    }

    #[test]
    fn softmax_rows() {
        let s = softmax(&t(&[2, 3], &[0., 0., 0., 1000., 0., -1000.]), 1);
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[3] - 1.0).abs() < 1e-15);
        let s0 = softmax(&t(&[2, 2], &[0., 1., 0., 1.]), 0);
        assert_eq!(s0.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn slice_pad_concat() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let s = slice(&x, 1, 1, 2);
        assert_eq!(s.data(), &[2., 3., 5., 6.]);
        assert_eq!(pad(&s, 1, 1, 3).data(), &[0., 2., 3., 0., 5., 6.]);
        let c = concat(&[&x, &s], 1);
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(c.data(), &[1., 2., 3., 2., 3., 4., 5., 6., 5., 6.]);
    }
}
