//! Raw buffer kernels shared by forward and backward passes.

use super::Real;

/// `c = alpha * a·b + beta * c` for an `m×k` by `k×n` product with arbitrary
/// element strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    rsa: isize,
    csa: isize,
    b: &[Real],
    rsb: isize,
    csb: isize,
    beta: Real,
    c: &mut [Real],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given extents
    // and strides; callers only pass dense row- or column-major layouts.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Row-major `a (m×k) · b (k×n)`, optionally with either operand transposed
/// in storage (`ta`: `a` is stored `k×m`; `tb`: `b` is stored `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    ta: bool,
    b: &[Real],
    tb: bool,
    beta: Real,
    c: &mut [Real],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    gemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    (0..rank)
        .map(|i| match (dim_from_right(a, rank, i), dim_from_right(b, rank, i)) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn dim_from_right(shape: &[usize], rank: usize, i: usize) -> usize {
    let pad = rank - shape.len();
    if i < pad {
        1
    } else {
        shape[i - pad]
    }
}

/// Strides of `shape` viewed inside `out_shape`, with zero stride on
/// broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let own = contiguous_strides(shape);
    (0..rank)
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Visit every element of `out_shape` with the flat offsets of the matching
/// elements of two broadcast operands.
fn for_each_broadcast(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..total {
        f(flat, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    a_shape: &[usize],
    a: &[Real],
    b_shape: &[usize],
    b: &[Real],
    out_shape: &[usize],
    op: impl Fn(Real, Real) -> Real,
) -> Vec<Real> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| op(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let total: usize = out_shape.iter().product();
    let mut out = vec![0.0; total];
    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| out[o] = op(a[ia], b[ib]));
    out
}

/// Sum `src` (of `src_shape`) down to a broadcast-compatible `target` shape.
pub(crate) fn sum_to(src_shape: &[usize], src: &[Real], target: &[usize]) -> Vec<Real> {
    if src_shape == target {
        return src.to_vec();
    }
    let st = broadcast_strides(target, src_shape);
    let zeros = vec![0; src_shape.len()];
    let mut out = vec![0.0; target.iter().product()];
    for_each_broadcast(src_shape, &st, &zeros, |o, it, _| out[it] += src[o]);
    out
}

/// Broadcast `src` up to `target` (inverse of [`sum_to`]).
pub(crate) fn expand(src_shape: &[usize], src: &[Real], target: &[usize]) -> Vec<Real> {
    if src_shape == target {
        return src.to_vec();
    }
    let ss = broadcast_strides(src_shape, target);
    let zeros = vec![0; target.len()];
    let mut out = vec![0.0; target.iter().product()];
    for_each_broadcast(target, &ss, &zeros, |o, is, _| out[o] = src[is]);
    out
}

/// Transpose axes; output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(shape: &[usize], data: &[Real], axes: &[usize]) -> (Vec<usize>, Vec<Real>) {
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gathered: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zeros = vec![0; shape.len()];
    let mut out = vec![0.0; data.len()];
    for_each_broadcast(&out_shape, &gathered, &zeros, |o, i, _| out[o] = data[i]);
    (out_shape, out)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Max-shifted softmax over contiguous rows of width `n`.
pub(crate) fn softmax_rows(data: &[Real], n: usize) -> Vec<Real> {
    let mut out = vec![0.0; data.len()];
    for (row, dst) in data.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut sum = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            sum += *d;
        }
        let inv = 1.0 / sum;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

/// Standard normal CDF, evaluated in f64.
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn gelu(x: Real) -> Real {
    let x = x as f64;
    (x * normal_cdf(x)) as Real
}

pub(crate) fn gelu_grad(x: Real) -> Real {
    let x = x as f64;
    (normal_cdf(x) + x * normal_pdf(x)) as Real
}
