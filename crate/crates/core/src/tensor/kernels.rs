//! Raw numeric kernels shared by the forward and backward passes.

use crate::error::{Error, Result};

pub(crate) const NORM_FLOOR: f64 = 1e-12;

/// `c += a · b` for an `m×k` by `k×n` product with arbitrary element strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    rsc: isize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(span(m, k, rsa, csa) <= a.len());
    debug_assert!(span(k, n, rsb, csb) <= b.len());
    debug_assert!(span(m, n, rsc, 1) <= c.len());
    // SAFETY: the debug assertions above hold by construction at every call
    // site; all three operands are borrowed for the duration of the call and
    // `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            rsc,
            1,
        );
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs + 1) as usize
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(format!("shapes {a:?} and {b:?} are not broadcastable"))),
        };
    }
    Ok(out)
}

/// Strides that map an output index onto a broadcast input (zero on
/// broadcast axes).
fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - input.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= input[i];
    }
    strides
}

/// For each flat output index, the flat index into a broadcast input.
pub(crate) fn broadcast_index_map(input: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let in_n: usize = input.iter().product();
    if input == out {
        return (0..n).collect();
    }
    // Trailing-block broadcast such as a bias row over a matrix.
    if out.ends_with(input) || in_n == 1 {
        return (0..n).map(|i| i % in_n).collect();
    }
    let strides = broadcast_strides(input, out);
    let mut idx = vec![0usize; out.len()];
    let mut map = Vec::with_capacity(n);
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            pos += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            pos -= strides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Sums a gradient of shape `out` back onto a broadcast input shape.
pub(crate) fn reduce_to(grad: &[f64], input: &[usize], out: &[usize]) -> Vec<f64> {
    let in_n: usize = input.iter().product();
    if input == out {
        return grad.to_vec();
    }
    let mut acc = vec![0.0; in_n];
    if out.ends_with(input) || in_n == 1 {
        for (i, g) in grad.iter().enumerate() {
            acc[i % in_n] += g;
        }
        return acc;
    }
    for (g, j) in grad.iter().zip(broadcast_index_map(input, out)) {
        acc[j] += g;
    }
    acc
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax of every slice along an axis; masked entries
/// (mask false) get probability zero. Returns an error for a slice whose
/// entries are all masked.
pub(crate) fn softmax_axis(
    x: &[f64],
    shape: &[usize],
    axis: usize,
    mask: Option<&[bool]>,
    log: bool,
) -> Result<Vec<f64>> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let keep = |j: usize| mask.is_none_or(|m| m[base + j * inner]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                if keep(j) {
                    max = max.max(x[base + j * inner]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::contract("softmax over a fully masked slice"));
            }
            let mut z = 0.0;
            for j in 0..len {
                if keep(j) {
                    z += (x[base + j * inner] - max).exp();
                }
            }
            let lz = z.ln();
            for j in 0..len {
                if keep(j) {
                    let s = x[base + j * inner] - max;
                    out[base + j * inner] = if log { s - lz } else { s.exp() / z };
                }
            }
        }
    }
    Ok(out)
}

/// Copies `x` with its axes reordered so that output axis `i` is input axis
/// `axes[i]`.
pub(crate) fn permute(x: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..x.len() {
        out.push(x[pos]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            pos += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
