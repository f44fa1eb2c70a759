//! Row-major matrix kernels shared by the forward and backward passes.

use alloc::vec;

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) use crate::linalg::matmul_into as mm;

/// `out[m,k] += g[m,n] * b[k,n]^T`
///
/// `b` is a small weight matrix; transposing it once lets the product run as
/// row updates instead of dot-product reductions.
pub(crate) fn mm_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    mm(g, &bt, out, m, n, k);
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn mm_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// Column sums of `g[m,n]` added to `out[n]`.
pub(crate) fn col_sums(g: &[f64], out: &mut [f64], n: usize) {
    for row in g.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}
