//! Row-chunked matrix products shared by the adaptors, the discriminator and
//! their gradients.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use crate::par::{self, Exec};

/// Rows per work unit. Fixed so that results do not depend on the scheduler.
pub const ROW_CHUNK: usize = 256;

fn chunk_bounds(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(ROW_CHUNK))
        .map(|c| (c * ROW_CHUNK, ((c + 1) * ROW_CHUNK).min(n)))
        .collect()
}

/// `x · wᵀ` for row-major samples `x` (N×in) and a weight `w` (out×in).
pub fn linear(x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, exec: Exec) -> Array2<f64> {
    let n = x.nrows();
    if n <= ROW_CHUNK {
        return x.dot(&w.t());
    }
    let parts = par::map(exec, &chunk_bounds(n), |&(a, b)| {
        x.slice(s![a..b, ..]).dot(&w.t())
    });
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("chunks share column count")
}

/// `gᵀ · x` accumulated over row chunks: the weight gradient of [`linear`]
/// given upstream gradient `g` (N×out) and input `x` (N×in).
pub fn weight_grad(g: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, exec: Exec) -> Array2<f64> {
    let n = x.nrows();
    let parts = par::map(exec, &chunk_bounds(n), |&(a, b)| {
        g.slice(s![a..b, ..]).t().dot(&x.slice(s![a..b, ..]))
    });
    let mut acc = Array2::<f64>::zeros((g.ncols(), x.ncols()));
    for p in parts {
        acc += &p;
    }
    acc
}

/// `g · w`: the input gradient of [`linear`].
pub fn input_grad(g: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, exec: Exec) -> Array2<f64> {
    let n = g.nrows();
    if n <= ROW_CHUNK {
        return g.dot(&w);
    }
    let parts = par::map(exec, &chunk_bounds(n), |&(a, b)| g.slice(s![a..b, ..]).dot(&w));
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("chunks share column count")
}
