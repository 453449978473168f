//! Resampling and smoothing on H×W×C rasters.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Binary mask, 1 = defect.
pub type Mask = Array2<u8>;

/// Source coordinate and blend weight for half-pixel-centred resampling.
fn taps(dst: usize, src: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let x0 = (x.floor() as usize).min(src - 1);
            let x1 = (x0 + 1).min(src - 1);
            (x0, x1, (x - x0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres and edge clamping. Resizing to the
/// current size is the identity and constant inputs stay constant.
pub fn resize_bilinear(src: ArrayView3<'_, f32>, size: (usize, usize)) -> Array3<f32> {
    let (sh, sw, c) = src.dim();
    let (th, tw) = size;
    if (sh, sw) == (th, tw) {
        return src.to_owned();
    }
    let ys = taps(th, sh);
    let xs = taps(tw, sw);
    let mut out = Array3::<f32>::zeros((th, tw, c));
    for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
            for k in 0..c {
                let top = src[[y0, x0, k]] * (1.0 - fx) + src[[y0, x1, k]] * fx;
                let bot = src[[y1, x0, k]] * (1.0 - fx) + src[[y1, x1, k]] * fx;
                out[[i, j, k]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_2d(src: ArrayView2<'_, f32>, size: (usize, usize)) -> Array2<f32> {
    resize_bilinear(src.insert_axis(Axis(2)), size).remove_axis(Axis(2))
}

/// Normalized 1-D Gaussian taps with radius `round(4σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5) as isize;
    let w: Vec<f64> = (-radius..=radius)
        .map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(src: ArrayView2<'_, f32>, sigma: f64) -> Result<Array2<f32>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Precondition(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = src.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                let jj = reflect_index(j as isize + t as isize - radius, w);
                acc += kv * src[[i, jj]] as f64;
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                let ii = reflect_index(i as isize + t as isize - radius, h);
                acc += kv * tmp[[ii, j]];
            }
            out[[i, j]] = acc as f32;
        }
    }
    Ok(out)
}
