//! Minimal CHW convolution engine for frozen inference.

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Convolution with a folded per-channel affine (batch norm or bias).
#[derive(Clone, Debug)]
pub struct Conv {
    /// out × (in·k·k), matching the `[out, in, kh, kw]` memory layout.
    weight: Array2<f32>,
    in_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    scale: Array1<f32>,
    shift: Array1<f32>,
}

impl Conv {
    pub fn new(
        weight: Array2<f32>,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        scale: Array1<f32>,
        shift: Array1<f32>,
    ) -> Self {
        assert_eq!(weight.ncols(), in_ch * kernel * kernel);
        assert_eq!(weight.nrows(), scale.len());
        assert_eq!(weight.nrows(), shift.len());
        Conv {
            weight,
            in_ch,
            kernel,
            stride,
            pad,
            scale,
            shift,
        }
    }

    /// He-normal weights with an identity affine.
    pub fn he_init<R: Rng>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std");
        let weight = Array2::from_shape_simple_fn((out_ch, in_ch * kernel * kernel), || {
            normal.sample(rng)
        });
        Conv::new(
            weight,
            in_ch,
            kernel,
            stride,
            pad,
            Array1::ones(out_ch),
            Array1::zeros(out_ch),
        )
    }

    /// Fold `gamma * (x - mean) / sqrt(var + eps) + beta` into the affine.
    pub fn with_batch_norm(
        mut self,
        gamma: &[f32],
        beta: &[f32],
        mean: &[f32],
        var: &[f32],
        eps: f32,
    ) -> Self {
        for c in 0..self.out_channels() {
            let s = gamma[c] / (var[c] + eps).sqrt();
            self.scale[c] = s;
            self.shift[c] = beta[c] - mean[c] * s;
        }
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: ArrayView3<'_, f32>) -> Array3<f32> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (oh, ow) = self.output_size(h, w);
        let y = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            let cols = x
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((c, h * w))
                .expect("contiguous");
            self.weight.dot(&cols)
        } else {
            self.weight.dot(&self.im2col(x, oh, ow))
        };
        let mut y = y
            .into_shape_with_order((self.out_channels(), oh, ow))
            .expect("conv output shape");
        for (o, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
            let (s, b) = (self.scale[o], self.shift[o]);
            plane.mapv_inplace(|v| v * s + b);
        }
        y
    }

    fn im2col(&self, x: ArrayView3<'_, f32>, oh: usize, ow: usize) -> Array2<f32> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = x[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn hash_into(&self, hasher: &mut Sha256) {
        for v in self.weight.iter().chain(&self.scale).chain(&self.shift) {
            hasher.update(v.to_le_bytes());
        }
    }
}

pub fn relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// 3×3 stride-2 max pooling with padding 1.
pub fn max_pool_3x3_s2(x: ArrayView3<'_, f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let oh = (h + 2 - 3) / 2 + 1;
    let ow = (w + 2 - 3) / 2 + 1;
    Array3::from_shape_fn((c, oh, ow), |(ci, oy, ox)| {
        let mut m = f32::NEG_INFINITY;
        for dy in 0..3 {
            for dx in 0..3 {
                let iy = (oy * 2 + dy) as isize - 1;
                let ix = (ox * 2 + dx) as isize - 1;
                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                    m = m.max(x[[ci, iy as usize, ix as usize]]);
                }
            }
        }
        m
    })
}
