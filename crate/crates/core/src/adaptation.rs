//! Feature adaptors A/B and the patch discriminator, with analytic gradients.
//!
//! All head arithmetic is `f64`. Inputs are feature rows (one row per grid
//! location). In training mode the discriminator is applied to the normal and
//! the anomalous batch separately, each normalized with its own batch
//! statistics, so the two pathways only meet in the shared discriminator
//! parameters.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{AggregatedFeatureMap, BackboneSpec};
use crate::linalg;
use crate::par::Exec;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const ADAPTOR_INIT_STD: f64 = 1e-4;

static ADAPTOR_B_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of times Adaptor B has been applied in this process.
pub fn adaptor_b_calls() -> usize {
    ADAPTOR_B_CALLS.load(Ordering::SeqCst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdaptorRole {
    A,
    B,
}

/// Bias-free C×C linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptorParams {
    pub weight: Array2<f64>,
    pub role: AdaptorRole,
}

impl AdaptorParams {
    pub fn identity(c: usize, role: AdaptorRole) -> Self {
        AdaptorParams {
            weight: Array2::eye(c),
            role,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.ncols()
    }

    /// Apply to rows without role checks.
    pub fn apply_rows(&self, x: ArrayView2<'_, f64>, exec: Exec) -> Array2<f64> {
        if self.role == AdaptorRole::B {
            ADAPTOR_B_CALLS.fetch_add(1, Ordering::SeqCst);
        }
        linalg::linear(x, self.weight.view(), exec)
    }

    fn apply_map(&self, o: &AggregatedFeatureMap, expected: AdaptorRole) -> Result<Array3<f64>> {
        if self.role != expected {
            return Err(Error::RoleViolation {
                expected,
                actual: self.role,
            });
        }
        let (h, w, c) = o.data.dim();
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "feature map has {c} channels, adaptor expects {}",
                self.channels()
            )));
        }
        let rows = crate::features::to_rows(o.data.view());
        Ok(self
            .apply_rows(rows.view(), Exec::default())
            .into_shape_with_order((h, w, c))
            .expect("row count preserved"))
    }
}

/// q = A·o per location.
pub fn adapt_normal(o: &AggregatedFeatureMap, params: &AdaptorParams) -> Result<Array3<f64>> {
    params.apply_map(o, AdaptorRole::A)
}

/// q⁻ = B·oₐ per location.
pub fn adapt_anomalous(o_a: &AggregatedFeatureMap, params: &AdaptorParams) -> Result<Array3<f64>> {
    params.apply_map(o_a, AdaptorRole::B)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Linear → batch norm → leaky ReLU → linear.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    /// H_d × C
    pub layer1: Array2<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    /// H_d
    pub layer2: Array1<f64>,
    pub bias: f64,
}

/// Intermediates of a training-mode pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct DiscriminatorCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

fn leaky_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

impl DiscriminatorParams {
    pub fn input_channels(&self) -> usize {
        self.layer1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.layer1.nrows()
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_channels() {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {}",
                self.input_channels(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn head(&self, xhat: &Array2<f64>) -> Array1<f64> {
        let mut out = Array1::from_elem(xhat.nrows(), self.bias);
        for (r, row) in xhat.axis_iter(Axis(0)).enumerate() {
            let mut acc = 0.0;
            for j in 0..row.len() {
                acc += leaky(self.gamma[j] * row[j] + self.beta[j]) * self.layer2[j];
            }
            out[r] += acc;
        }
        out
    }

    /// Deterministic scoring with the running statistics.
    pub fn score_eval(&self, x: ArrayView2<'_, f64>, exec: Exec) -> Result<Array1<f64>> {
        self.check_input(x)?;
        let mut h = linalg::linear(x, self.layer1.view(), exec);
        let inv: Array1<f64> = self.running_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        for mut row in h.axis_iter_mut(Axis(0)) {
            for j in 0..row.len() {
                row[j] = (row[j] - self.running_mean[j]) * inv[j];
            }
        }
        Ok(self.head(&h))
    }

    /// Batch-statistics scoring; updates the running statistics.
    pub fn score_train(
        &mut self,
        x: ArrayView2<'_, f64>,
        exec: Exec,
    ) -> Result<(Array1<f64>, DiscriminatorCache)> {
        self.check_input(x)?;
        let m = x.nrows();
        if m < 2 {
            return Err(Error::Precondition(format!(
                "training-mode batch statistics need at least 2 locations, got {m}"
            )));
        }
        let mut h = linalg::linear(x, self.layer1.view(), exec);
        let mean = h.mean_axis(Axis(0)).expect("nonempty");
        let mut var = Array1::<f64>::zeros(self.hidden());
        for row in h.axis_iter(Axis(0)) {
            for j in 0..row.len() {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        let unbiased = var.mapv(|v| v / (m - 1) as f64);
        var.mapv_inplace(|v| v / m as f64);
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        for mut row in h.axis_iter_mut(Axis(0)) {
            for j in 0..row.len() {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        self.running_mean = &self.running_mean * (1.0 - BN_MOMENTUM) + &mean * BN_MOMENTUM;
        self.running_var = &self.running_var * (1.0 - BN_MOMENTUM) + &unbiased * BN_MOMENTUM;
        let scores = self.head(&h);
        Ok((scores, DiscriminatorCache { xhat: h, inv_std }))
    }
}

/// Per-location normality field D(q) for an H0×W0×C map.
pub fn discriminate(q: ArrayView3<'_, f64>, params: &mut DiscriminatorParams, mode: Mode) -> Result<Array2<f64>> {
    let (h, w, c) = q.dim();
    let rows = q
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((h * w, c))
        .expect("contiguous");
    let scores = match mode {
        Mode::Eval => params.score_eval(rows.view(), Exec::default())?,
        Mode::Train => params.score_train(rows.view(), Exec::default())?.0,
    };
    Ok(scores.into_shape_with_order((h, w)).expect("one score per location"))
}

/// Everything trained, plus the identity of the frozen feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub adaptor_a: AdaptorParams,
    pub adaptor_b: AdaptorParams,
    pub discriminator: DiscriminatorParams,
    pub backbone_spec: BackboneSpec,
    pub config_digest: String,
}

/// Gradients for every trainable parameter of [`ModelState`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub adaptor_a: Array2<f64>,
    pub adaptor_b: Array2<f64>,
    pub layer1: Array2<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub layer2: Array1<f64>,
    pub bias: f64,
}

/// Cached training-mode pass over one normal and one anomalous batch.
pub struct HeadPass {
    pub scores_normal: Array1<f64>,
    pub scores_anomalous: Array1<f64>,
    q_normal: Array2<f64>,
    q_anomalous: Array2<f64>,
    cache_normal: DiscriminatorCache,
    cache_anomalous: DiscriminatorCache,
}

impl ModelState {
    pub fn channels(&self) -> usize {
        self.adaptor_a.channels()
    }

    /// Eval-mode normality scores of normal-path rows (Adaptor A only).
    pub fn normality_rows(&self, x: ArrayView2<'_, f64>, exec: Exec) -> Result<Array1<f64>> {
        let q = self.adaptor_a.apply_rows(x, exec);
        self.discriminator.score_eval(q.view(), exec)
    }

    /// Training-mode forward through both pathways.
    pub fn forward_train(
        &mut self,
        normal: ArrayView2<'_, f64>,
        anomalous: ArrayView2<'_, f64>,
        exec: Exec,
    ) -> Result<HeadPass> {
        let c = self.channels();
        if normal.ncols() != c || anomalous.ncols() != c {
            return Err(Error::Shape(format!(
                "feature rows must have {c} channels (got {} and {})",
                normal.ncols(),
                anomalous.ncols()
            )));
        }
        let q_normal = self.adaptor_a.apply_rows(normal, exec);
        let q_anomalous = self.adaptor_b.apply_rows(anomalous, exec);
        let (scores_normal, cache_normal) = self.discriminator.score_train(q_normal.view(), exec)?;
        let (scores_anomalous, cache_anomalous) =
            self.discriminator.score_train(q_anomalous.view(), exec)?;
        Ok(HeadPass {
            scores_normal,
            scores_anomalous,
            q_normal,
            q_anomalous,
            cache_normal,
            cache_anomalous,
        })
    }

    /// Backpropagate upstream score gradients through both pathways.
    pub fn backward(
        &self,
        pass: &HeadPass,
        normal: ArrayView2<'_, f64>,
        anomalous: ArrayView2<'_, f64>,
        d_normal: ArrayView1<'_, f64>,
        d_anomalous: ArrayView1<'_, f64>,
        exec: Exec,
    ) -> HeadGrads {
        let d = &self.discriminator;
        let hd = d.hidden();
        let mut grads = HeadGrads {
            adaptor_a: Array2::zeros(self.adaptor_a.weight.dim()),
            adaptor_b: Array2::zeros(self.adaptor_b.weight.dim()),
            layer1: Array2::zeros(d.layer1.dim()),
            gamma: Array1::zeros(hd),
            beta: Array1::zeros(hd),
            layer2: Array1::zeros(hd),
            bias: 0.0,
        };
        let paths = [
            (&pass.cache_normal, &pass.q_normal, normal, d_normal, true),
            (&pass.cache_anomalous, &pass.q_anomalous, anomalous, d_anomalous, false),
        ];
        for (cache, q, x, ds, is_normal) in paths {
            let m = cache.xhat.nrows();
            let mut dxhat = Array2::<f64>::zeros((m, hd));
            let mut sum_dxhat = Array1::<f64>::zeros(hd);
            let mut sum_dxhat_xhat = Array1::<f64>::zeros(hd);
            for r in 0..m {
                let g = ds[r];
                grads.bias += g;
                for j in 0..hd {
                    let xh = cache.xhat[[r, j]];
                    let y = d.gamma[j] * xh + d.beta[j];
                    grads.layer2[j] += g * leaky(y);
                    let dy = g * d.layer2[j] * leaky_grad(y);
                    grads.gamma[j] += dy * xh;
                    grads.beta[j] += dy;
                    let dx = dy * d.gamma[j];
                    dxhat[[r, j]] = dx;
                    sum_dxhat[j] += dx;
                    sum_dxhat_xhat[j] += dx * xh;
                }
            }
            // batch-norm input gradient
            let mf = m as f64;
            let mut dh = dxhat;
            for r in 0..m {
                for j in 0..hd {
                    dh[[r, j]] = cache.inv_std[j] / mf
                        * (mf * dh[[r, j]] - sum_dxhat[j] - cache.xhat[[r, j]] * sum_dxhat_xhat[j]);
                }
            }
            grads.layer1 += &linalg::weight_grad(dh.view(), q.view(), exec);
            let dq = linalg::input_grad(dh.view(), d.layer1.view(), exec);
            let dw = linalg::weight_grad(dq.view(), x, exec);
            if is_normal {
                grads.adaptor_a += &dw;
            } else {
                grads.adaptor_b += &dw;
            }
        }
        grads
    }
}

/// Shape of the trainable head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub channels: usize,
    pub hidden: usize,
}

/// Seeded initialization: near-identity adaptors, fan-in uniform
/// discriminator layers, identity batch norm.
pub fn init_model(config: HeadConfig, backbone_spec: BackboneSpec, config_digest: &str, seed: u64) -> Result<ModelState> {
    let HeadConfig { channels: c, hidden: hd } = config;
    if c == 0 || hd == 0 {
        return Err(Error::Config(format!(
            "head dimensions must be positive (channels={c}, hidden={hd})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, ADAPTOR_INIT_STD).expect("positive std");
    let mut near_identity = |role| {
        let mut p = AdaptorParams::identity(c, role);
        p.weight.mapv_inplace(|v| v + noise.sample(&mut rng));
        p
    };
    let adaptor_a = near_identity(AdaptorRole::A);
    let adaptor_b = near_identity(AdaptorRole::B);
    let b1 = 1.0 / (c as f64).sqrt();
    let b2 = 1.0 / (hd as f64).sqrt();
    let u1 = Uniform::new(-b1, b1).expect("valid range");
    let u2 = Uniform::new(-b2, b2).expect("valid range");
    let layer1 = Array2::from_shape_simple_fn((hd, c), || u1.sample(&mut rng));
    let layer2 = Array1::from_shape_simple_fn(hd, || u2.sample(&mut rng));
    let bias = rng.sample(u2);
    Ok(ModelState {
        adaptor_a,
        adaptor_b,
        discriminator: DiscriminatorParams {
            layer1,
            gamma: Array1::ones(hd),
            beta: Array1::zeros(hd),
            running_mean: Array1::zeros(hd),
            running_var: Array1::ones(hd),
            layer2,
            bias,
        },
        backbone_spec,
        config_digest: config_digest.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn fmap(data: Array3<f32>) -> AggregatedFeatureMap {
        AggregatedFeatureMap {
            data,
            origin_id: "t".into(),
            levels_used: vec![2],
        }
    }

    fn model(c: usize, hd: usize, seed: u64) -> ModelState {
        init_model(HeadConfig { channels: c, hidden: hd }, BackboneSpec::default(), "d", seed).unwrap()
    }

    #[test]
    fn identity_and_scaled_adaptors() {
        let o = fmap(Array::from_shape_fn((2, 3, 4), |(i, j, k)| (i + j * 2 + k) as f32 * 0.5));
        let a = AdaptorParams::identity(4, AdaptorRole::A);
        let q = adapt_normal(&o, &a).unwrap();
        assert_eq!(q, o.data.mapv(f64::from));

        let mut two = AdaptorParams::identity(4, AdaptorRole::A);
        two.weight *= 2.0;
        let mut e = Array3::<f32>::zeros((1, 1, 4));
        e[[0, 0, 0]] = 1.0;
        let q = adapt_normal(&fmap(e), &two).unwrap();
        assert_eq!(q.iter().copied().collect::<Vec<_>>(), vec![2.0, 0.0, 0.0, 0.0]);

        let zero = fmap(Array3::zeros((2, 2, 4)));
        assert!(adapt_normal(&zero, &two).unwrap().iter().all(|&v| v == 0.0));
        let b = AdaptorParams::identity(4, AdaptorRole::B);
        assert!(adapt_anomalous(&zero, &b).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(adapt_anomalous(&o, &b).unwrap(), o.data.mapv(f64::from));
    }

    #[test]
    fn role_violation_is_rejected() {
        let o = fmap(Array3::zeros((1, 1, 3)));
        let b = AdaptorParams::identity(3, AdaptorRole::B);
        let err = adapt_normal(&o, &b).unwrap_err();
        assert!(err.to_string().contains("adaptor role violation"));
        let a = AdaptorParams::identity(3, AdaptorRole::A);
        assert!(adapt_anomalous(&o, &a).is_err());
    }

    #[test]
    fn separate_parameters_give_different_outputs() {
        let m = model(6, 6, 1);
        assert_ne!(m.adaptor_a.weight, m.adaptor_b.weight);
        let o = fmap(Array::from_shape_fn((2, 2, 6), |(i, j, k)| (i * 3 + j + k) as f32));
        assert_ne!(adapt_normal(&o, &m.adaptor_a).unwrap(), adapt_anomalous(&o, &m.adaptor_b).unwrap());
    }

    #[test]
    fn discriminator_shape_constant_and_determinism() {
        let mut m = model(8, 5, 2);
        let q = Array::from_shape_fn((3, 4, 8), |(i, j, k)| ((i * 13 + j * 5 + k) as f64).cos());
        let s1 = discriminate(q.view(), &mut m.discriminator, Mode::Eval).unwrap();
        let s2 = discriminate(q.view(), &mut m.discriminator, Mode::Eval).unwrap();
        assert_eq!(s1.dim(), (3, 4));
        assert_eq!(s1, s2);

        m.discriminator.layer2.fill(0.0);
        m.discriminator.bias = 0.37;
        let s = discriminate(q.view(), &mut m.discriminator, Mode::Eval).unwrap();
        assert!(s.iter().all(|&v| v == 0.37));
        let s = discriminate(q.view(), &mut m.discriminator, Mode::Train).unwrap();
        assert!(s.iter().all(|&v| v == 0.37));
    }

    #[test]
    fn train_mode_updates_stats_and_rejects_single_location() {
        let mut m = model(4, 3, 0);
        let q1 = Array3::<f64>::ones((1, 1, 4));
        assert!(discriminate(q1.view(), &mut m.discriminator, Mode::Train).is_err());
        let before = m.discriminator.clone();
        let q = Array::from_shape_fn((2, 2, 4), |(i, j, k)| (i + j + k) as f64);
        discriminate(q.view(), &mut m.discriminator, Mode::Eval).unwrap();
        assert_eq!(before, m.discriminator);
        discriminate(q.view(), &mut m.discriminator, Mode::Train).unwrap();
        assert_ne!(before.running_mean, m.discriminator.running_mean);
    }

    #[test]
    fn full_size_discriminator_output_shape() {
        let mut m = model(1536, 16, 0);
        let q = Array3::<f64>::from_elem((32, 32, 1536), 0.01);
        let s = discriminate(q.view(), &mut m.discriminator, Mode::Eval).unwrap();
        assert_eq!(s.dim(), (32, 32));
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        assert_eq!(model(12, 7, 0), model(12, 7, 0));
        assert_ne!(model(12, 7, 0), model(12, 7, 1));
        assert!(init_model(HeadConfig { channels: 0, hidden: 3 }, BackboneSpec::default(), "d", 0).is_err());
    }

    #[test]
    fn init_adaptor_is_near_identity() {
        // |(E o)_i| <= ||E_i||_2 ||o||_2 with E ~ N(0, 1e-4²): for unit-norm
        // o and C = 1536 the row norms concentrate at 1e-4·√1536 ≈ 3.9e-3.
        let c = 1536;
        let m = model(c, 4, 0);
        let e = &m.adaptor_a.weight - &Array2::<f64>::eye(c);
        let max_row_norm = e
            .axis_iter(Axis(0))
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0f64, f64::max);
        assert!(max_row_norm < 5e-3, "row norm {max_row_norm}");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..4 {
            let mut o = Array1::from_shape_simple_fn(c, || rng.random_range(-1.0f64..1.0));
            let norm = o.dot(&o).sqrt();
            o /= norm;
            let q = m.adaptor_a.weight.dot(&o);
            let dev = (&q - &o).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(dev <= max_row_norm + 1e-15);
            assert!(dev < 1e-2);
        }
    }
}
