//! Per-location objectives over discriminator score fields.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    TruncatedL1,
    CrossEntropy,
}

/// Which locations of an anomalous image count as anomalous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalousMasking {
    /// Every location of a generated image is anomalous.
    AllLocations,
    /// Only locations under the downsampled defect mask; the rest are
    /// treated as normal locations.
    MaskOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau_plus: f64,
    pub tau_minus: f64,
    pub kind: LossKind,
    pub anomalous_masking: AnomalousMasking,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_plus: 0.5,
            tau_minus: -0.5,
            kind: LossKind::TruncatedL1,
            anomalous_masking: AnomalousMasking::MaskOnly,
        }
    }
}

/// Loss value and its gradient with respect to every score.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub d_normal: Array1<f64>,
    pub d_anomalous: Array1<f64>,
}

/// Per-location defect flags for the anomalous term.
fn defect_flags(n: usize, masking: AnomalousMasking, down_mask: Option<ArrayView1<'_, u8>>) -> Result<Vec<bool>> {
    match (masking, down_mask) {
        (AnomalousMasking::AllLocations, _) => Ok(vec![true; n]),
        (AnomalousMasking::MaskOnly, Some(m)) => {
            if m.len() != n {
                return Err(Error::Shape(format!("mask has {} cells, scores have {n}", m.len())));
            }
            Ok(m.iter().map(|&v| v > 0).collect())
        }
        (AnomalousMasking::MaskOnly, None) => Err(Error::Precondition(
            "mask_only masking requires a downsampled defect mask".into(),
        )),
    }
}

fn check_lengths(normal: ArrayView1<'_, f64>, anomalous: ArrayView1<'_, f64>) -> Result<usize> {
    if normal.len() != anomalous.len() {
        return Err(Error::Shape(format!(
            "normal field has {} locations, anomalous has {}",
            normal.len(),
            anomalous.len()
        )));
    }
    if normal.is_empty() {
        return Err(Error::Precondition("empty score fields".into()));
    }
    Ok(normal.len())
}

/// Two-sided hinge: push normal scores above τ+ and defect scores below τ−,
/// averaged over locations.
pub fn truncated_l1(
    normal: ArrayView1<'_, f64>,
    anomalous: ArrayView1<'_, f64>,
    cfg: &LossConfig,
    down_mask: Option<ArrayView1<'_, u8>>,
) -> Result<LossOutput> {
    let n = check_lengths(normal, anomalous)?;
    let defect = defect_flags(n, cfg.anomalous_masking, down_mask)?;
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut d_normal = Array1::zeros(n);
    let mut d_anomalous = Array1::zeros(n);
    for i in 0..n {
        let dn = normal[i];
        if cfg.tau_plus - dn > 0.0 {
            value += cfg.tau_plus - dn;
            d_normal[i] = -inv;
        }
        let da = anomalous[i];
        if defect[i] {
            if da - cfg.tau_minus > 0.0 {
                value += da - cfg.tau_minus;
                d_anomalous[i] = inv;
            }
        } else if cfg.tau_plus - da > 0.0 {
            value += cfg.tau_plus - da;
            d_anomalous[i] = -inv;
        }
    }
    Ok(LossOutput {
        value: value * inv,
        d_normal,
        d_anomalous,
    })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of one score, with σ(score) read as P(normal).
pub fn bce_term(score: f64, is_normal: bool) -> f64 {
    if is_normal {
        softplus(-score)
    } else {
        softplus(score)
    }
}

/// Binary cross-entropy averaged over all scored elements (both fields).
pub fn cross_entropy(
    normal: ArrayView1<'_, f64>,
    anomalous: ArrayView1<'_, f64>,
    masking: AnomalousMasking,
    down_mask: Option<ArrayView1<'_, u8>>,
) -> Result<LossOutput> {
    let n = check_lengths(normal, anomalous)?;
    let defect = defect_flags(n, masking, down_mask)?;
    let inv = 1.0 / (2 * n) as f64;
    let mut value = 0.0;
    let mut d_normal = Array1::zeros(n);
    let mut d_anomalous = Array1::zeros(n);
    for i in 0..n {
        value += bce_term(normal[i], true);
        d_normal[i] = (sigmoid(normal[i]) - 1.0) * inv;
        let is_normal = !defect[i];
        value += bce_term(anomalous[i], is_normal);
        d_anomalous[i] = (sigmoid(anomalous[i]) - if is_normal { 1.0 } else { 0.0 }) * inv;
    }
    Ok(LossOutput {
        value: value * inv,
        d_normal,
        d_anomalous,
    })
}

/// Dispatch on `cfg.kind`.
pub fn batch_loss(
    normal: ArrayView1<'_, f64>,
    anomalous: ArrayView1<'_, f64>,
    cfg: &LossConfig,
    down_mask: Option<ArrayView1<'_, u8>>,
) -> Result<LossOutput> {
    match cfg.kind {
        LossKind::TruncatedL1 => truncated_l1(normal, anomalous, cfg, down_mask),
        LossKind::CrossEntropy => cross_entropy(normal, anomalous, cfg.anomalous_masking, down_mask),
    }
}

fn flat<T: Clone>(a: ArrayView2<'_, T>) -> Array1<T> {
    a.iter().cloned().collect()
}

fn check_fields(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, m: Option<ArrayView2<'_, u8>>) -> Result<()> {
    if a.dim() != b.dim() || m.is_some_and(|m| m.dim() != a.dim()) {
        return Err(Error::Shape(format!(
            "score fields {:?} and {:?} (mask {:?}) differ",
            a.dim(),
            b.dim(),
            m.map(|m| m.dim())
        )));
    }
    Ok(())
}

/// Truncated ℓ1 loss over a pair of H0×W0 score fields.
pub fn truncated_l1_loss(
    scores_normal: ArrayView2<'_, f64>,
    scores_anomalous: ArrayView2<'_, f64>,
    cfg: &LossConfig,
    down_mask: Option<ArrayView2<'_, u8>>,
) -> Result<f64> {
    check_fields(scores_normal, scores_anomalous, down_mask)?;
    let mask = down_mask.map(flat);
    Ok(truncated_l1(
        flat(scores_normal).view(),
        flat(scores_anomalous).view(),
        cfg,
        mask.as_ref().map(|m| m.view()),
    )?
    .value)
}

/// Cross-entropy over a pair of H0×W0 score fields; without a mask every
/// anomalous location is a defect.
pub fn cross_entropy_loss(
    scores_normal: ArrayView2<'_, f64>,
    scores_anomalous: ArrayView2<'_, f64>,
    down_mask: Option<ArrayView2<'_, u8>>,
) -> Result<f64> {
    check_fields(scores_normal, scores_anomalous, down_mask)?;
    let masking = if down_mask.is_some() {
        AnomalousMasking::MaskOnly
    } else {
        AnomalousMasking::AllLocations
    };
    let mask = down_mask.map(flat);
    Ok(cross_entropy(
        flat(scores_normal).view(),
        flat(scores_anomalous).view(),
        masking,
        mask.as_ref().map(|m| m.view()),
    )?
    .value)
}

/// Max-pool a pixel mask onto a coarser grid: a cell is set iff its pixel
/// region holds at least one defect pixel.
pub fn downsample_mask(mask: ArrayView2<'_, u8>, target: (usize, usize)) -> Mask {
    let (h, w) = mask.dim();
    let (th, tw) = target;
    let span = |i: usize, n: usize, t: usize| ((i * n) / t, ((i + 1) * n).div_ceil(t));
    Array2::from_shape_fn((th, tw), |(i, j)| {
        let (r0, r1) = span(i, h, th);
        let (c0, c1) = span(j, w, tw);
        let hit = (r0..r1).any(|r| (c0..c1).any(|c| mask[[r, c]] > 0));
        u8::from(hit)
    })
}
