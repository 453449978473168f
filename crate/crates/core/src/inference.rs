//! Test-time scoring: features → Adaptor A → discriminator → anomaly map.
//!
//! Adaptor B and the synthesis module are never touched here.

use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::adaptation::ModelState;
use crate::error::{Error, Result};
use crate::features::{to_rows, FeatureExtractor};
use crate::imageops::{gaussian_blur, resize_bilinear_2d};
use crate::par::{self, Exec};

/// Source of the image-level score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorePolicy {
    /// Maximum of the raw grid.
    PreSmoothing,
    /// Maximum of the upsampled, smoothed map.
    PostSmoothing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    BestF1OnVal,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub sigma: f64,
    pub score_policy: ScorePolicy,
    pub threshold_policy: ThresholdPolicy,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            sigma: 4.0,
            score_policy: ScorePolicy::PreSmoothing,
            threshold_policy: ThresholdPolicy::BestF1OnVal,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    /// H×W smoothed map at input resolution.
    pub scores: Array2<f32>,
    /// H0×W0 raw patch scores.
    pub grid_scores: Array2<f32>,
    pub image_score: f64,
    pub source_id: String,
}

/// s = −D(q) per location, eval mode.
pub fn patch_scores(q: ArrayView3<'_, f64>, model: &ModelState) -> Result<Array2<f32>> {
    let (h, w, c) = q.dim();
    let rows = q
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((h * w, c))
        .expect("contiguous");
    let d = model.discriminator.score_eval(rows.view(), Exec::Sequential)?;
    Ok(d.mapv(|v| (-v) as f32)
        .into_shape_with_order((h, w))
        .expect("one score per location"))
}

/// Bilinear upsample to `target`, then Gaussian smoothing.
pub fn localize(grid: ArrayView2<'_, f32>, target: (usize, usize), sigma: f64) -> Result<Array2<f32>> {
    let (gh, gw) = grid.dim();
    if target.0 < gh || target.1 < gw {
        return Err(Error::Precondition(format!(
            "target {target:?} is smaller than the score grid {:?}",
            (gh, gw)
        )));
    }
    gaussian_blur(resize_bilinear_2d(grid, target).view(), sigma)
}

/// Maximum entry of the grid.
pub fn image_score(grid: ArrayView2<'_, f32>) -> Result<f64> {
    grid.iter()
        .copied()
        .fold(None, |acc: Option<f32>, v| Some(acc.map_or(v, |a| a.max(v))))
        .map(f64::from)
        .ok_or_else(|| Error::Precondition("empty score grid".into()))
}

/// Score one H×W×3 image.
pub fn infer(
    image: ArrayView3<'_, f32>,
    id: &str,
    extractor: &FeatureExtractor,
    model: &ModelState,
    cfg: &InferenceConfig,
) -> Result<AnomalyMap> {
    if &model.backbone_spec != extractor.spec() {
        return Err(Error::Config(format!(
            "checkpoint was trained with backbone {:?} but the extractor is {:?}",
            model.backbone_spec,
            extractor.spec()
        )));
    }
    let o = extractor.extract_features(image, id)?;
    let (gh, gw) = o.grid();
    let rows = to_rows(o.data.view());
    let normality = model.normality_rows(rows.view(), Exec::Sequential)?;
    let grid = normality
        .mapv(|v| (-v) as f32)
        .into_shape_with_order((gh, gw))
        .expect("one score per location");
    let (h, w, _) = image.dim();
    let scores = localize(grid.view(), (h, w), cfg.sigma)?;
    let image_score = match cfg.score_policy {
        ScorePolicy::PreSmoothing => image_score(grid.view())?,
        ScorePolicy::PostSmoothing => image_score(scores.view())?,
    };
    if !image_score.is_finite() || scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition(format!("non-finite anomaly scores for `{id}`")));
    }
    Ok(AnomalyMap {
        scores,
        grid_scores: grid,
        image_score,
        source_id: id.to_string(),
    })
}

/// Score a batch of `(id, image)` pairs, order preserved.
pub fn infer_batch(
    items: &[(String, ArrayView3<'_, f32>)],
    extractor: &FeatureExtractor,
    model: &ModelState,
    cfg: &InferenceConfig,
    exec: Exec,
) -> Result<Vec<AnomalyMap>> {
    par::try_map(exec, items, |(id, img)| infer(img.view(), id, extractor, model, cfg))
}
