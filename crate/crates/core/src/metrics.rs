//! Detection and localization metrics plus the evaluation driver.
//!
//! Pixel-level AUROC and AP pool every pixel of every test image; mAP is the
//! unweighted mean of per-image pixel AP over images that contain both
//! classes. Thresholded metrics use min-max normalized scores and a single
//! threshold: precision, recall and macro-F1 are image-level (from the image
//! score), IoU is pixel-level and pooled.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adaptation::ModelState;
use crate::dataset::{load_image_record, DatasetManifest, Label, Split};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::imageops::Mask;
use crate::inference::{infer, AnomalyMap, InferenceConfig, ThresholdPolicy};
use crate::par::{self, Exec};

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn check_inputs(scores: &[f64], labels: &[bool], what: &str) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric(format!("{what} undefined: NaN score")));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "{what} undefined: need both classes (positives={pos}, negatives={neg})"
        )));
    }
    Ok((pos, neg))
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// Probability that a random positive outranks a random negative, ties
/// counted one half (Mann–Whitney U with mid-ranks).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels, "AUROC")?;
    let idx = ascending(scores);
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-wise area under the precision–recall curve, Σ (R_k − R_{k−1})·P_k
/// over descending distinct-score thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels, "AP")?;
    let mut idx = ascending(scores);
    idx.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if labels[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Mean per-image AP. Images lacking either class are skipped; returns the
/// mean and the number skipped.
pub fn mean_average_precision(per_image: &[(Vec<f64>, Vec<bool>)]) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for (i, (s, l)) in per_image.iter().enumerate() {
        let (pos, neg) = class_counts(l);
        if pos == 0 || neg == 0 {
            log::debug!("mAP: skipping image #{i} (positives={pos}, negatives={neg})");
            skipped += 1;
            continue;
        }
        sum += average_precision(s, l)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric("mAP undefined: every image was skipped".into()));
    }
    Ok((sum / used as f64, skipped))
}

fn pooled_pixels(maps: &[&AnomalyMap], masks: &[&Mask]) -> Result<(Vec<f64>, Vec<bool>)> {
    if maps.len() != masks.len() {
        return Err(Error::Shape(format!("{} maps but {} masks", maps.len(), masks.len())));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, g) in maps.iter().zip(masks) {
        if m.scores.dim() != g.dim() {
            return Err(Error::Shape(format!(
                "map `{}` is {:?}, mask is {:?}",
                m.source_id,
                m.scores.dim(),
                g.dim()
            )));
        }
        scores.extend(m.scores.iter().map(|&v| f64::from(v)));
        labels.extend(g.iter().map(|&v| v > 0));
    }
    Ok((scores, labels))
}

/// AUROC over every pixel of every image.
pub fn pixel_auroc(maps: &[&AnomalyMap], masks: &[&Mask]) -> Result<f64> {
    let (s, l) = pooled_pixels(maps, masks)?;
    auroc(&s, &l)
}

/// |a ∩ b| / |a ∪ b|; two empty sets agree perfectly.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Precision, recall and F1 of the positive class.
fn prf(pred: &[bool], truth: &[bool]) -> (f64, f64, f64) {
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count() as f64;
    let fp = pred.iter().zip(truth).filter(|(p, t)| **p && !**t).count() as f64;
    let fnn = pred.iter().zip(truth).filter(|(p, t)| !**p && **t).count() as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Mean of the F1 scores of both classes.
pub fn macro_f1(pred: &[bool], truth: &[bool]) -> f64 {
    let (_, _, f_pos) = prf(pred, truth);
    let inv_p: Vec<bool> = pred.iter().map(|v| !v).collect();
    let inv_t: Vec<bool> = truth.iter().map(|v| !v).collect();
    let (_, _, f_neg) = prf(&inv_p, &inv_t);
    (f_pos + f_neg) / 2.0
}

/// Affine map of scores onto [0, 1] from a fixed range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let (min, max) = values
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        MinMax { min, max }
    }

    pub fn apply(&self, v: f64) -> f64 {
        if self.max > self.min {
            (v - self.min) / (self.max - self.min)
        } else {
            0.0
        }
    }
}

/// An evaluated image: its map, ground-truth mask and label.
#[derive(Clone, Debug)]
pub struct ScoredImage {
    pub map: AnomalyMap,
    pub mask: Mask,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Thresholded {
    pub precision: f64,
    pub recall: f64,
    pub macro_f1: f64,
    pub iou: f64,
    pub threshold: f64,
}

fn pick_threshold(val_scores: &[f64], val_truth: &[bool]) -> Option<f64> {
    let (pos, neg) = class_counts(val_truth);
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut candidates = val_scores.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best: Option<(f64, f64)> = None;
    for &t in &candidates {
        let pred: Vec<bool> = val_scores.iter().map(|&s| s >= t).collect();
        let (_, _, f1) = prf(&pred, val_truth);
        if best.is_none_or(|(_, b)| f1 > b) {
            best = Some((t, f1));
        }
    }
    best.map(|(t, _)| t)
}

/// Threshold selection and the thresholded metrics on `test`.
///
/// Scores are normalized with the min/max image score over `val ∪ test`;
/// pixel scores use the same normalization so a single threshold applies to
/// both levels.
pub fn thresholded_metrics(test: &[ScoredImage], val: &[ScoredImage], policy: ThresholdPolicy) -> Result<Thresholded> {
    if test.is_empty() {
        return Err(Error::Metric("no test images".into()));
    }
    let norm = MinMax::fit(test.iter().chain(val).map(|s| s.map.image_score));
    let threshold = match policy {
        ThresholdPolicy::Fixed => 0.5,
        ThresholdPolicy::BestF1OnVal => {
            let vs: Vec<f64> = val.iter().map(|s| norm.apply(s.map.image_score)).collect();
            let vt: Vec<bool> = val.iter().map(|s| s.label == Label::Anomalous).collect();
            match pick_threshold(&vs, &vt) {
                Some(t) => t,
                None => {
                    log::warn!(
                        "validation split has no usable images of both classes; \
                         falling back to a fixed threshold of 0.5"
                    );
                    0.5
                }
            }
        }
    };
    let pred: Vec<bool> = test.iter().map(|s| norm.apply(s.map.image_score) >= threshold).collect();
    let truth: Vec<bool> = test.iter().map(|s| s.label == Label::Anomalous).collect();
    let (precision, recall, _) = prf(&pred, &truth);
    let mut pix_pred = Vec::new();
    let mut pix_truth = Vec::new();
    for s in test {
        pix_pred.extend(s.map.scores.iter().map(|&v| norm.apply(f64::from(v)) >= threshold));
        pix_truth.extend(s.mask.iter().map(|&v| v > 0));
    }
    Ok(Thresholded {
        precision,
        recall,
        macro_f1: macro_f1(&pred, &truth),
        iou: iou(&pix_pred, &pix_truth),
        threshold,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub macro_f1: f64,
    pub map: f64,
    pub iou: f64,
    pub ap: f64,
    pub i_auroc: f64,
    pub p_auroc: f64,
    pub threshold_used: f64,
    pub n_images: usize,
    pub n_pixels_evaluated: usize,
    pub map_skipped: usize,
    pub flags: Vec<String>,
}

/// Column order of the comparison table.
pub const TABLE_COLUMNS: [&str; 8] = ["P.", "R.", "M.-F1", "mAP", "IoU", "AP", "I/A", "P/A"];

impl MetricsReport {
    pub fn values(&self) -> [f64; 8] {
        [
            self.precision,
            self.recall,
            self.macro_f1,
            self.map,
            self.iou,
            self.ap,
            self.i_auroc,
            self.p_auroc,
        ]
    }

    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("precision", self.precision),
            ("recall", self.recall),
            ("macro_f1", self.macro_f1),
            ("map", self.map),
            ("iou", self.iou),
            ("ap", self.ap),
            ("i_auroc", self.i_auroc),
            ("p_auroc", self.p_auroc),
            ("threshold_used", self.threshold_used),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "n_images={}", self.n_images);
        let _ = writeln!(s, "n_pixels_evaluated={}", self.n_pixels_evaluated);
        let _ = writeln!(s, "map_skipped={}", self.map_skipped);
        let _ = writeln!(s, "flags={}", self.flags.join(","));
        s
    }

    pub fn from_key_value(text: &str) -> Result<Self> {
        let mut get = std::collections::HashMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                get.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let num = |k: &str| -> Result<f64> {
            get.get(k)
                .ok_or_else(|| Error::Metric(format!("report is missing `{k}`")))?
                .parse()
                .map_err(|_| Error::Metric(format!("report field `{k}` is not a number")))
        };
        Ok(MetricsReport {
            precision: num("precision")?,
            recall: num("recall")?,
            macro_f1: num("macro_f1")?,
            map: num("map")?,
            iou: num("iou")?,
            ap: num("ap")?,
            i_auroc: num("i_auroc")?,
            p_auroc: num("p_auroc")?,
            threshold_used: num("threshold_used")?,
            n_images: num("n_images")? as usize,
            n_pixels_evaluated: num("n_pixels_evaluated")? as usize,
            map_skipped: num("map_skipped").unwrap_or(0.0) as usize,
            flags: get
                .get("flags")
                .map(|f| f.split(',').filter(|s| !s.is_empty()).map(String::from).collect())
                .unwrap_or_default(),
        })
    }
}

/// Render rows of (dataset, method, report) as a fixed-width table.
pub fn format_table(rows: &[(String, String, MetricsReport)]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<16} {:<24}", "Dataset", "Method");
    for c in TABLE_COLUMNS {
        let _ = write!(s, " {c:>6}");
    }
    s.push('\n');
    for (dataset, method, r) in rows {
        let _ = write!(s, "{dataset:<16} {method:<24}");
        for v in r.values() {
            let _ = write!(s, " {v:>6.2}");
        }
        s.push('\n');
    }
    s
}

/// Assemble all eight metrics from scored test (and validation) images.
pub fn compute_report(test: &[ScoredImage], val: &[ScoredImage], policy: ThresholdPolicy) -> Result<MetricsReport> {
    let image_scores: Vec<f64> = test.iter().map(|s| s.map.image_score).collect();
    let image_labels: Vec<bool> = test.iter().map(|s| s.label == Label::Anomalous).collect();
    let i_auroc = auroc(&image_scores, &image_labels)?;
    let maps: Vec<&AnomalyMap> = test.iter().map(|s| &s.map).collect();
    let masks: Vec<&Mask> = test.iter().map(|s| &s.mask).collect();
    let (pix_s, pix_l) = pooled_pixels(&maps, &masks)?;
    let p_auroc = auroc(&pix_s, &pix_l)?;
    let ap = average_precision(&pix_s, &pix_l)?;
    let per_image: Vec<(Vec<f64>, Vec<bool>)> = test
        .iter()
        .map(|s| {
            (
                s.map.scores.iter().map(|&v| f64::from(v)).collect(),
                s.mask.iter().map(|&v| v > 0).collect(),
            )
        })
        .collect();
    let (map, map_skipped) = mean_average_precision(&per_image)?;
    let th = thresholded_metrics(test, val, policy)?;
    Ok(MetricsReport {
        precision: th.precision,
        recall: th.recall,
        macro_f1: th.macro_f1,
        map,
        iou: th.iou,
        ap,
        i_auroc,
        p_auroc,
        threshold_used: th.threshold,
        n_images: test.len(),
        n_pixels_evaluated: pix_s.len(),
        map_skipped,
        flags: Vec::new(),
    })
}

/// Infer every record of `split` and pair it with its ground truth.
pub fn score_split(
    manifest: &DatasetManifest,
    split: Split,
    extractor: &FeatureExtractor,
    model: &ModelState,
    cfg: &InferenceConfig,
    exec: Exec,
) -> Result<Vec<ScoredImage>> {
    let entries: Vec<_> = manifest.split(split).cloned().collect();
    par::try_map(exec, &entries, |e| {
        let rec = load_image_record(&manifest.root, e)?;
        let map = infer(rec.image.view(), &rec.id, extractor, model, cfg)?;
        let mask = rec.mask_or_empty();
        Ok(ScoredImage {
            map,
            mask,
            label: rec.label,
        })
    })
}

/// Score the test split (thresholds from the val split) and report.
pub fn evaluate(
    model: &ModelState,
    extractor: &FeatureExtractor,
    manifest: &DatasetManifest,
    cfg: &InferenceConfig,
    exec: Exec,
) -> Result<MetricsReport> {
    let test = score_split(manifest, Split::Test, extractor, model, cfg, exec)?;
    if !test.iter().any(|s| s.label == Label::Anomalous) || !test.iter().any(|s| s.label == Label::Normal) {
        return Err(Error::Metric("test split needs both normal and anomalous images".into()));
    }
    let val = score_split(manifest, Split::Val, extractor, model, cfg, exec)?;
    compute_report(&test, &val, cfg.threshold_policy)
}
