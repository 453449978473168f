//! Joint optimization of both adaptors and the discriminator.

mod loss;
mod optim;

use std::time::Instant;

use ndarray::{concatenate, Array1, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{
    batch_loss, bce_term, cross_entropy, cross_entropy_loss, downsample_mask, truncated_l1,
    truncated_l1_loss, AnomalousMasking, LossConfig, LossKind, LossOutput,
};
pub use optim::AdamW;

use crate::adaptation::ModelState;
use crate::error::{Error, Result};
use crate::features::stack_rows;
use crate::imageops::Mask;
use crate::par::{self, Exec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_adaptors: f64,
    pub lr_discriminator: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Extract all features once up front instead of per batch.
    pub cache_features: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_adaptors: 1e-4,
            lr_discriminator: 2e-4,
            weight_decay: 1e-5,
            batch_size: 16,
            epochs: 60,
            seed: 0,
            cache_features: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_adaptors > 0.0) || !(self.lr_discriminator > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.loss.tau_plus > self.loss.tau_minus) {
            return Err(Error::Config(format!(
                "tau_plus ({}) must exceed tau_minus ({})",
                self.loss.tau_plus, self.loss.tau_minus
            )));
        }
        Ok(())
    }
}

/// One normal training image paired with one of its generated variants.
pub struct TrainingPair {
    pub normal: Array3<f32>,
    pub anomalous: Array3<f32>,
    /// Defect mask on the feature grid.
    pub grid_mask: Mask,
}

/// Source of feature pairs for training.
pub trait TrainingData: Sync {
    /// Number of normal training images.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Generated variants available for normal image `i`.
    fn variant_count(&self, i: usize) -> usize;

    fn pair(&self, i: usize, variant: usize) -> Result<TrainingPair>;
}

/// Precomputed features held in memory.
pub struct CachedTrainingData {
    pub normals: Vec<Array3<f32>>,
    /// Per normal image: (anomalous features, grid mask).
    pub variants: Vec<Vec<(Array3<f32>, Mask)>>,
}

impl TrainingData for CachedTrainingData {
    fn len(&self) -> usize {
        self.normals.len()
    }

    fn variant_count(&self, i: usize) -> usize {
        self.variants[i].len()
    }

    fn pair(&self, i: usize, variant: usize) -> Result<TrainingPair> {
        let (anomalous, grid_mask) = &self.variants[i][variant];
        Ok(TrainingPair {
            normal: self.normals[i].clone(),
            anomalous: anomalous.clone(),
            grid_mask: grid_mask.clone(),
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr_adaptors: f64,
    pub lr_discriminator: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub log: Vec<StepRecord>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Called after each epoch with (epoch index, epoch mean loss, model).
pub type EpochHook<'a> = dyn FnMut(usize, f64, &ModelState) -> Result<()> + 'a;

/// Optimize the head over `data`.
///
/// Each epoch visits the normal images in a seeded random order; image `i`
/// is paired with variant `epoch mod variant_count(i)`.
pub fn train(
    data: &dyn TrainingData,
    mut model: ModelState,
    cfg: &TrainConfig,
    exec: Exec,
    on_epoch: &mut EpochHook<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Training("no normal training images".into()));
    }
    if let Some(i) = (0..data.len()).find(|&i| data.variant_count(i) == 0) {
        return Err(Error::Training(format!(
            "augmentation pool is empty for training image #{i}"
        )));
    }
    let mut opt = AdamW::new(&model, cfg.lr_adaptors, cfg.lr_discriminator, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let pairs = par::try_map(exec, batch, |&i| data.pair(i, epoch % data.variant_count(i)))?;
            let normals: Vec<_> = pairs.iter().map(|p| &p.normal).collect();
            let anomalies: Vec<_> = pairs.iter().map(|p| &p.anomalous).collect();
            let xn = stack_rows(&normals);
            let xa = stack_rows(&anomalies);
            let masks: Vec<Array1<u8>> = pairs.iter().map(|p| p.grid_mask.iter().copied().collect()).collect();
            let mask_views: Vec<_> = masks.iter().map(|m| m.view()).collect();
            let mask = concatenate(Axis(0), &mask_views).expect("1-d masks");
            if mask.len() != xa.nrows() {
                return Err(Error::Shape(format!(
                    "grid masks cover {} cells, features have {} locations",
                    mask.len(),
                    xa.nrows()
                )));
            }

            let pass = model.forward_train(xn.view(), xa.view(), exec)?;
            let out = batch_loss(
                pass.scores_normal.view(),
                pass.scores_anomalous.view(),
                &cfg.loss,
                Some(mask.view()),
            )?;
            if !out.value.is_finite() {
                let bad_n = pass.scores_normal.iter().filter(|v| !v.is_finite()).count();
                let bad_a = pass.scores_anomalous.iter().filter(|v| !v.is_finite()).count();
                return Err(Error::Training(format!(
                    "non-finite loss {} at epoch {epoch} step {step}: {bad_n} non-finite normal \
                     scores, {bad_a} non-finite anomalous scores",
                    out.value
                )));
            }
            let grads = model.backward(
                &pass,
                xn.view(),
                xa.view(),
                out.d_normal.view(),
                out.d_anomalous.view(),
                exec,
            );
            opt.step(&mut model, &grads);
            log.push(StepRecord {
                epoch,
                step,
                loss: out.value,
                lr_adaptors: cfg.lr_adaptors,
                lr_discriminator: cfg.lr_discriminator,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            sum += out.value;
            steps += 1;
            step += 1;
        }
        let mean = sum / steps as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
        on_epoch(epoch, mean, &model)?;
    }
    Ok(TrainOutcome {
        model,
        log,
        epoch_losses,
    })
}
