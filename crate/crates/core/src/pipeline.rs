//! Stage orchestration: generate, train, infer, evaluate, report.
//!
//! Every stage works inside `output_dir/<run id>/`:
//!
//! ```text
//! dataset_manifest.jsonl   split assignment
//! pool/                    generated anomalies and pool.jsonl
//! checkpoints/             last.ckpt, best.ckpt, model.ckpt
//! train_log.jsonl          one StepRecord per optimizer step
//! infer/                   maps/*.f32, overlays/*.png, scores.csv
//! report.txt, report.json  MetricsReport
//! run_manifest.json        digests of every input and output
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{init_model, ModelState};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{
    decode_image, load_image_record, load_manifest, split_manifest, DatasetManifest, Label, LayoutSpec,
    ManifestEntry, Split,
};
use crate::error::{Error, Result};
use crate::features::{to_rows, FeatureExtractor};
use crate::inference::{infer, AnomalyMap};
use crate::metrics::{self, auroc, format_table, MetricsReport};
use crate::par::{self, Exec};
use crate::synthesis::{self, load_pool_sample, read_pool, PoolEntry, PoolSummary};
use crate::training::{downsample_mask, train, CachedTrainingData, TrainingData, TrainingPair};

pub const CONFIG_MISMATCH: &str = "config-mismatch";

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub exec: Exec,
    /// Evaluate even when the checkpoint's config digest differs.
    pub force: bool,
    pub emit_overlays: bool,
}

/// One run directory bound to its configuration.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub opts: RunOptions,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub checkpoint_digest: String,
    pub epoch_losses: Vec<f64>,
}

/// `report.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub dataset: String,
    pub method: String,
    pub report: MetricsReport,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

impl Run {
    pub fn new(config: RunConfig, opts: RunOptions) -> Self {
        let dir = config.run_dir();
        Run { config, dir, opts }
    }

    pub fn pool_dir(&self) -> PathBuf {
        self.dir.join("pool")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn model_path(&self) -> PathBuf {
        self.checkpoint_dir().join("model.ckpt")
    }

    fn dataset_root(&self) -> Result<PathBuf> {
        if self.config.dataset.root.is_empty() {
            return Err(Error::Config("dataset.root is not set".into()));
        }
        Ok(PathBuf::from(&self.config.dataset.root))
    }

    fn manifest_path(&self) -> PathBuf {
        self.dir.join("dataset_manifest.jsonl")
    }

    /// Merge `fields` into `run_manifest.json`.
    fn record(&self, fields: &[(&str, serde_json::Value)]) -> Result<()> {
        let path = self.dir.join("run_manifest.json");
        let mut obj: serde_json::Map<String, serde_json::Value> = fs::read_to_string(&path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        obj.insert("config_digest".into(), self.config.digest().into());
        obj.insert("run_id".into(), self.config.run_id().into());
        for (k, v) in fields {
            obj.insert((*k).into(), v.clone());
        }
        let text = serde_json::to_string_pretty(&obj).expect("json object");
        write(&path, text)
    }

    /// Split the dataset, write its manifest and generate the anomaly pool.
    pub fn generate(&self) -> Result<PoolSummary> {
        let cfg = &self.config;
        let root = self.dataset_root()?;
        let layout = LayoutSpec::by_name(&cfg.dataset.adapter)?;
        let manifest = split_manifest(&load_manifest(&root, &layout)?, cfg.dataset.ratios, cfg.dataset.seed)?;
        mkdir(&self.dir)?;
        write(&self.dir.join("config.toml"), toml::to_string(cfg).expect("config serializes"))?;
        let text = manifest.to_jsonl();
        write(&self.manifest_path(), &text)?;
        let backend = cfg.synthesis.backend()?;
        let pool = synthesis::generate_pool(
            &manifest,
            &cfg.synthesis,
            backend.as_ref(),
            cfg.dataset.seed,
            &self.pool_dir(),
            self.opts.exec,
        )?;
        let (tr, va, te) = manifest.split_counts();
        log::info!(
            "split {tr}/{va}/{te}; pool of {} samples ({} rejected)",
            pool.entries.len(),
            pool.rejections
        );
        self.record(&[
            ("dataset_manifest_digest", sha256_hex(text.as_bytes()).into()),
            ("pool_digest", pool.digest.clone().into()),
            ("pool_rejections", pool.rejections.into()),
        ])?;
        Ok(pool)
    }

    fn load_dataset_manifest(&self) -> Result<DatasetManifest> {
        let path = self.manifest_path();
        if !path.exists() {
            return Err(Error::Precondition(format!(
                "dataset manifest {} not found; run `generate` first",
                path.display()
            )));
        }
        DatasetManifest::read(&path, &self.dataset_root()?)
    }

    fn load_pool(&self) -> Result<PoolSummary> {
        let dir = self.pool_dir();
        if !synthesis::pool_manifest_path(&dir).exists() {
            return Err(Error::Precondition(format!(
                "augmentation pool not found under {}; run `generate` first",
                dir.display()
            )));
        }
        let pool = read_pool(&dir)?;
        if pool.entries.is_empty() {
            return Err(Error::Precondition(format!(
                "augmentation pool under {} is empty; rerun `generate`",
                dir.display()
            )));
        }
        Ok(pool)
    }

    /// Train the head on cached (or lazily extracted) features.
    pub fn train(&self) -> Result<TrainSummary> {
        let cfg = &self.config;
        let exec = self.opts.exec;
        let manifest = self.load_dataset_manifest()?;
        let pool = self.load_pool()?;
        let extractor = FeatureExtractor::from_spec(&cfg.model.backbone_spec())?;
        let normals: Vec<ManifestEntry> = manifest
            .split(Split::Train)
            .filter(|e| e.label == Label::Normal)
            .cloned()
            .collect();
        let index: HashMap<&str, usize> = normals.iter().enumerate().map(|(i, e)| (e.id.as_str(), i)).collect();
        let mut by_source: Vec<Vec<PoolEntry>> = vec![Vec::new(); normals.len()];
        for e in &pool.entries {
            let i = *index.get(e.source_id.as_str()).ok_or_else(|| {
                Error::Dataset(format!("pool entry for `{}` is not a normal training record", e.source_id))
            })?;
            by_source[i].push(e.clone());
        }
        let lazy = LazyTrainingData {
            extractor: &extractor,
            root: &manifest.root,
            pool_dir: self.pool_dir(),
            normals,
            variants: by_source,
        };
        let data: Box<dyn TrainingData + '_> = if cfg.train.cache_features {
            Box::new(lazy.cache(exec)?)
        } else {
            Box::new(lazy)
        };

        let model = init_model(
            cfg.model.head(extractor.channels()),
            extractor.spec().clone(),
            &cfg.digest(),
            cfg.train.seed,
        )?;
        let val = ValFeatures::build(&manifest, &extractor, exec)?;
        let ckpt_dir = self.checkpoint_dir();
        mkdir(&ckpt_dir)?;
        let mut best = f64::NEG_INFINITY;
        let mut hook = |epoch: usize, _loss: f64, m: &ModelState| -> Result<()> {
            checkpoint::save(m, &ckpt_dir.join("last.ckpt"))?;
            if let Some(v) = &val {
                let a = v.image_auroc(m, exec)?;
                log::info!("epoch {epoch}: val I-AUROC {a:.4}");
                if a > best {
                    best = a;
                    checkpoint::save(m, &ckpt_dir.join("best.ckpt"))?;
                }
            }
            Ok(())
        };
        let outcome = train(data.as_ref(), model, &cfg.train, exec, &mut hook)?;
        let digest = checkpoint::save(&outcome.model, &self.model_path())?;
        let mut log = String::new();
        for r in &outcome.log {
            log.push_str(&serde_json::to_string(r).expect("step record"));
            log.push('\n');
        }
        write(&self.dir.join("train_log.jsonl"), log)?;
        self.record(&[
            ("checkpoint_digest", digest.clone().into()),
            ("pool_digest", pool.digest.into()),
            ("backbone_checksum", extractor.backbone().checksum().into()),
        ])?;
        Ok(TrainSummary {
            checkpoint_digest: digest,
            epoch_losses: outcome.epoch_losses,
        })
    }

    fn load_model(&self) -> Result<(ModelState, Vec<String>)> {
        let path = self.model_path();
        if !path.exists() {
            return Err(Error::Precondition(format!(
                "checkpoint {} not found; run `train` first",
                path.display()
            )));
        }
        let model = checkpoint::load(&path)?;
        let mut flags = Vec::new();
        let expected = self.config.digest();
        if model.config_digest != expected {
            if !self.opts.force {
                return Err(Error::Config(format!(
                    "checkpoint config digest {} does not match the current config {expected}; \
                     pass --force to evaluate anyway",
                    model.config_digest
                )));
            }
            log::warn!("config digest mismatch ignored (--force)");
            flags.push(CONFIG_MISMATCH.to_string());
        }
        Ok((model, flags))
    }

    /// Score the test split, or the given image files, and write maps.
    /// Returns `(id, image score)` per image.
    pub fn infer(&self, inputs: &[PathBuf]) -> Result<Vec<(String, f64)>> {
        let (model, _) = self.load_model()?;
        let extractor = FeatureExtractor::from_spec(&model.backbone_spec)?;
        let items: Vec<(String, PathBuf)> = if inputs.is_empty() {
            let manifest = self.load_dataset_manifest()?;
            manifest
                .split(Split::Test)
                .map(|e| (e.id.clone(), manifest.root.join(&e.image)))
                .collect()
        } else {
            inputs
                .iter()
                .map(|p| {
                    let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    (id, p.clone())
                })
                .collect()
        };
        let out = self.dir.join("infer");
        let maps_dir = out.join("maps");
        let overlay_dir = out.join("overlays");
        mkdir(&maps_dir)?;
        if self.opts.emit_overlays {
            mkdir(&overlay_dir)?;
        }
        let cfg = &self.config.inference;
        let scores = par::try_map(self.opts.exec, &items, |(id, path)| -> Result<(String, f64)> {
            let image = decode_image(path).map_err(|msg| Error::Decode { id: id.clone(), msg })?;
            let map = infer(image.view(), id, &extractor, &model, cfg)?;
            let stem = safe_stem(id);
            write(&maps_dir.join(format!("{stem}.f32")), encode_map(&map.scores))?;
            if self.opts.emit_overlays {
                let p = overlay_dir.join(format!("{stem}.png"));
                overlay(&image, &map).save(&p).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))?;
            }
            Ok((id.clone(), map.image_score))
        })?;
        let mut csv = String::from("id,image_score\n");
        for (id, s) in &scores {
            let _ = writeln!(csv, "{id},{s}");
        }
        write(&out.join("scores.csv"), csv)?;
        Ok(scores)
    }

    /// Evaluate the trained model on the test split.
    pub fn evaluate(&self) -> Result<MetricsReport> {
        let (model, flags) = self.load_model()?;
        let extractor = FeatureExtractor::from_spec(&model.backbone_spec)?;
        let manifest = self.load_dataset_manifest()?;
        let mut report = metrics::evaluate(&model, &extractor, &manifest, &self.config.inference, self.opts.exec)?;
        report.flags = flags;
        write(&self.dir.join("report.txt"), report.to_key_value())?;
        let file = ReportFile {
            dataset: dataset_label(&self.config),
            method: self.config.run_id(),
            report: report.clone(),
        };
        write(
            &self.dir.join("report.json"),
            serde_json::to_string_pretty(&file).expect("report serializes"),
        )?;
        self.record(&[("report_digest", sha256_hex(report.to_key_value().as_bytes()).into())])?;
        Ok(report)
    }
}

fn dataset_label(cfg: &RunConfig) -> String {
    let base = Path::new(&cfg.dataset.root)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if cfg.dataset.adapter == "canonical" {
        base
    } else {
        cfg.dataset.adapter.clone()
    }
}

/// Comparison table over evaluated run directories.
pub fn report(run_dirs: &[PathBuf]) -> Result<String> {
    let mut rows = Vec::new();
    for d in run_dirs {
        let p = d.join("report.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let f: ReportFile =
            serde_json::from_str(&text).map_err(|e| Error::Metric(format!("{}: {e}", p.display())))?;
        rows.push((f.dataset, f.method, f.report));
    }
    Ok(format_table(&rows))
}

fn safe_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// `u32` height, `u32` width (little endian), then row-major `f32` values.
pub fn encode_map(m: &Array2<f32>) -> Vec<u8> {
    let (h, w) = m.dim();
    let mut out = Vec::with_capacity(8 + 4 * h * w);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_map(bytes: &[u8]) -> Result<Array2<f32>> {
    let bad = || Error::Shape("truncated score map".into());
    let h = u32::from_le_bytes(bytes.get(0..4).ok_or_else(bad)?.try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes.get(4..8).ok_or_else(bad)?.try_into().expect("4 bytes")) as usize;
    let body = bytes.get(8..).ok_or_else(bad)?;
    if body.len() != 4 * h * w {
        return Err(bad());
    }
    let vals = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Array2::from_shape_vec((h, w), vals).map_err(|e| Error::Shape(e.to_string()))
}

fn heat(t: f32) -> [f32; 3] {
    let ch = |c: f32| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// The image blended with a per-image min-max heat map.
fn overlay(image: &Array3<f32>, map: &AnomalyMap) -> RgbImage {
    let (h, w, _) = image.dim();
    let lo = map.scores.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        let c = heat((map.scores[[y, x]] - lo) / span);
        let px = |k: usize| ((0.5 * image[[y, x, k]] + 0.5 * c[k]) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

struct LazyTrainingData<'a> {
    extractor: &'a FeatureExtractor,
    root: &'a Path,
    pool_dir: PathBuf,
    normals: Vec<ManifestEntry>,
    variants: Vec<Vec<PoolEntry>>,
}

impl LazyTrainingData<'_> {
    fn normal_features(&self, i: usize) -> Result<Array3<f32>> {
        let rec = load_image_record(self.root, &self.normals[i])?;
        Ok(self.extractor.extract_features(rec.image.view(), &rec.id)?.data)
    }

    fn variant_features(&self, e: &PoolEntry) -> Result<(Array3<f32>, crate::imageops::Mask)> {
        let (image, mask) = load_pool_sample(&self.pool_dir, e)?;
        let f = self.extractor.extract_features(image.view(), &e.source_id)?;
        let grid = f.grid();
        Ok((f.data, downsample_mask(mask.view(), grid)))
    }

    fn cache(&self, exec: Exec) -> Result<CachedTrainingData> {
        let normals = par::map_range(exec, self.normals.len(), |i| self.normal_features(i))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let flat: Vec<(usize, &PoolEntry)> = self
            .variants
            .iter()
            .enumerate()
            .flat_map(|(i, v)| v.iter().map(move |e| (i, e)))
            .collect();
        let feats = par::try_map(exec, &flat, |(_, e)| self.variant_features(e))?;
        let mut variants = vec![Vec::new(); self.normals.len()];
        for ((i, _), f) in flat.iter().zip(feats) {
            variants[*i].push(f);
        }
        Ok(CachedTrainingData { normals, variants })
    }
}

impl TrainingData for LazyTrainingData<'_> {
    fn len(&self) -> usize {
        self.normals.len()
    }

    fn variant_count(&self, i: usize) -> usize {
        self.variants[i].len()
    }

    fn pair(&self, i: usize, variant: usize) -> Result<TrainingPair> {
        let (anomalous, grid_mask) = self.variant_features(&self.variants[i][variant])?;
        Ok(TrainingPair {
            normal: self.normal_features(i)?,
            anomalous,
            grid_mask,
        })
    }
}

/// Cached validation features for per-epoch model selection.
struct ValFeatures {
    rows: Vec<Array2<f64>>,
    labels: Vec<bool>,
}

impl ValFeatures {
    /// `None` unless the val split holds both classes.
    fn build(manifest: &DatasetManifest, extractor: &FeatureExtractor, exec: Exec) -> Result<Option<Self>> {
        let entries: Vec<_> = manifest.split(Split::Val).cloned().collect();
        let labels: Vec<bool> = entries.iter().map(|e| e.label == Label::Anomalous).collect();
        if !labels.contains(&true) || !labels.contains(&false) {
            return Ok(None);
        }
        let rows = par::try_map(exec, &entries, |e| {
            let rec = load_image_record(&manifest.root, e)?;
            Ok::<_, Error>(to_rows(extractor.extract_features(rec.image.view(), &rec.id)?.data.view()))
        })?;
        Ok(Some(ValFeatures { rows, labels }))
    }

    fn image_auroc(&self, m: &ModelState, exec: Exec) -> Result<f64> {
        let scores = par::try_map(exec, &self.rows, |r| {
            let n = m.normality_rows(r.view(), Exec::Sequential)?;
            Ok::<_, Error>(n.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max))
        })?;
        auroc(&scores, &self.labels)
    }
}
