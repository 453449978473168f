//! Anomalous training images from defect-free ones.
//!
//! A triplet (clean image, defect prompt, location mask) is handed to an
//! inpainting backend; the result is hard-composited inside the mask and
//! checked for confinement and effectiveness before it enters the pool.

mod diffusion;
mod masks;
mod procedural;

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use diffusion::{DiffusionClient, ENDPOINT_ENV};
pub use masks::{sample_mask, MaskKind, MaskParams};
pub use procedural::Procedural;

use crate::dataset::{decode_image, decode_mask, load_image_record, DatasetManifest, ImageRecord, Label, Split};
use crate::error::{Error, Result};
use crate::imageops::Mask;
use crate::par::{self, Exec};

/// Largest allowed per-channel change outside the mask.
pub const CONFINEMENT_TOL: f32 = 0.02;
/// Smallest allowed mean absolute change inside the mask.
pub const MIN_EFFECT: f64 = 0.01;
pub const DEFAULT_NEGATIVE_PROMPT: &str = "smooth road, clean asphalt";
pub const POOL_MANIFEST: &str = "pool.jsonl";

static SYNTHESIS_CALLS: AtomicUsize = AtomicUsize::new(0);

pub(crate) fn note_call() {
    SYNTHESIS_CALLS.fetch_add(1, Ordering::Relaxed);
}

/// Process-wide count of entries into this module.
pub fn synthesis_calls() -> usize {
    SYNTHESIS_CALLS.load(Ordering::Relaxed)
}

pub fn default_prompts() -> Vec<String> {
    ["crack", "pothole", "raveling", "patch damage"].map(String::from).to_vec()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Procedural,
    Diffusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub backend: BackendKind,
    pub prompts: Vec<String>,
    pub negative_prompt: String,
    pub count_per_image: usize,
    pub mask_kind: MaskKind,
    pub mask: MaskParams,
    pub timeout_s: f64,
    pub retries: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            backend: BackendKind::Procedural,
            prompts: default_prompts(),
            negative_prompt: DEFAULT_NEGATIVE_PROMPT.into(),
            count_per_image: 1,
            mask_kind: MaskKind::Auto,
            mask: MaskParams::default(),
            timeout_s: 120.0,
            retries: 2,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::Config("synthesis.prompts must not be empty".into()));
        }
        if self.count_per_image == 0 {
            return Err(Error::Config("synthesis.count_per_image must be at least 1".into()));
        }
        if !(self.timeout_s > 0.0) {
            return Err(Error::Config("synthesis.timeout_s must be positive".into()));
        }
        self.mask.validate()
    }

    /// The configured backend; diffusion needs the endpoint variable.
    pub fn backend(&self) -> Result<Box<dyn InpaintBackend>> {
        match self.backend {
            BackendKind::Procedural => Ok(Box::new(Procedural)),
            BackendKind::Diffusion => {
                DiffusionClient::from_env(Duration::from_secs_f64(self.timeout_s), self.retries)
                    .map(|c| Box::new(c) as Box<dyn InpaintBackend>)
                    .ok_or_else(|| {
                        Error::Config(format!("diffusion backend selected but {ENDPOINT_ENV} is not set"))
                    })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthesisTriplet {
    /// `<source id>#<seed>`.
    pub id: String,
    pub normal_image: ImageRecord,
    pub description: String,
    pub negative_prompt: String,
    pub mask: Mask,
    /// Stroke or blob, never auto.
    pub mask_kind: MaskKind,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalousImage {
    pub image: Array3<f32>,
    pub mask: Mask,
    pub provenance: BackendKind,
    pub triplet_ref: String,
}

/// Produces a full-size image to be composited inside the triplet mask.
pub trait InpaintBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn inpaint(&self, triplet: &SynthesisTriplet) -> Result<Array3<f32>>;
}

/// Draw a prompt and a mask for a normal record.
pub fn build_triplet(record: &ImageRecord, cfg: &SynthesisConfig, seed: u64) -> Result<SynthesisTriplet> {
    note_call();
    if record.label != Label::Normal {
        return Err(Error::Precondition(format!(
            "triplets need a normal image, `{}` is anomalous",
            record.id
        )));
    }
    if cfg.prompts.is_empty() {
        return Err(Error::Precondition("prompt bank is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let description = cfg.prompts[rng.random_range(0..cfg.prompts.len())].clone();
    let mask_kind = cfg.mask_kind.resolve(&description);
    let mask = sample_mask(record.dims(), mask_kind, &cfg.mask, rng.random())?;
    Ok(SynthesisTriplet {
        id: format!("{}#{seed}", record.id),
        normal_image: record.clone(),
        description,
        negative_prompt: cfg.negative_prompt.clone(),
        mask,
        mask_kind,
        seed,
    })
}

/// Check confinement and effectiveness of `generated` against `clean`.
pub fn check_invariants(clean: &Array3<f32>, generated: &Array3<f32>, mask: &Mask) -> std::result::Result<(), String> {
    let (h, w, c) = clean.dim();
    if generated.dim() != (h, w, c) || mask.dim() != (h, w) {
        return Err(format!(
            "shape mismatch: clean {:?}, generated {:?}, mask {:?}",
            clean.dim(),
            generated.dim(),
            mask.dim()
        ));
    }
    let mut outside_max = 0.0f32;
    let mut inside_sum = 0.0f64;
    let mut inside_n = 0usize;
    for y in 0..h {
        for x in 0..w {
            let inside = mask[[y, x]] > 0;
            for k in 0..c {
                let d = (generated[[y, x, k]] - clean[[y, x, k]]).abs();
                if inside {
                    inside_sum += f64::from(d);
                    inside_n += 1;
                } else {
                    outside_max = outside_max.max(d);
                }
            }
        }
    }
    if inside_n == 0 {
        return Err("mask is empty".into());
    }
    if outside_max > CONFINEMENT_TOL {
        return Err(format!("outside-mask change {outside_max} exceeds {CONFINEMENT_TOL}"));
    }
    let mean = inside_sum / inside_n as f64;
    if mean < MIN_EFFECT {
        return Err(format!("inside-mask mean change {mean} below {MIN_EFFECT}"));
    }
    Ok(())
}

/// Inpaint a triplet, composite it inside the mask and validate the result.
pub fn generate_anomalous(triplet: &SynthesisTriplet, backend: &dyn InpaintBackend) -> Result<AnomalousImage> {
    note_call();
    let clean = &triplet.normal_image.image;
    if triplet.mask.dim() != triplet.normal_image.dims() {
        return Err(Error::Precondition(format!(
            "mask {:?} does not match image {:?}",
            triplet.mask.dim(),
            triplet.normal_image.dims()
        )));
    }
    if !triplet.mask.iter().any(|&v| v > 0) {
        return Err(Error::Precondition(format!("mask of triplet `{}` is empty", triplet.id)));
    }
    let raw = backend.inpaint(triplet)?;
    if raw.dim() != clean.dim() {
        return Err(Error::Rejected {
            triplet: triplet.id.clone(),
            msg: format!("backend returned {:?}, expected {:?}", raw.dim(), clean.dim()),
        });
    }
    let mut image = clean.clone();
    for ((y, x, c), v) in image.indexed_iter_mut() {
        if triplet.mask[[y, x]] > 0 {
            *v = raw[[y, x, c]].clamp(0.0, 1.0);
        }
    }
    check_invariants(clean, &image, &triplet.mask).map_err(|msg| Error::Rejected {
        triplet: triplet.id.clone(),
        msg,
    })?;
    Ok(AnomalousImage {
        image,
        mask: triplet.mask.clone(),
        provenance: backend.kind(),
        triplet_ref: triplet.id.clone(),
    })
}

/// One generated sample. Paths are relative to the pool directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub source_id: String,
    pub anomalous_path: String,
    pub mask_path: String,
    pub prompt: String,
    pub seed: u64,
    pub backend: BackendKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolSummary {
    pub entries: Vec<PoolEntry>,
    pub rejections: usize,
    /// sha256 of the pool manifest.
    pub digest: String,
}

/// Seed of sample `k` for source `id`, independent of processing order.
pub fn derive_seed(base: u64, id: &str, k: usize) -> u64 {
    let h = Sha256::digest(format!("{base}/{id}/{k}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generate `count_per_image` samples for every normal training record.
///
/// Samples are generated in parallel; the manifest is written once, in
/// (source id, index) order. Rejected samples are logged and skipped.
pub fn generate_pool(
    manifest: &DatasetManifest,
    cfg: &SynthesisConfig,
    backend: &dyn InpaintBackend,
    seed: u64,
    out_dir: &Path,
    exec: Exec,
) -> Result<PoolSummary> {
    note_call();
    cfg.validate()?;
    let sources: Vec<_> = manifest
        .split(Split::Train)
        .filter(|e| e.label == Label::Normal)
        .cloned()
        .collect();
    if sources.is_empty() {
        return Err(Error::Dataset("no normal training records to synthesize from".into()));
    }
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let tasks: Vec<(usize, usize)> = (0..sources.len())
        .flat_map(|i| (0..cfg.count_per_image).map(move |k| (i, k)))
        .collect();
    let results = par::map(exec, &tasks, |&(i, k)| -> Result<Option<PoolEntry>> {
        let entry = &sources[i];
        let record = load_image_record(&manifest.root, entry)?;
        let s = derive_seed(seed, &entry.id, k);
        let triplet = build_triplet(&record, cfg, s)?;
        let sample = match generate_anomalous(&triplet, backend) {
            Ok(a) => a,
            Err(Error::Rejected { triplet, msg }) => {
                log::warn!("rejected sample `{triplet}`: {msg}");
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        let stem = format!("{}_{k}", file_stem(&entry.id));
        let anomalous_path = format!("images/{stem}.png");
        let mask_path = format!("masks/{stem}.png");
        write_file(&out_dir.join(&anomalous_path), &diffusion::encode_rgb_png(&sample.image))?;
        write_file(&out_dir.join(&mask_path), &diffusion::encode_mask_png(&sample.mask))?;
        Ok(Some(PoolEntry {
            source_id: entry.id.clone(),
            anomalous_path,
            mask_path,
            prompt: triplet.description,
            seed: s,
            backend: sample.provenance,
        }))
    });
    let mut entries = Vec::with_capacity(tasks.len());
    let mut rejections = 0;
    for r in results {
        match r? {
            Some(e) => entries.push(e),
            None => rejections += 1,
        }
    }
    if rejections > 0 {
        log::warn!("{rejections} of {} samples rejected", tasks.len());
    }
    let text = pool_jsonl(&entries);
    let path = out_dir.join(POOL_MANIFEST);
    write_file(&path, text.as_bytes())?;
    Ok(PoolSummary {
        entries,
        rejections,
        digest: hex::encode(Sha256::digest(text.as_bytes())),
    })
}

fn pool_jsonl(entries: &[PoolEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&serde_json::to_string(e).expect("serializable entry"));
        s.push('\n');
    }
    s
}

pub fn pool_manifest_path(dir: &Path) -> PathBuf {
    dir.join(POOL_MANIFEST)
}

/// Read a pool manifest; the digest covers its bytes.
pub fn read_pool(dir: &Path) -> Result<PoolSummary> {
    let path = pool_manifest_path(dir);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    let mut hasher = Sha256::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
        if line.trim().is_empty() {
            continue;
        }
        let e: PoolEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
        entries.push(e);
    }
    Ok(PoolSummary {
        entries,
        rejections: 0,
        digest: hex::encode(hasher.finalize()),
    })
}

/// Decode one pool sample.
pub fn load_pool_sample(dir: &Path, e: &PoolEntry) -> Result<(Array3<f32>, Mask)> {
    let err = |msg: String| Error::Decode {
        id: format!("{}#{}", e.source_id, e.seed),
        msg,
    };
    let image = decode_image(&dir.join(&e.anomalous_path)).map_err(err)?;
    let mask = decode_mask(&dir.join(&e.mask_path)).map_err(err)?;
    Ok((image, mask))
}

/// Every entry's files exist, pair with a known source and pass the
/// confinement and effectiveness checks against it.
pub fn validate_pool(dir: &Path, manifest: &DatasetManifest, exec: Exec) -> Result<usize> {
    let pool = read_pool(dir)?;
    let checked = par::try_map(exec, &pool.entries, |e| -> Result<()> {
        let source = manifest
            .entries
            .iter()
            .find(|m| m.id == e.source_id)
            .ok_or_else(|| Error::Dataset(format!("pool entry refers to unknown source `{}`", e.source_id)))?;
        let clean = load_image_record(&manifest.root, source)?;
        let (image, mask) = load_pool_sample(dir, e)?;
        check_invariants(&clean.image, &image, &mask).map_err(|msg| Error::Rejected {
            triplet: format!("{}#{}", e.source_id, e.seed),
            msg,
        })
    })?;
    Ok(checked.len())
}
