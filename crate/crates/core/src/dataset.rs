//! Image/mask corpus ingestion, manifests and deterministic splits.
//!
//! On disk every corpus is normalized to an `images/` directory and an
//! optional `masks/` directory whose files share stems with the images.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::Mask;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A decoded image with its optional ground-truth mask.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub id: String,
    /// H×W×3, values in [0, 1].
    pub image: Array3<f32>,
    pub mask: Option<Mask>,
    pub label: Label,
    pub source: PathBuf,
}

impl ImageRecord {
    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.image.dim();
        (h, w)
    }

    /// The ground-truth mask, or an all-zero mask for unannotated images.
    pub fn mask_or_empty(&self) -> Mask {
        self.mask
            .clone()
            .unwrap_or_else(|| Array2::zeros(self.dims()))
    }
}

/// One manifest line. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    #[serde(default)]
    pub mask: Option<String>,
    pub label: Label,
    #[serde(default)]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Sorted by id.
    pub entries: Vec<ManifestEntry>,
    pub seed: Option<u64>,
    pub ratios: Option<[f64; 3]>,
}

/// Directory conventions of a corpus after normalization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutSpec {
    pub name: String,
    pub images_dir: String,
    pub masks_dir: String,
    /// Appended to the image stem to form the mask stem.
    pub mask_suffix: String,
}

impl LayoutSpec {
    pub fn canonical() -> Self {
        LayoutSpec {
            name: "canonical".into(),
            images_dir: "images".into(),
            masks_dir: "masks".into(),
            mask_suffix: String::new(),
        }
    }

    /// Named adapters accepted by `dataset.adapter`.
    ///
    /// Crack500 ships masks as `<stem>_mask.png`; the other supported corpora
    /// pair masks by identical stem once copied into `images/` + `masks/`.
    pub fn by_name(name: &str) -> Result<Self> {
        let mut spec = Self::canonical();
        match name {
            "canonical" | "gaps384" | "edmcrack600" | "pothole600" | "cprid" | "cnr-road" => {}
            "crack500" => spec.mask_suffix = "_mask".into(),
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset adapter `{other}` (expected one of: {})",
                    Self::names().join(", ")
                )))
            }
        }
        spec.name = name.to_string();
        Ok(spec)
    }

    pub fn names() -> &'static [&'static str] {
        &[
            "canonical",
            "crack500",
            "gaps384",
            "edmcrack600",
            "pothole600",
            "cprid",
            "cnr-road",
        ]
    }
}

fn list_rasters(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        if out.insert(stem.to_string(), name.to_string()).is_some() {
            return Err(Error::Dataset(format!(
                "duplicate stem `{stem}` in {}",
                dir.display()
            )));
        }
    }
    Ok(out)
}

/// Scan a corpus root and build a manifest with one entry per image.
///
/// Masks are decoded once to decide the label: an image is anomalous iff its
/// mask has at least one defect pixel.
pub fn load_manifest(root: &Path, layout: &LayoutSpec) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let images_dir = root.join(&layout.images_dir);
    if !images_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "missing `{}/` directory under {}",
            layout.images_dir,
            root.display()
        )));
    }
    let images = list_rasters(&images_dir)?;
    let masks_dir = root.join(&layout.masks_dir);
    let mut masks = if masks_dir.is_dir() {
        list_rasters(&masks_dir)?
    } else {
        BTreeMap::new()
    };

    let mut entries = Vec::with_capacity(images.len());
    for (stem, file) in &images {
        let mask_key = format!("{stem}{}", layout.mask_suffix);
        let mask_rel = masks
            .remove(&mask_key)
            .map(|m| format!("{}/{}", layout.masks_dir, m));
        let label = match &mask_rel {
            Some(rel) => {
                let mask = decode_mask(&root.join(rel)).map_err(|msg| Error::Decode {
                    id: stem.clone(),
                    msg,
                })?;
                if mask.iter().any(|&v| v > 0) {
                    Label::Anomalous
                } else {
                    Label::Normal
                }
            }
            None => Label::Normal,
        };
        entries.push(ManifestEntry {
            id: stem.clone(),
            image: format!("{}/{}", layout.images_dir, file),
            mask: mask_rel,
            label,
            split: None,
        });
    }
    if let Some(orphan) = masks.keys().next() {
        return Err(Error::Dataset(format!(
            "mask `{orphan}` has no matching image"
        )));
    }
    if entries.is_empty() {
        return Err(Error::Dataset("no records found".into()));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        seed: None,
        ratios: None,
    })
}

fn floor_count(n: usize, ratio: f64) -> usize {
    ((n as f64) * ratio + 1e-9).floor() as usize
}

/// Assign every entry to train/val/test.
///
/// Normal entries are shuffled with `seed` and cut by `ratios` (floor for
/// train and val, remainder to test). Anomalous entries never enter train:
/// they are cut between val and test in proportion `val / (val + test)`.
pub fn split_manifest(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "split ratios must be nonnegative and sum to 1, got {ratios:?}"
        )));
    }
    let mut entries = manifest.entries.clone();
    entries.sort_by(|a, b| a.id.cmp(&b.id));

    let (normal, anomalous): (Vec<usize>, Vec<usize>) =
        (0..entries.len()).partition(|&i| entries[i].label == Label::Normal);
    if normal.is_empty() {
        return Err(Error::Dataset("no normal records for training".into()));
    }
    let held_out = ratios[1] + ratios[2];
    if !anomalous.is_empty() && held_out <= 0.0 {
        return Err(Error::Dataset(format!(
            "{} anomalous record(s) cannot be assigned: val and test ratios are both zero",
            anomalous.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = normal;
    normal.shuffle(&mut rng);
    let n_train = floor_count(normal.len(), ratios[0]);
    let n_val = floor_count(normal.len(), ratios[1]);
    for (rank, &i) in normal.iter().enumerate() {
        entries[i].split = Some(if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        });
    }

    let mut anomalous = anomalous;
    anomalous.shuffle(&mut rng);
    let a_val = if held_out > 0.0 {
        floor_count(anomalous.len(), ratios[1] / held_out)
    } else {
        0
    };
    for (rank, &i) in anomalous.iter().enumerate() {
        entries[i].split = Some(if rank < a_val { Split::Val } else { Split::Test });
    }

    Ok(DatasetManifest {
        root: manifest.root.clone(),
        entries,
        seed: Some(seed),
        ratios: Some(ratios),
    })
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        (
            self.split(Split::Train).count(),
            self.split(Split::Val).count(),
            self.split(Split::Test).count(),
        )
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// Serialize as JSON lines, one entry per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl().as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, root: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
                Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            entries.push(entry);
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            entries,
            seed: None,
            ratios: None,
        })
    }
}

/// Decode an image into H×W×3 floats in [0, 1]; grayscale is replicated.
pub fn decode_image(path: &Path) -> std::result::Result<Array3<f32>, String> {
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw())
        .map(|a| a.mapv(|v| v.clamp(0.0, 1.0)))
        .map_err(|e| e.to_string())
}

/// Decode a mask, binarized at half of full scale.
pub fn decode_mask(path: &Path) -> std::result::Result<Mask, String> {
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let luma = img.to_luma32f();
    let (w, h) = luma.dimensions();
    let bits: Vec<u8> = luma.into_raw().into_iter().map(|v| u8::from(v > 0.5)).collect();
    Array2::from_shape_vec((h as usize, w as usize), bits).map_err(|e| e.to_string())
}

/// Decode one manifest entry.
pub fn load_image_record(root: &Path, entry: &ManifestEntry) -> Result<ImageRecord> {
    let source = root.join(&entry.image);
    let err = |msg: String| Error::Decode {
        id: entry.id.clone(),
        msg,
    };
    let image = decode_image(&source).map_err(err)?;
    let mask = match &entry.mask {
        Some(rel) => {
            let m = decode_mask(&root.join(rel)).map_err(err)?;
            let (h, w, _) = image.dim();
            if m.dim() != (h, w) {
                return Err(err(format!(
                    "mask is {:?} but image is {:?}",
                    m.dim(),
                    (h, w)
                )));
            }
            Some(m)
        }
        None => None,
    };
    let label = match &mask {
        Some(m) if m.iter().any(|&v| v > 0) => Label::Anomalous,
        _ => Label::Normal,
    };
    Ok(ImageRecord {
        id: entry.id.clone(),
        image,
        mask,
        label,
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    fn corpus(n_images: usize, masked: &[usize]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        for i in 0..n_images {
            let img = RgbImage::from_pixel(4, 4, Rgb([10 * i as u8, 20, 30]));
            img.save(dir.path().join(format!("images/img{i:02}.png"))).unwrap();
        }
        for &i in masked {
            let mut m = GrayImage::new(4, 4);
            m.put_pixel(1, 2, Luma([255]));
            m.save(dir.path().join(format!("masks/img{i:02}.png"))).unwrap();
        }
        dir
    }

    fn entries(n: usize, anomalous: usize) -> DatasetManifest {
        let entries = (0..n)
            .map(|i| ManifestEntry {
                id: format!("r{i:03}"),
                image: format!("images/r{i:03}.png"),
                mask: None,
                label: if i < anomalous { Label::Anomalous } else { Label::Normal },
                split: None,
            })
            .collect();
        DatasetManifest {
            root: PathBuf::from("."),
            entries,
            seed: None,
            ratios: None,
        }
    }

    #[test]
    fn three_images_one_mask() {
        let dir = corpus(3, &[1]);
        let m = load_manifest(dir.path(), &LayoutSpec::canonical()).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.count_label(Label::Anomalous), 1);
        assert_eq!(m.entries[1].label, Label::Anomalous);
        assert_eq!(m.entries[1].mask.as_deref(), Some("masks/img01.png"));
    }

    #[test]
    fn loading_twice_is_byte_identical() {
        let dir = corpus(5, &[0, 3]);
        let a = load_manifest(dir.path(), &LayoutSpec::canonical()).unwrap();
        let b = load_manifest(dir.path(), &LayoutSpec::canonical()).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
    }

    #[test]
    fn empty_images_dir_is_an_error() {
        let dir = corpus(0, &[]);
        let err = load_manifest(dir.path(), &LayoutSpec::canonical()).unwrap_err();
        assert!(err.to_string().contains("no records found"));
    }

    #[test]
    fn missing_root_and_orphan_mask_are_fatal() {
        assert!(load_manifest(Path::new("/nonexistent/root"), &LayoutSpec::canonical()).is_err());
        let dir = corpus(2, &[]);
        GrayImage::new(4, 4)
            .save(dir.path().join("masks/ghost.png"))
            .unwrap();
        let err = load_manifest(dir.path(), &LayoutSpec::canonical()).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn all_zero_mask_means_normal() {
        let dir = corpus(1, &[]);
        GrayImage::new(4, 4)
            .save(dir.path().join("masks/img00.png"))
            .unwrap();
        let m = load_manifest(dir.path(), &LayoutSpec::canonical()).unwrap();
        assert_eq!(m.entries[0].label, Label::Normal);
    }

    #[test]
    fn crack500_adapter_uses_mask_suffix() {
        let dir = corpus(2, &[]);
        let mut m = GrayImage::new(4, 4);
        m.put_pixel(0, 0, Luma([255]));
        m.save(dir.path().join("masks/img01_mask.png")).unwrap();
        let layout = LayoutSpec::by_name("crack500").unwrap();
        let man = load_manifest(dir.path(), &layout).unwrap();
        assert_eq!(man.entries[1].label, Label::Anomalous);
        assert!(LayoutSpec::by_name("kitti").is_err());
    }

    #[test]
    fn split_sizes_floor_with_remainder_to_test() {
        let m = entries(10, 0);
        for seed in [0, 1, 99] {
            let s = split_manifest(&m, [0.8, 0.1, 0.1], seed).unwrap();
            assert_eq!(s.split_counts(), (8, 1, 1));
        }
        let s = split_manifest(&entries(7, 0), [0.5, 0.25, 0.25], 3).unwrap();
        assert_eq!(s.split_counts(), (3, 1, 3));
    }

    #[test]
    fn anomalous_records_never_train() {
        let s = split_manifest(&entries(20, 6), [0.6, 0.2, 0.2], 5).unwrap();
        for e in &s.entries {
            if e.label == Label::Anomalous {
                assert_ne!(e.split, Some(Split::Train));
            }
        }
        assert_eq!(
            s.entries.iter().filter(|e| e.label == Label::Anomalous && e.split == Some(Split::Val)).count(),
            3
        );
    }

    #[test]
    fn anomalous_unassignable_without_holdout() {
        let err = split_manifest(&entries(5, 1), [1.0, 0.0, 0.0], 0).unwrap_err();
        assert!(err.to_string().contains("cannot be assigned"));
    }

    #[test]
    fn all_anomalous_is_an_error() {
        let err = split_manifest(&entries(4, 4), [0.8, 0.1, 0.1], 0).unwrap_err();
        assert!(err.to_string().contains("no normal records for training"));
    }

    #[test]
    fn bad_ratios_rejected() {
        assert!(split_manifest(&entries(4, 0), [0.5, 0.5, 0.5], 0).is_err());
        assert!(split_manifest(&entries(4, 0), [1.2, -0.1, -0.1], 0).is_err());
    }

    #[test]
    fn split_is_deterministic_and_idempotent() {
        let m = entries(30, 4);
        let a = split_manifest(&m, [0.7, 0.15, 0.15], 7).unwrap();
        let b = split_manifest(&m, [0.7, 0.15, 0.15], 7).unwrap();
        assert_eq!(a, b);
        let again = split_manifest(&a, [0.7, 0.15, 0.15], 7).unwrap();
        assert_eq!(a, again);
        let other = split_manifest(&m, [0.7, 0.15, 0.15], 8).unwrap();
        assert_ne!(a.entries, other.entries);
    }

    #[test]
    fn manifest_roundtrips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let s = split_manifest(&entries(6, 1), [0.5, 0.25, 0.25], 1).unwrap();
        let path = dir.path().join("m.jsonl");
        s.write(&path).unwrap();
        let back = DatasetManifest::read(&path, Path::new(".")).unwrap();
        assert_eq!(back.entries, s.entries);
    }

    #[test]
    fn decoding_scales_replicates_and_binarizes() {
        let dir = tempfile::tempdir().unwrap();
        let gray = GrayImage::from_fn(3, 2, |x, _| Luma([if x == 0 { 255 } else { 51 }]));
        gray.save(dir.path().join("g.png")).unwrap();
        let img = decode_image(&dir.path().join("g.png")).unwrap();
        assert_eq!(img.dim(), (2, 3, 3));
        assert_eq!(img[[0, 0, 0]], 1.0);
        assert_eq!(img[[1, 2, 0]], img[[1, 2, 2]]);
        assert!((img[[1, 2, 1]] - 0.2).abs() < 1e-6);

        let mask = GrayImage::from_fn(2, 1, |x, _| Luma([if x == 0 { 200 } else { 100 }]));
        mask.save(dir.path().join("m.png")).unwrap();
        let m = decode_mask(&dir.path().join("m.png")).unwrap();
        assert_eq!(m.as_slice().unwrap(), &[1, 0]);
    }

    #[test]
    fn sixteen_bit_full_scale_is_one() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_pixel(2, 2, image::Luma([65535]));
        img.save(dir.path().join("d.png")).unwrap();
        let a = decode_image(&dir.path().join("d.png")).unwrap();
        assert!(a.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn corrupt_file_error_carries_id() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::write(dir.path().join("images/bad.png"), b"not a png").unwrap();
        let entry = ManifestEntry {
            id: "bad".into(),
            image: "images/bad.png".into(),
            mask: None,
            label: Label::Normal,
            split: None,
        };
        match load_image_record(dir.path(), &entry) {
            Err(Error::Decode { id, .. }) => assert_eq!(id, "bad"),
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn record_mask_matches_image_dims() {
        let dir = corpus(2, &[1]);
        let m = load_manifest(dir.path(), &LayoutSpec::canonical()).unwrap();
        let rec = load_image_record(dir.path(), &m.entries[1]).unwrap();
        assert_eq!(rec.mask.as_ref().unwrap().dim(), rec.dims());
        assert_eq!(rec.mask.as_ref().unwrap().sum(), 1);
        assert_eq!(rec.label, Label::Anomalous);
    }
}
