//! Procedurally textured "road" images for end-to-end runs.
//!
//! Normals are seeded noise over a shaded gradient; defected images add
//! dark potholes or cracks and ship with their masks.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::COMPACT_CNN;
use crate::imageops::Mask;

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub size: usize,
    pub normals: usize,
    pub defects: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            size: 64,
            normals: 100,
            defects: 20,
            seed: 0,
        }
    }
}

/// Reference configuration for the toy corpus: compact backbone with
/// seeded weights, a short schedule with raised learning rates, and an
/// 80/0/20 split so all defected images land in the test set.
pub fn toy_run_config(data_root: &Path, output_dir: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.output_dir = output_dir.to_string_lossy().into_owned();
    c.run_name = "toy".into();
    c.dataset.root = data_root.to_string_lossy().into_owned();
    c.dataset.ratios = [0.8, 0.0, 0.2];
    c.model.backbone = COMPACT_CNN.into();
    c.model.weights_id = "random-init-0".into();
    c.model.levels = vec![1, 2];
    c.model.input_size = 64;
    c.train.epochs = 10;
    c.train.batch_size = 8;
    c.train.lr_adaptors = 2e-3;
    c.train.lr_discriminator = 4e-3;
    c
}

/// A defect-free asphalt-like texture.
pub fn road_texture(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let base: f32 = rng.random_range(0.35..0.55);
    let tint: [f32; 3] = [rng.random_range(-0.02..0.02), 0.0, rng.random_range(-0.02..0.02)];
    let dir: f32 = rng.random_range(0.0..2.0 * PI);
    let slope: f32 = rng.random_range(0.0..0.12);
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.0..0.03),
            )
        })
        .collect();
    let grain = Normal::new(0.0f32, 0.04).expect("valid std");
    let n = size as f32;
    let mut img = Array3::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f32 / n - 0.5, y as f32 / n - 0.5);
            let shade = slope * (u * dir.cos() + v * dir.sin());
            let low: f32 = waves
                .iter()
                .map(|(f, th, ph, a)| a * (2.0 * PI * f * (u * th.cos() + v * th.sin()) + ph).sin())
                .sum();
            let g = grain.sample(rng);
            for c in 0..3 {
                img[[y, x, c]] = (base + tint[c] + shade + low + g).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Paint a dark defect onto `img` and return its mask.
pub fn add_defect(img: &mut Array3<f32>, rng: &mut ChaCha8Rng) -> Mask {
    let (h, w, _) = img.dim();
    let mut mask = Array2::zeros((h, w));
    let s = h.min(w) as f32;
    if rng.random_bool(0.5) {
        // pothole
        let (cy, cx) = (rng.random_range(0.25..0.75) * h as f32, rng.random_range(0.25..0.75) * w as f32);
        let (a, b) = (rng.random_range(0.08..0.16) * s, rng.random_range(0.06..0.12) * s);
        let th: f32 = rng.random_range(0.0..PI);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let u = dx * th.cos() + dy * th.sin();
                let v = -dx * th.sin() + dy * th.cos();
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    mask[[y, x]] = 1;
                }
            }
        }
    } else {
        // crack: jagged polyline, 2-3 px wide
        let (mut y, mut x) = (rng.random_range(0.1..0.9) * h as f32, rng.random_range(0.1..0.9) * w as f32);
        let mut ang: f32 = rng.random_range(0.0..2.0 * PI);
        let r: f32 = rng.random_range(1.0..1.6);
        for _ in 0..(s as usize * 2) {
            ang += rng.random_range(-0.5..0.5);
            y = (y + ang.sin()).clamp(0.0, h as f32 - 1.0);
            x = (x + ang.cos()).clamp(0.0, w as f32 - 1.0);
            for yy in (y - r).floor().max(0.0) as usize..=((y + r).ceil() as usize).min(h - 1) {
                for xx in (x - r).floor().max(0.0) as usize..=((x + r).ceil() as usize).min(w - 1) {
                    if (yy as f32 - y).powi(2) + (xx as f32 - x).powi(2) <= r * r {
                        mask[[yy, xx]] = 1;
                    }
                }
            }
        }
    }
    let depth: f32 = rng.random_range(0.35..0.6);
    for ((y, x, _), v) in img.indexed_iter_mut() {
        if mask[[y, x]] > 0 {
            *v = (*v * depth + rng.random_range(-0.05f32..0.05)).clamp(0.0, 1.0);
        }
    }
    mask
}

fn to_png(img: &Array3<f32>) -> RgbImage {
    let (h, w, _) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (img[[y as usize, x as usize, c]] * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Write the toy corpus under `root` in the canonical layout.
pub fn write_toy_dataset(root: &Path, spec: &ToySpec) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let save_err = |p: &Path, e: image::ImageError| Error::Dataset(format!("{}: {e}", p.display()));
    for i in 0..spec.normals {
        let img = road_texture(spec.size, &mut rng);
        let p = images.join(format!("normal_{i:03}.png"));
        to_png(&img).save(&p).map_err(|e| save_err(&p, e))?;
    }
    for i in 0..spec.defects {
        let mut img = road_texture(spec.size, &mut rng);
        let m = add_defect(&mut img, &mut rng);
        let p = images.join(format!("defect_{i:03}.png"));
        to_png(&img).save(&p).map_err(|e| save_err(&p, e))?;
        let (h, w) = m.dim();
        let gm = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([m[[y as usize, x as usize]] * 255]));
        let p = masks.join(format!("defect_{i:03}.png"));
        gm.save(&p).map_err(|e| save_err(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_manifest, Label, LayoutSpec};

    #[test]
    fn corpus_layout_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            size: 32,
            normals: 5,
            defects: 3,
            seed: 1,
        };
        write_toy_dataset(dir.path(), &spec).unwrap();
        let m = load_manifest(dir.path(), &LayoutSpec::canonical()).unwrap();
        assert_eq!(m.count_label(Label::Normal), 5);
        assert_eq!(m.count_label(Label::Anomalous), 3);
    }

    #[test]
    fn defects_are_darker_and_nonempty() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let clean = road_texture(64, &mut rng);
            let mut img = clean.clone();
            let m = add_defect(&mut img, &mut rng);
            let n = m.iter().filter(|&&v| v > 0).count();
            assert!(n > 0);
            let (mut before, mut after) = (0.0, 0.0);
            for ((y, x, c), v) in img.indexed_iter() {
                if m[[y, x]] > 0 {
                    after += v;
                    before += clean[[y, x, c]];
                } else {
                    assert_eq!(*v, clean[[y, x, c]]);
                }
            }
            assert!(after < before);
        }
    }
}
