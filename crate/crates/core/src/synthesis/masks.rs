//! Seeded defect-location masks.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::Mask;

const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// Crack-like dilated random walk.
    Stroke,
    /// Pothole-like perturbed ellipse.
    Blob,
    /// Stroke for crack prompts, blob otherwise.
    Auto,
}

impl MaskKind {
    pub(crate) fn resolve(self, prompt: &str) -> MaskKind {
        match self {
            MaskKind::Auto if prompt.to_lowercase().contains("crack") => MaskKind::Stroke,
            MaskKind::Auto => MaskKind::Blob,
            k => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskParams {
    /// Lower bound on the nonzero fraction.
    pub min_area: f64,
    /// Upper bound on the nonzero fraction, at most 0.3.
    pub max_area: f64,
    /// Stroke half-width relative to the shorter image side.
    pub stroke_radius: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        MaskParams {
            min_area: 0.02,
            max_area: 0.12,
            stroke_radius: 0.02,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_area > 0.0 && self.min_area <= self.max_area && self.max_area <= 0.3) {
            return Err(Error::Config(format!(
                "mask area bounds must satisfy 0 < min_area <= max_area <= 0.3, got [{}, {}]",
                self.min_area, self.max_area
            )));
        }
        if !(self.stroke_radius > 0.0) {
            return Err(Error::Config("stroke_radius must be positive".into()));
        }
        Ok(())
    }
}

fn area_fraction(m: &Mask) -> f64 {
    m.iter().filter(|&&v| v > 0).count() as f64 / m.len() as f64
}

/// Sample a binary mask whose nonzero fraction lies within the bounds.
pub fn sample_mask(shape: (usize, usize), kind: MaskKind, params: &MaskParams, seed: u64) -> Result<Mask> {
    super::note_call();
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return Err(Error::Precondition(format!("mask shape must be positive, got {shape:?}")));
    }
    params.validate()?;
    let kind = if kind == MaskKind::Auto { MaskKind::Blob } else { kind };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let target = rng.random_range(params.min_area..=params.max_area);
        let m = match kind {
            MaskKind::Stroke => stroke(shape, target, params, &mut rng),
            _ => blob(shape, target, &mut rng),
        };
        let a = area_fraction(&m);
        if a >= params.min_area && a <= params.max_area && a > 0.0 {
            return Ok(m);
        }
    }
    Err(Error::Precondition(format!(
        "no {kind:?} mask with area in [{}, {}] on {h}x{w} after {MAX_ATTEMPTS} attempts",
        params.min_area, params.max_area
    )))
}

fn stamp_disk(m: &mut Mask, cy: f64, cx: f64, r: f64) -> usize {
    let (h, w) = m.dim();
    let mut added = 0;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h - 1);
    let x1 = ((cx + r).ceil() as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            if dy * dy + dx * dx <= r * r && m[[y, x]] == 0 {
                m[[y, x]] = 1;
                added += 1;
            }
        }
    }
    added
}

fn stroke(shape: (usize, usize), target: f64, params: &MaskParams, rng: &mut ChaCha8Rng) -> Mask {
    let (h, w) = shape;
    let mut m = Array2::zeros(shape);
    let r = (params.stroke_radius * h.min(w) as f64).max(0.75);
    let goal = (target * (h * w) as f64).ceil() as usize;
    let turn = Normal::new(0.0, 0.35).expect("valid std");
    let (mut y, mut x) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let mut angle = rng.random_range(0.0..2.0 * PI);
    let step = 0.5 * r.max(1.0);
    let mut area = stamp_disk(&mut m, y, x, r);
    for _ in 0..20 * (h + w) * 8 {
        if area >= goal {
            break;
        }
        angle += turn.sample(rng);
        let (ny, nx) = (y + step * angle.sin(), x + step * angle.cos());
        // bounce off the borders
        if ny < 0.0 || ny > (h - 1) as f64 {
            angle = -angle;
        }
        if nx < 0.0 || nx > (w - 1) as f64 {
            angle = PI - angle;
        }
        y = (y + step * angle.sin()).clamp(0.0, (h - 1) as f64);
        x = (x + step * angle.cos()).clamp(0.0, (w - 1) as f64);
        area += stamp_disk(&mut m, y, x, r);
    }
    m
}

fn blob(shape: (usize, usize), target: f64, rng: &mut ChaCha8Rng) -> Mask {
    let (h, w) = shape;
    let px = (target * (h * w) as f64).max(1.0);
    let aspect: f64 = rng.random_range(0.5..2.0);
    // π·a·b = px with a/b = aspect
    let b = (px / (PI * aspect)).sqrt();
    let a = aspect * b;
    let theta = rng.random_range(0.0..PI);
    let harmonics: Vec<(f64, f64, f64)> = (2..=4)
        .map(|k| (k as f64, rng.random_range(0.0..0.12), rng.random_range(0.0..2.0 * PI)))
        .collect();
    let margin_y = a.max(b).min(h as f64 / 2.0);
    let margin_x = a.max(b).min(w as f64 / 2.0);
    let cy = rng.random_range(margin_y..=(h as f64 - margin_y).max(margin_y));
    let cx = rng.random_range(margin_x..=(w as f64 - margin_x).max(margin_x));
    let (s, c) = theta.sin_cos();
    Array2::from_shape_fn(shape, |(i, j)| {
        let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
        let phi = v.atan2(u);
        let edge = 1.0 + harmonics.iter().map(|(k, amp, ph)| amp * (k * phi + ph).cos()).sum::<f64>();
        u8::from(rho <= edge)
    })
}
