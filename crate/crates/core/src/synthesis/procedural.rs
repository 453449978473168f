//! Deterministic mask-confined texture perturbation.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{InpaintBackend, SynthesisTriplet};
use crate::error::Result;
use crate::synthesis::{BackendKind, MaskKind};

/// Darkening plus granular noise for blobs, thin dark lines for strokes.
#[derive(Clone, Copy, Debug, Default)]
pub struct Procedural;

impl InpaintBackend for Procedural {
    fn kind(&self) -> BackendKind {
        BackendKind::Procedural
    }

    fn inpaint(&self, t: &SynthesisTriplet) -> Result<Array3<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed ^ 0x9e37_79b9_7f4a_7c15);
        let (darken, grain) = match t.mask_kind {
            MaskKind::Stroke => (rng.random_range(0.2f32..0.4), 0.04f32),
            _ => (rng.random_range(0.5f32..0.7), 0.10f32),
        };
        let mut out = t.normal_image.image.clone();
        let (h, w, _) = out.dim();
        for y in 0..h {
            for x in 0..w {
                if t.mask[[y, x]] == 0 {
                    continue;
                }
                let n: f32 = rng.random_range(-grain..grain);
                for c in 0..3 {
                    let v = out[[y, x, c]];
                    out[[y, x, c]] = (v * darken + n).clamp(0.0, 1.0);
                }
            }
        }
        Ok(out)
    }
}
