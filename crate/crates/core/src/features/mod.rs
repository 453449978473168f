//! Multi-level local patch features from a frozen backbone.
//!
//! Each selected level map is averaged over a p×p neighborhood per location,
//! resized to the resolution of the first level and concatenated along
//! channels.

mod backbone;
mod conv;

use ndarray::{s, Array3, ArrayView3, Axis};

pub use backbone::{
    load_backbone, load_backbone_from, Backbone, BackboneSpec, CompactCnn, WideResNet50,
    COMPACT_CNN, WEIGHTS_DIR_ENV, WIDE_RESNET_50,
};

use crate::error::{Error, Result};
use crate::imageops::resize_bilinear;
use crate::par::{self, Exec};

/// Fused feature grid o, H0×W0×C.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedFeatureMap {
    pub data: Array3<f32>,
    pub origin_id: String,
    pub levels_used: Vec<usize>,
}

impl AggregatedFeatureMap {
    pub fn grid(&self) -> (usize, usize) {
        let (h, w, _) = self.data.dim();
        (h, w)
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

fn check_patchsize(p: usize) -> Result<()> {
    if p == 0 || p.is_multiple_of(2) {
        return Err(Error::Precondition(format!("patchsize must be odd, got {p}")));
    }
    Ok(())
}

/// Inclusive index range of the neighborhood along one axis, clipped.
fn window(center: usize, half: usize, len: usize) -> (usize, usize) {
    (center.saturating_sub(half), (center + half).min(len - 1))
}

/// In-bounds coordinates within Chebyshev radius ⌊p/2⌋ of (h, w).
pub fn neighborhood(h: usize, w: usize, p: usize, bounds: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    check_patchsize(p)?;
    let (hl, wl) = bounds;
    if h >= hl || w >= wl {
        return Err(Error::Precondition(format!(
            "location ({h}, {w}) outside bounds {bounds:?}"
        )));
    }
    let (h0, h1) = window(h, p / 2, hl);
    let (w0, w1) = window(w, p / 2, wl);
    Ok((h0..=h1)
        .flat_map(|i| (w0..=w1).map(move |j| (i, j)))
        .collect())
}

/// Count-adaptive neighborhood mean at every location of an H×W×C map.
pub fn aggregate_patch_features(level_map: ArrayView3<'_, f32>, p: usize) -> Result<Array3<f32>> {
    check_patchsize(p)?;
    let (h, w, c) = level_map.dim();
    if p == 1 {
        return Ok(level_map.to_owned());
    }
    // integral[i][j] = sum over rows < i, cols < j
    let mut integral = Array3::<f64>::zeros((h + 1, w + 1, c));
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                integral[[i + 1, j + 1, k]] = level_map[[i, j, k]] as f64
                    + integral[[i, j + 1, k]]
                    + integral[[i + 1, j, k]]
                    - integral[[i, j, k]];
            }
        }
    }
    let half = p / 2;
    let mut out = Array3::<f32>::zeros((h, w, c));
    for i in 0..h {
        let (r0, r1) = window(i, half, h);
        for j in 0..w {
            let (c0, c1) = window(j, half, w);
            let count = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
            for k in 0..c {
                let sum = integral[[r1 + 1, c1 + 1, k]] - integral[[r0, c1 + 1, k]]
                    - integral[[r1 + 1, c0, k]]
                    + integral[[r0, c0, k]];
                out[[i, j, k]] = (sum / count) as f32;
            }
        }
    }
    Ok(out)
}

/// Resize every map to `target` (default: the first map's size) and
/// concatenate channels in input order.
pub fn fuse_levels(z_maps: &[Array3<f32>], target: Option<(usize, usize)>) -> Result<Array3<f32>> {
    let first = z_maps
        .first()
        .ok_or_else(|| Error::Precondition("no level maps to fuse".into()))?;
    let (h0, w0) = target.unwrap_or((first.dim().0, first.dim().1));
    let total: usize = z_maps.iter().map(|z| z.dim().2).sum();
    let mut out = Array3::<f32>::zeros((h0, w0, total));
    let mut offset = 0;
    for z in z_maps {
        let c = z.dim().2;
        let resized = resize_bilinear(z.view(), (h0, w0));
        out.slice_mut(s![.., .., offset..offset + c]).assign(&resized);
        offset += c;
    }
    Ok(out)
}

/// A backbone plus the aggregation settings: the full feature extractor.
pub struct FeatureExtractor {
    backbone: Box<dyn Backbone>,
}

impl FeatureExtractor {
    pub fn new(backbone: Box<dyn Backbone>) -> Result<Self> {
        check_patchsize(backbone.spec().patchsize)?;
        if backbone.spec().levels.is_empty() {
            return Err(Error::Precondition("backbone level set is empty".into()));
        }
        Ok(FeatureExtractor { backbone })
    }

    pub fn from_spec(spec: &BackboneSpec) -> Result<Self> {
        Self::new(load_backbone(spec)?)
    }

    pub fn spec(&self) -> &BackboneSpec {
        self.backbone.spec()
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    /// Σ C_l over the configured levels.
    pub fn channels(&self) -> usize {
        self.spec()
            .levels
            .iter()
            .map(|&l| self.backbone.level_channels(l).expect("validated at load"))
            .sum()
    }

    /// Spatial size of the fused grid.
    pub fn grid(&self) -> (usize, usize) {
        let first = self.spec().levels[0];
        let stride = self.backbone.level_stride(first).expect("validated at load");
        let n = self.spec().input_size.div_ceil(stride);
        (n, n)
    }

    /// Raw per-level maps for an H×W×3 image in [0, 1].
    pub fn extract_hierarchy(&self, image: ArrayView3<'_, f32>) -> Result<Vec<Array3<f32>>> {
        let (_, _, c) = image.dim();
        if c != 3 {
            return Err(Error::Precondition(format!("expected 3 channels, got {c}")));
        }
        let n = self.spec().input_size;
        let resized = resize_bilinear(image, (n, n));
        let maps = self.backbone.forward(resized.view(), &self.spec().levels)?;
        for (map, &l) in maps.iter().zip(&self.spec().levels) {
            let expected = self.backbone.level_channels(l)?;
            if map.dim().2 != expected {
                return Err(Error::Shape(format!(
                    "level {l} produced {} channels, backbone declares {expected}",
                    map.dim().2
                )));
            }
        }
        Ok(maps)
    }

    pub fn extract_features(&self, image: ArrayView3<'_, f32>, id: &str) -> Result<AggregatedFeatureMap> {
        let p = self.spec().patchsize;
        let z: Vec<Array3<f32>> = self
            .extract_hierarchy(image)?
            .iter()
            .map(|m| aggregate_patch_features(m.view(), p))
            .collect::<Result<_>>()?;
        Ok(AggregatedFeatureMap {
            data: fuse_levels(&z, None)?,
            origin_id: id.to_string(),
            levels_used: self.spec().levels.clone(),
        })
    }

    /// Extract a batch of `(id, image)` pairs; order is preserved.
    pub fn extract_batch(
        &self,
        items: &[(String, ArrayView3<'_, f32>)],
        exec: Exec,
    ) -> Result<Vec<AggregatedFeatureMap>> {
        par::try_map(exec, items, |(id, img)| self.extract_features(img.view(), id))
    }
}

/// Flatten an H×W×C map into (H·W)×C rows.
pub fn to_rows(map: ArrayView3<'_, f32>) -> ndarray::Array2<f64> {
    let (h, w, c) = map.dim();
    map.mapv(f64::from)
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((h * w, c))
        .expect("contiguous")
}

/// Stack several maps along rows.
pub fn stack_rows(maps: &[&Array3<f32>]) -> ndarray::Array2<f64> {
    let parts: Vec<_> = maps.iter().map(|m| to_rows(m.view())).collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal channel counts")
}
