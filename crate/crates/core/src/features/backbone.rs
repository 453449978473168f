//! Frozen backbones and the registry that resolves a [`BackboneSpec`].

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::conv::{max_pool_3x3_s2, relu_inplace, Conv};
use crate::error::{Error, Result};

pub const WEIGHTS_DIR_ENV: &str = "ROADFUSION_WEIGHTS_DIR";
pub const WIDE_RESNET_50: &str = "wide-resnet-50";
pub const COMPACT_CNN: &str = "compact-cnn";

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
const BN_EPS: f32 = 1e-5;

/// Identity of the frozen feature extractor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub architecture: String,
    /// Hierarchy levels, ordered; 1-based (level 1 = first residual stage).
    pub levels: Vec<usize>,
    /// `random-init-<seed>` or the stem of `<weights dir>/<id>.safetensors`.
    pub weights_id: String,
    /// Images are resized to `input_size × input_size` before the backbone.
    pub input_size: usize,
    /// Neighborhood size for local aggregation.
    pub patchsize: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            architecture: WIDE_RESNET_50.into(),
            levels: vec![2, 3],
            weights_id: "imagenet1k-v1".into(),
            input_size: 256,
            patchsize: 3,
        }
    }
}

/// A pretrained network queried for intermediate feature maps.
///
/// Implementations hold no interior mutability: parameters are fixed once
/// constructed.
pub trait Backbone: Send + Sync {
    fn spec(&self) -> &BackboneSpec;

    /// Channel count of a hierarchy level.
    fn level_channels(&self, level: usize) -> Result<usize>;

    /// Spatial downsampling factor of a hierarchy level.
    fn level_stride(&self, level: usize) -> Result<usize>;

    /// Raw maps, H_l×W_l×C_l, for `levels` (in that order). The input is
    /// H×W×3 in [0, 1] at the configured resolution.
    fn forward(&self, image: ArrayView3<'_, f32>, levels: &[usize]) -> Result<Vec<Array3<f32>>>;

    /// Hex digest over every parameter.
    fn checksum(&self) -> String;
}

/// Resolve a spec, reading weights from `$ROADFUSION_WEIGHTS_DIR` when needed.
pub fn load_backbone(spec: &BackboneSpec) -> Result<Box<dyn Backbone>> {
    let dir = std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from);
    load_backbone_from(spec, dir.as_deref())
}

pub fn load_backbone_from(spec: &BackboneSpec, weights_dir: Option<&Path>) -> Result<Box<dyn Backbone>> {
    if spec.levels.is_empty() {
        return Err(Error::Precondition("backbone level set is empty".into()));
    }
    if spec.input_size == 0 {
        return Err(Error::Config("model.input_size must be positive".into()));
    }
    let mut source = ParamSource::resolve(&spec.weights_id, weights_dir)?;
    let max_level = *spec.levels.iter().max().expect("nonempty");
    let backbone: Box<dyn Backbone> = match spec.architecture.as_str() {
        WIDE_RESNET_50 => Box::new(WideResNet50::build(spec.clone(), &mut source, max_level)?),
        COMPACT_CNN => Box::new(CompactCnn::build(spec.clone(), &mut source, max_level)?),
        other => {
            return Err(Error::Config(format!(
                "unknown backbone architecture `{other}` (known: {WIDE_RESNET_50}, {COMPACT_CNN})"
            )))
        }
    };
    for &l in &spec.levels {
        backbone.level_channels(l)?;
    }
    Ok(backbone)
}

/// Where parameters come from.
enum ParamSource {
    Seeded(ChaCha8Rng),
    File {
        path: PathBuf,
        tensors: HashMap<String, (Vec<usize>, Vec<f32>)>,
    },
}

impl ParamSource {
    fn resolve(weights_id: &str, dir: Option<&Path>) -> Result<Self> {
        if let Some(seed) = weights_id.strip_prefix("random-init-") {
            let seed: u64 = seed
                .parse()
                .map_err(|_| Error::Config(format!("bad weights_id `{weights_id}`")))?;
            return Ok(ParamSource::Seeded(ChaCha8Rng::seed_from_u64(seed)));
        }
        let dir = dir.ok_or_else(|| {
            Error::Config(format!(
                "weights `{weights_id}` requested but {WEIGHTS_DIR_ENV} is not set"
            ))
        })?;
        let path = dir.join(format!("{weights_id}.safetensors"));
        let bytes = std::fs::read(&path).map_err(|e| {
            Error::Config(format!("unknown weights_id `{weights_id}` ({}: {e})", path.display()))
        })?;
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != safetensors::Dtype::F32 {
                return Err(Error::Config(format!(
                    "{}: tensor `{name}` is {:?}, expected F32",
                    path.display(),
                    view.dtype()
                )));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(name, (view.shape().to_vec(), data));
        }
        Ok(ParamSource::File { path, tensors })
    }

    fn tensor(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let ParamSource::File { path, tensors } = self else {
            unreachable!("tensor lookup on seeded source")
        };
        let (got, data) = tensors.get(name).ok_or_else(|| {
            Error::Config(format!("{}: missing tensor `{name}`", path.display()))
        })?;
        if got != shape {
            return Err(Error::Config(format!(
                "{}: tensor `{name}` has shape {got:?}, expected {shape:?}",
                path.display()
            )));
        }
        Ok(data.clone())
    }

    /// Convolution followed by batch norm, torchvision naming.
    fn conv_bn(
        &mut self,
        conv: &str,
        bn: &str,
        (in_ch, out_ch, k, stride, pad): (usize, usize, usize, usize, usize),
    ) -> Result<Conv> {
        match self {
            ParamSource::Seeded(rng) => Ok(Conv::he_init(rng, in_ch, out_ch, k, stride, pad)),
            ParamSource::File { .. } => {
                let w = self.tensor(&format!("{conv}.weight"), &[out_ch, in_ch, k, k])?;
                let weight = Array2::from_shape_vec((out_ch, in_ch * k * k), w).expect("checked shape");
                let g = self.tensor(&format!("{bn}.weight"), &[out_ch])?;
                let b = self.tensor(&format!("{bn}.bias"), &[out_ch])?;
                let m = self.tensor(&format!("{bn}.running_mean"), &[out_ch])?;
                let v = self.tensor(&format!("{bn}.running_var"), &[out_ch])?;
                Ok(Conv::new(
                    weight,
                    in_ch,
                    k,
                    stride,
                    pad,
                    Array1::ones(out_ch),
                    Array1::zeros(out_ch),
                )
                .with_batch_norm(&g, &b, &m, &v, BN_EPS))
            }
        }
    }

    /// Convolution with a plain bias.
    fn conv_bias(
        &mut self,
        name: &str,
        (in_ch, out_ch, k, stride, pad): (usize, usize, usize, usize, usize),
    ) -> Result<Conv> {
        match self {
            ParamSource::Seeded(rng) => Ok(Conv::he_init(rng, in_ch, out_ch, k, stride, pad)),
            ParamSource::File { .. } => {
                let w = self.tensor(&format!("{name}.weight"), &[out_ch, in_ch, k, k])?;
                let b = self.tensor(&format!("{name}.bias"), &[out_ch])?;
                Ok(Conv::new(
                    Array2::from_shape_vec((out_ch, in_ch * k * k), w).expect("checked shape"),
                    in_ch,
                    k,
                    stride,
                    pad,
                    Array1::ones(out_ch),
                    Array1::from(b),
                ))
            }
        }
    }
}

/// H×W×3 in [0,1] → normalized 3×H×W.
fn to_normalized_chw(image: ArrayView3<'_, f32>) -> Result<Array3<f32>> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Precondition(format!("expected 3 channels, got {c}")));
    }
    Ok(Array3::from_shape_fn((3, h, w), |(k, i, j)| {
        (image[[i, j, k]] - IMAGENET_MEAN[k]) / IMAGENET_STD[k]
    }))
}

fn to_hwc(x: Array3<f32>) -> Array3<f32> {
    x.permuted_axes([1, 2, 0]).as_standard_layout().into_owned()
}

fn check_levels(levels: &[usize], max: usize) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::Precondition("backbone level set is empty".into()));
    }
    match levels.iter().find(|&&l| l == 0 || l > max) {
        Some(l) => Err(Error::Config(format!("level {l} is not available (1..={max})"))),
        None => Ok(()),
    }
}

struct Bottleneck {
    conv1: Conv,
    conv2: Conv,
    conv3: Conv,
    downsample: Option<Conv>,
}

impl Bottleneck {
    fn forward(&self, x: ArrayView3<'_, f32>) -> Array3<f32> {
        let mut y = self.conv1.forward(x);
        relu_inplace(&mut y);
        let mut y = self.conv2.forward(y.view());
        relu_inplace(&mut y);
        let mut y = self.conv3.forward(y.view());
        match &self.downsample {
            Some(ds) => y += &ds.forward(x),
            None => y += &x,
        }
        relu_inplace(&mut y);
        y
    }

    fn hash_into(&self, h: &mut Sha256) {
        self.conv1.hash_into(h);
        self.conv2.hash_into(h);
        self.conv3.hash_into(h);
        if let Some(ds) = &self.downsample {
            ds.hash_into(h);
        }
    }
}

/// WideResNet-50-2 trunk (torchvision layout), built up to the deepest
/// requested level.
pub struct WideResNet50 {
    spec: BackboneSpec,
    stem: Conv,
    stages: Vec<Vec<Bottleneck>>,
}

impl WideResNet50 {
    const BLOCKS: [usize; 4] = [3, 4, 6, 3];
    const PLANES: [usize; 4] = [64, 128, 256, 512];
    const WIDTH_FACTOR: usize = 2;
    const EXPANSION: usize = 4;

    fn build(spec: BackboneSpec, src: &mut ParamSource, max_level: usize) -> Result<Self> {
        check_levels(&spec.levels, 4)?;
        let stem = src.conv_bn("conv1", "bn1", (3, 64, 7, 2, 3))?;
        let mut in_ch = 64;
        let mut stages = Vec::new();
        for stage in 0..max_level {
            let planes = Self::PLANES[stage];
            let width = planes * Self::WIDTH_FACTOR;
            let out = planes * Self::EXPANSION;
            let stride = if stage == 0 { 1 } else { 2 };
            let mut blocks = Vec::new();
            for b in 0..Self::BLOCKS[stage] {
                let p = format!("layer{}.{b}", stage + 1);
                let s = if b == 0 { stride } else { 1 };
                let conv1 = src.conv_bn(&format!("{p}.conv1"), &format!("{p}.bn1"), (in_ch, width, 1, 1, 0))?;
                let conv2 = src.conv_bn(&format!("{p}.conv2"), &format!("{p}.bn2"), (width, width, 3, s, 1))?;
                let conv3 = src.conv_bn(&format!("{p}.conv3"), &format!("{p}.bn3"), (width, out, 1, 1, 0))?;
                let downsample = if b == 0 {
                    Some(src.conv_bn(
                        &format!("{p}.downsample.0"),
                        &format!("{p}.downsample.1"),
                        (in_ch, out, 1, s, 0),
                    )?)
                } else {
                    None
                };
                blocks.push(Bottleneck {
                    conv1,
                    conv2,
                    conv3,
                    downsample,
                });
                in_ch = out;
            }
            stages.push(blocks);
        }
        Ok(WideResNet50 { spec, stem, stages })
    }
}

impl Backbone for WideResNet50 {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn level_channels(&self, level: usize) -> Result<usize> {
        check_levels(&[level], 4)?;
        Ok(Self::PLANES[level - 1] * Self::EXPANSION)
    }

    fn level_stride(&self, level: usize) -> Result<usize> {
        check_levels(&[level], 4)?;
        Ok(1 << (level + 1))
    }

    fn forward(&self, image: ArrayView3<'_, f32>, levels: &[usize]) -> Result<Vec<Array3<f32>>> {
        check_levels(levels, self.stages.len())?;
        let mut x = self.stem.forward(to_normalized_chw(image)?.view());
        relu_inplace(&mut x);
        let mut x = max_pool_3x3_s2(x.view());
        let deepest = *levels.iter().max().expect("nonempty");
        let mut taken: Vec<Option<Array3<f32>>> = vec![None; deepest];
        for (stage, blocks) in self.stages.iter().take(deepest).enumerate() {
            for block in blocks {
                x = block.forward(x.view());
            }
            if levels.contains(&(stage + 1)) {
                taken[stage] = Some(x.clone());
            }
        }
        Ok(levels
            .iter()
            .map(|&l| to_hwc(taken[l - 1].clone().expect("level computed")))
            .collect())
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.stem.hash_into(&mut h);
        for blocks in &self.stages {
            for b in blocks {
                b.hash_into(&mut h);
            }
        }
        hex::encode(h.finalize())
    }
}

/// Small plain CNN with the same stride ladder as the residual trunk
/// (levels at strides 4, 8, 16). Intended for CPU-scale experiments.
pub struct CompactCnn {
    spec: BackboneSpec,
    stem: Conv,
    stages: Vec<Conv>,
}

impl CompactCnn {
    pub const CHANNELS: [usize; 3] = [64, 128, 256];
    const STEM: usize = 32;

    fn build(spec: BackboneSpec, src: &mut ParamSource, max_level: usize) -> Result<Self> {
        check_levels(&spec.levels, 3)?;
        let stem = src.conv_bias("stem", (3, Self::STEM, 3, 2, 1))?;
        let mut in_ch = Self::STEM;
        let mut stages = Vec::new();
        for (l, &out) in Self::CHANNELS.iter().enumerate().take(max_level) {
            stages.push(src.conv_bias(&format!("level{}", l + 1), (in_ch, out, 3, 2, 1))?);
            in_ch = out;
        }
        Ok(CompactCnn { spec, stem, stages })
    }
}

impl Backbone for CompactCnn {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn level_channels(&self, level: usize) -> Result<usize> {
        check_levels(&[level], 3)?;
        Ok(Self::CHANNELS[level - 1])
    }

    fn level_stride(&self, level: usize) -> Result<usize> {
        check_levels(&[level], 3)?;
        Ok(1 << (level + 1))
    }

    fn forward(&self, image: ArrayView3<'_, f32>, levels: &[usize]) -> Result<Vec<Array3<f32>>> {
        check_levels(levels, self.stages.len())?;
        let mut x = self.stem.forward(to_normalized_chw(image)?.view());
        relu_inplace(&mut x);
        let deepest = *levels.iter().max().expect("nonempty");
        let mut taken: Vec<Option<Array3<f32>>> = vec![None; deepest];
        for (l, conv) in self.stages.iter().take(deepest).enumerate() {
            x = conv.forward(x.view());
            relu_inplace(&mut x);
            if levels.contains(&(l + 1)) {
                taken[l] = Some(x.clone());
            }
        }
        Ok(levels
            .iter()
            .map(|&l| to_hwc(taken[l - 1].clone().expect("level computed")))
            .collect())
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.stem.hash_into(&mut h);
        for c in &self.stages {
            c.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }
}
