//! Single-file checkpoint archive.
//!
//! Layout: the line `roadfusion-ckpt-v1\n`, a little-endian `u64` header
//! length, a JSON header (backbone spec, config digest, tensor table), then
//! every tensor as little-endian `f64` in table order.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{AdaptorParams, AdaptorRole, DiscriminatorParams, ModelState};
use crate::error::{Error, Result};
use crate::features::BackboneSpec;

pub const MAGIC: &str = "roadfusion-ckpt-v1\n";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    backbone_spec: BackboneSpec,
    config_digest: String,
    tensors: Vec<TensorEntry>,
}

fn tensors(m: &ModelState) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
    let d = &m.discriminator;
    let hd = d.hidden();
    let mut norm = Vec::with_capacity(4 * hd);
    for a in [&d.gamma, &d.beta, &d.running_mean, &d.running_var] {
        norm.extend(a.iter().copied());
    }
    let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<_>>();
    vec![
        ("a.weight", m.adaptor_a.weight.shape().to_vec(), flat(&m.adaptor_a.weight)),
        ("b.weight", m.adaptor_b.weight.shape().to_vec(), flat(&m.adaptor_b.weight)),
        ("d.layer1", d.layer1.shape().to_vec(), flat(&d.layer1)),
        ("d.norm", vec![4, hd], norm),
        ("d.layer2", vec![hd], d.layer2.to_vec()),
        ("d.layer2.bias", vec![1], vec![d.bias]),
    ]
}

pub fn to_bytes(m: &ModelState) -> Vec<u8> {
    let ts = tensors(m);
    let header = Header {
        backbone_spec: m.backbone_spec.clone(),
        config_digest: m.config_digest.clone(),
        tensors: ts
            .iter()
            .map(|(n, s, _)| TensorEntry {
                name: n.to_string(),
                shape: s.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &ts {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    let rest = bytes
        .strip_prefix(MAGIC.as_bytes())
        .ok_or_else(|| bad("missing roadfusion-ckpt-v1 header"))?;
    if rest.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&rest[..len]).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut data = &rest[len..];
    let mut take = |name: &str, expect_rank: usize| -> Result<(Vec<usize>, Vec<f64>)> {
        let entry = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if entry.shape.len() != expect_rank {
            return Err(Error::Checkpoint(format!("tensor `{name}` has wrong rank")));
        }
        let n: usize = entry.shape.iter().product();
        if data.len() < n * 8 {
            return Err(Error::Checkpoint(format!("tensor `{name}` truncated")));
        }
        let vals = data[..n * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        data = &data[n * 8..];
        Ok((entry.shape.clone(), vals))
    };
    // tensors are stored in table order; read them in that order
    let order: Vec<String> = header.tensors.iter().map(|t| t.name.clone()).collect();
    let mut a = None;
    let mut b = None;
    let mut l1 = None;
    let mut norm = None;
    let mut l2 = None;
    let mut bias = None;
    for name in &order {
        match name.as_str() {
            "a.weight" => a = Some(take(name, 2)?),
            "b.weight" => b = Some(take(name, 2)?),
            "d.layer1" => l1 = Some(take(name, 2)?),
            "d.norm" => norm = Some(take(name, 2)?),
            "d.layer2" => l2 = Some(take(name, 1)?),
            "d.layer2.bias" => bias = Some(take(name, 1)?),
            other => return Err(Error::Checkpoint(format!("unexpected tensor `{other}`"))),
        }
    }
    let missing = |n: &str| Error::Checkpoint(format!("missing tensor `{n}`"));
    let mat = |(s, v): (Vec<usize>, Vec<f64>)| {
        Array2::from_shape_vec((s[0], s[1]), v).map_err(|e| Error::Checkpoint(e.to_string()))
    };
    let adaptor_a = mat(a.ok_or_else(|| missing("a.weight"))?)?;
    let adaptor_b = mat(b.ok_or_else(|| missing("b.weight"))?)?;
    let layer1 = mat(l1.ok_or_else(|| missing("d.layer1"))?)?;
    let norm = mat(norm.ok_or_else(|| missing("d.norm"))?)?;
    let (_, layer2) = l2.ok_or_else(|| missing("d.layer2"))?;
    let (_, bias) = bias.ok_or_else(|| missing("d.layer2.bias"))?;
    let hd = layer1.nrows();
    let c = adaptor_a.ncols();
    if adaptor_a.dim() != (c, c)
        || adaptor_b.dim() != (c, c)
        || layer1.ncols() != c
        || norm.dim() != (4, hd)
        || layer2.len() != hd
        || bias.len() != 1
    {
        return Err(bad("inconsistent tensor shapes"));
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensors"));
    }
    Ok(ModelState {
        adaptor_a: AdaptorParams {
            weight: adaptor_a,
            role: AdaptorRole::A,
        },
        adaptor_b: AdaptorParams {
            weight: adaptor_b,
            role: AdaptorRole::B,
        },
        discriminator: DiscriminatorParams {
            layer1,
            gamma: norm.row(0).to_owned(),
            beta: norm.row(1).to_owned(),
            running_mean: norm.row(2).to_owned(),
            running_var: norm.row(3).to_owned(),
            layer2: Array1::from(layer2),
            bias: bias[0],
        },
        backbone_spec: header.backbone_spec,
        config_digest: header.config_digest,
    })
}

pub fn digest(m: &ModelState) -> String {
    hex::encode(Sha256::digest(to_bytes(m)))
}

pub fn save(m: &ModelState, path: &Path) -> Result<String> {
    let bytes = to_bytes(m);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
