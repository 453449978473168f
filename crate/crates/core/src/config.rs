//! Run configuration: TOML with a fixed key set, `--set` overrides,
//! provenance tracking and a stable digest.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::adaptation::HeadConfig;
use crate::dataset::LayoutSpec;
use crate::error::{Error, Result};
use crate::features::{BackboneSpec, WIDE_RESNET_50};
use crate::inference::InferenceConfig;
use crate::synthesis::SynthesisConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub root: String,
    pub adapter: String,
    /// Train, val and test fractions.
    pub ratios: [f64; 3],
    /// Seeds the split and the synthesis pool.
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            root: String::new(),
            adapter: "canonical".into(),
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: String,
    pub weights_id: String,
    pub levels: Vec<usize>,
    pub input_size: usize,
    pub patchsize: usize,
    /// Discriminator hidden width; 0 means the feature channel count.
    pub hidden_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = BackboneSpec::default();
        ModelConfig {
            backbone: WIDE_RESNET_50.into(),
            weights_id: b.weights_id,
            levels: b.levels,
            input_size: b.input_size,
            patchsize: b.patchsize,
            hidden_width: 0,
        }
    }
}

impl ModelConfig {
    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            architecture: self.backbone.clone(),
            levels: self.levels.clone(),
            weights_id: self.weights_id.clone(),
            input_size: self.input_size,
            patchsize: self.patchsize,
        }
    }

    pub fn head(&self, channels: usize) -> HeadConfig {
        HeadConfig {
            channels,
            hidden: if self.hidden_width == 0 { channels } else { self.hidden_width },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: String,
    /// Names `output_dir/<run id>`; empty means a digest prefix.
    pub run_name: String,
    pub dataset: DatasetConfig,
    pub synthesis: SynthesisConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: "runs".into(),
            run_name: String::new(),
            dataset: DatasetConfig::default(),
            synthesis: SynthesisConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

/// A validated configuration and the keys the user set explicitly.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub user_keys: BTreeSet<String>,
}

fn default_tree() -> Table {
    match Value::try_from(RunConfig::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    }
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

/// Overlay `user` on `base`, rejecting unknown keys and mismatched types.
fn merge(base: &mut Table, user: &Table, prefix: &str, set: &mut BTreeSet<String>) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(slot) = base.get_mut(k) else {
            return Err(Error::Config(format!("unknown key `{path}`")));
        };
        match (slot, v) {
            (Value::Table(b), Value::Table(u)) => merge(b, u, &path, set)?,
            (slot @ Value::Float(_), Value::Integer(i)) => {
                *slot = Value::Float(*i as f64);
                set.insert(path);
            }
            (slot, v) if std::mem::discriminant(slot) == std::mem::discriminant(v) => {
                *slot = v.clone();
                set.insert(path);
            }
            (slot, v) => {
                return Err(Error::Config(format!(
                    "key `{path}`: expected {}, found {}",
                    type_name(slot),
                    type_name(v)
                )))
            }
        }
    }
    Ok(())
}

fn lookup<'a>(t: &'a Table, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut cur = t.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn set_path(t: &mut Table, path: &str, v: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{path}`")));
    }
    let mut cur = t;
    for p in &parts[..parts.len() - 1] {
        cur = match cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(next) => next,
            _ => return Err(Error::Config(format!("key `{path}`: `{p}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), v);
    Ok(())
}

/// Parse `key=value`; the value is read as TOML, falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((k.trim().to_string(), value))
}

impl LoadedConfig {
    /// Parse TOML text, apply overrides, fill defaults and validate.
    pub fn from_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_path(&mut user, &k, v)?;
        }
        let mut tree = default_tree();
        let mut user_keys = BTreeSet::new();
        merge(&mut tree, &user, "", &mut user_keys)?;
        let config = match RunConfig::deserialize(Value::Table(tree.clone())) {
            Ok(c) => c,
            Err(e) => {
                // attribute the failure to the first user key that triggers it alone
                let culprit = user_keys.iter().find(|k| {
                    let mut t = default_tree();
                    let v = lookup(&tree, k).expect("merged key").clone();
                    set_path(&mut t, k, v).is_ok() && RunConfig::deserialize(Value::Table(t)).is_err()
                });
                return Err(Error::Config(match culprit {
                    Some(k) => format!("key `{k}`: {e}"),
                    None => e.to_string(),
                }));
            }
        };
        config.validate()?;
        Ok(LoadedConfig { config, user_keys })
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str(&text, overrides)
    }

    /// Normalized config, one `key = value` per line tagged default or user.
    pub fn echo(&self) -> String {
        let tree = match Value::try_from(&self.config).expect("config serializes") {
            Value::Table(t) => t,
            _ => unreachable!(),
        };
        let mut out = String::new();
        let mut leaves = Vec::new();
        flatten(&tree, "", &mut leaves);
        for (k, v) in leaves {
            let origin = if self.user_keys.contains(&k) { "user" } else { "default" };
            let _ = writeln!(out, "{k} = {v}  # {origin}");
        }
        out
    }
}

fn flatten(t: &Table, prefix: &str, out: &mut Vec<(String, Value)>) {
    for (k, v) in t {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(sub) => flatten(sub, &path, out),
            v => out.push((path, v.clone())),
        }
    }
}

fn canonical_json(v: &serde_json::Value, out: &mut String) {
    match v {
        serde_json::Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string"));
                out.push(':');
                canonical_json(&m[*k], out);
            }
            out.push('}');
        }
        serde_json::Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonical_json(x, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.ratios.iter().any(|r| !(*r >= 0.0)) || (d.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "dataset.ratios must be nonnegative and sum to 1, got {:?}",
                d.ratios
            )));
        }
        LayoutSpec::by_name(&d.adapter).map_err(|e| Error::Config(format!("dataset.adapter: {e}")))?;
        self.synthesis.validate()?;
        let m = &self.model;
        if m.levels.is_empty() {
            return Err(Error::Config("model.levels must not be empty".into()));
        }
        if m.patchsize.is_multiple_of(2) {
            return Err(Error::Config(format!("model.patchsize must be odd, got {}", m.patchsize)));
        }
        if m.input_size == 0 {
            return Err(Error::Config("model.input_size must be positive".into()));
        }
        let t = &self.train;
        if !(t.loss.tau_plus > t.loss.tau_minus) {
            return Err(Error::Config(format!(
                "train.loss.tau_plus ({}) must exceed train.loss.tau_minus ({})",
                t.loss.tau_plus, t.loss.tau_minus
            )));
        }
        if t.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        t.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        if !(self.inference.sigma > 0.0) {
            return Err(Error::Config("inference.sigma must be positive".into()));
        }
        Ok(())
    }

    /// sha256 over the canonical JSON form, excluding output location and
    /// run name.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(m) = &mut v {
            m.remove("output_dir");
            m.remove("run_name");
        }
        let mut s = String::new();
        canonical_json(&v, &mut s);
        hex::encode(Sha256::digest(s.as_bytes()))
    }

    pub fn run_id(&self) -> String {
        if self.run_name.is_empty() {
            self.digest()[..12].to_string()
        } else {
            self.run_name.clone()
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        Path::new(&self.output_dir).join(self.run_id())
    }

    /// Apply a global seed to the dataset split, pool and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
    }
}
