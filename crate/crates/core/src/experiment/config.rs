use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::structures::{ReportMode, Structure};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Directory(DirectorySource),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectorySource {
    pub path: PathBuf,
    #[serde(default = "three")]
    pub channels: usize,
    #[serde(default = "thirty_two")]
    pub height: usize,
    #[serde(default = "thirty_two")]
    pub width: usize,
}

fn three() -> usize {
    3
}

fn thirty_two() -> usize {
    32
}

/// Architecture settings shared by every method of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub d_img: usize,
    pub meta_hidden: Vec<usize>,
    pub d_meta: usize,
    pub heads: usize,
    pub literal_eq7: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            conv_channels: vec![16, 32, 64],
            kernel: 3,
            d_img: 128,
            meta_hidden: vec![64],
            d_meta: 64,
            heads: 8,
            literal_eq7: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub structure: Structure,
    #[serde(default = "default_fusion")]
    pub fusion: FusionKind,
    /// JIF only: report a single variant. Both are reported when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ReportMode>,
}

fn default_fusion() -> FusionKind {
    FusionKind::Mmfa
}

impl MethodSpec {
    pub fn new(structure: Structure, fusion: FusionKind) -> Self {
        Self {
            structure,
            fusion,
            report: None,
        }
    }

    /// Reported variants with their result-table names.
    pub fn variants(&self) -> Vec<(String, ReportMode)> {
        let f = self.fusion.label();
        match self.structure {
            Structure::Image => vec![("Image".into(), ReportMode::Ofb)],
            Structure::Jf => vec![(format!("JF-{f}"), ReportMode::Ofb)],
            Structure::Jif => {
                let all = [(format!("JIF-{f}-OFB"), ReportMode::Ofb), (format!("JIF-{f}-ALL"), ReportMode::All)];
                match self.report {
                    Some(r) => all.into_iter().filter(|(_, m)| *m == r).collect(),
                    None => all.into(),
                }
            }
        }
    }

    /// Prediction used for early stopping: the decision-level mean whenever
    /// the JIF "All" variant is reported.
    pub fn stopping_report(&self) -> ReportMode {
        if self.variants().iter().any(|(_, r)| *r == ReportMode::All) {
            ReportMode::All
        } else {
            ReportMode::Ofb
        }
    }

    /// Directory name of the trained model.
    pub fn slug(&self) -> String {
        match self.structure {
            Structure::Image => "image".into(),
            Structure::Jf => format!("jf-{}", self.fusion.label().to_lowercase()),
            Structure::Jif => format!("jif-{}", self.fusion.label().to_lowercase()),
        }
    }
}

fn default_methods() -> Vec<MethodSpec> {
    vec![
        MethodSpec::new(Structure::Image, FusionKind::Cat),
        MethodSpec::new(Structure::Jf, FusionKind::Cat),
        MethodSpec::new(Structure::Jf, FusionKind::Mmfa),
        MethodSpec::new(Structure::Jif, FusionKind::Mmfa),
    ]
}

fn default_folds() -> usize {
    5
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/experiment")
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Share of each training fold held out, stratified, for early stopping.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "yes")]
    pub save_checkpoints: bool,
}

impl ExperimentConfig {
    /// Parses a JSON config after applying `key.path=value` overrides.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.methods.is_empty() {
            return bad("no methods configured".into());
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.seeds.is_empty() {
            return bad("no seeds configured".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        let mut seen = HashSet::new();
        for m in &self.methods {
            let variants = m.variants();
            if variants.is_empty() {
                return bad(format!("method {m:?} reports nothing"));
            }
            for (name, _) in variants {
                if !seen.insert(name.clone()) {
                    return bad(format!("method {name} listed twice"));
                }
            }
            if m.structure != Structure::Image && m.fusion == FusionKind::Mmfa {
                let total = self.model.d_img + self.model.d_meta;
                if self.model.heads == 0 || total % self.model.heads != 0 {
                    return Err(Error::dim(
                        "experiment config",
                        format!("d_img + d_meta = {total} is not divisible into {} heads", self.model.heads),
                    ));
                }
            }
        }
        let mut unique = HashSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !unique.insert(**s)) {
            return bad(format!("seed {s} listed twice"));
        }
        self.train.validate()?;
        match &self.dataset {
            DatasetSource::Synthetic(spec) => spec.validate(),
            DatasetSource::Directory(d) if !d.path.is_dir() => {
                bad(format!("dataset directory {} does not exist", d.path.display()))
            }
            DatasetSource::Directory(_) => Ok(()),
        }
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sets `path.to.key` (array elements by index) to `value`, parsed as JSON
/// when possible and as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override {assignment:?} has an empty key")));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        node = child(node, key, assignment)?;
    }
    let last = keys[keys.len() - 1];
    match node {
        Value::Object(map) => {
            map.insert(last.to_string(), value);
        }
        Value::Array(items) => {
            let slot = last
                .parse::<usize>()
                .ok()
                .and_then(|i| items.get_mut(i))
                .ok_or_else(|| Error::Config(format!("override {assignment:?}: no element {last}")))?;
            *slot = value;
        }
        _ => return Err(Error::Config(format!("override {assignment:?}: {last} is not inside an object"))),
    }
    Ok(())
}

fn child<'a>(node: &'a mut Value, key: &str, assignment: &str) -> Result<&'a mut Value> {
    match node {
        Value::Object(map) => Ok(map
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()))),
        Value::Array(items) => key
            .parse::<usize>()
            .ok()
            .and_then(move |i| items.get_mut(i))
            .ok_or_else(|| Error::Config(format!("override {assignment:?}: no element {key}"))),
        _ => Err(Error::Config(format!("override {assignment:?}: {key} is not an object"))),
    }
}
