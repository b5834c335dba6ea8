//! Run configuration: a TOML key tree with dotted-path overrides.
//!
//! Every key has a default; a config file only needs the keys it changes.
//! Overrides use `section.key=value`, where `value` is a TOML literal
//! (`2`, `0.5`, `true`, `[2, 4, 8]`, `"flora"`) or a bare word taken as a
//! string.

use serde::{Deserialize, Serialize};

use crate::drs::SelectionMode;
use crate::model::{ModelConfig, OptimizerConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{key}`{}", suggestion_text(.suggestion))]
    UnknownKey {
        key: String,
        suggestion: Option<String>,
    },
    #[error("override `{0}` is not of the form key=value")]
    MalformedOverride(String),
    #[error("unknown profile `{0}` (expected `fast` or `paper-shape`)")]
    UnknownProfile(String),
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn suggestion_text(s: &Option<String>) -> String {
    match s {
        Some(k) => format!(", did you mean `{k}`?"),
        None => String::new(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    ClassIncremental,
    DomainIncremental,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub kind: StreamKind,
    pub num_tasks: usize,
    /// Class-incremental only.
    pub classes_per_task: usize,
    /// Domain-incremental only: the shared label set.
    pub num_classes: usize,
    pub seq_len: usize,
    pub samples_per_class: usize,
    /// Radius of the sphere class means are drawn on.
    pub separation: f64,
    /// Per-task separations, cycled; empty means `separation` for every task.
    pub separations: Vec<f64>,
    pub domain_shift: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            kind: StreamKind::ClassIncremental,
            num_tasks: 5,
            classes_per_task: 2,
            num_classes: 4,
            seq_len: 8,
            samples_per_class: 60,
            separation: 10.0,
            separations: Vec::new(),
            domain_shift: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            num_heads: 2,
            num_layers: 1,
            mlp_hidden: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterChoice {
    /// Shared bases plus per-task coefficients.
    Flora,
    /// Independent `A_t B_tᵀ` per task.
    PlainLora,
    /// One dense update trained on every task and never frozen.
    Overwrite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub kind: AdapterChoice,
    pub r_max: usize,
    pub orthonormal: bool,
    /// Rank used when `drs.enabled = false` (and by plain LoRA).
    pub fixed_rank: usize,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            kind: AdapterChoice::Flora,
            r_max: 8,
            orthonormal: true,
            fixed_rank: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrsSection {
    pub enabled: bool,
    pub candidates: Vec<usize>,
    pub tau: f64,
    pub mode: SelectionMode,
    pub probe_steps: usize,
    /// Selector weight updates per task from per-candidate probe losses;
    /// 0 keeps the initial weights.
    pub weight_steps: usize,
    pub weight_lr: f64,
}

impl Default for DrsSection {
    fn default() -> Self {
        Self {
            enabled: true,
            candidates: vec![2, 4, 8],
            tau: 1.0,
            mode: SelectionMode::Argmax,
            probe_steps: 50,
            weight_steps: 10,
            weight_lr: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmpSection {
    pub m: usize,
}

impl Default for DmpSection {
    fn default() -> Self {
        Self { m: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    /// Pretrain the base weights on held-out classes before the stream.
    pub pretrain: bool,
    pub pretrain_classes: usize,
    pub pretrain_steps: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            pretrain: false,
            pretrain_classes: 8,
            pretrain_steps: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub stream: StreamConfig,
    pub model: ModelSection,
    pub adapter: AdapterSection,
    pub drs: DrsSection,
    pub dmp: DmpSection,
    pub train: TrainSection,
    pub backbone: BackboneSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs".into(),
            stream: StreamConfig::default(),
            model: ModelSection::default(),
            adapter: AdapterSection::default(),
            drs: DrsSection::default(),
            dmp: DmpSection::default(),
            train: TrainSection::default(),
            backbone: BackboneSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Fast,
    PaperShape,
}

impl std::str::FromStr for Profile {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fast" => Ok(Profile::Fast),
            "paper-shape" => Ok(Profile::PaperShape),
            other => Err(ConfigError::UnknownProfile(other.into())),
        }
    }
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Fast => Self::default(),
            Profile::PaperShape => {
                let mut c = Self::default();
                c.model = ModelSection {
                    embed_dim: 64,
                    num_heads: 4,
                    num_layers: 2,
                    mlp_hidden: 128,
                };
                c.stream.seq_len = 16;
                c.stream.num_tasks = 10;
                c.train.epochs = 30;
                c.train.batch_size = 64;
                c.train.lr = 2e-3;
                c.drs.candidates = vec![2, 4, 8];
                c
            }
        }
    }

    /// Parses a TOML document layered over `base`, then applies overrides.
    pub fn load(base: &RunConfig, document: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut tree = toml::Value::try_from(base).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let known = flatten_keys(&tree);
        if let Some(doc) = document {
            let user: toml::Value = toml::from_str(doc).map_err(|e| ConfigError::Parse(e.to_string()))?;
            let mut keys = Vec::new();
            collect_leaves(&user, String::new(), &mut keys);
            for (key, value) in keys {
                set_key(&mut tree, &known, &key, value)?;
            }
        }
        for raw in overrides {
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| ConfigError::MalformedOverride(raw.clone()))?;
            set_key(&mut tree, &known, key.trim(), parse_literal(value.trim()))?;
        }
        let config: RunConfig = tree.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.model.embed_dim,
            num_heads: self.model.num_heads,
            num_layers: self.model.num_layers,
            mlp_hidden: self.model.mlp_hidden,
            max_seq_len: self.stream.seq_len,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            ..OptimizerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let s = &self.stream;
        if s.num_tasks == 0 {
            return bad("stream.num_tasks must be at least 1".into());
        }
        if s.kind == StreamKind::ClassIncremental && s.classes_per_task < 2 {
            return bad("stream.classes_per_task must be at least 2".into());
        }
        if s.kind == StreamKind::DomainIncremental && s.num_classes < 2 {
            return bad("stream.num_classes must be at least 2".into());
        }
        if s.seq_len == 0 {
            return bad("stream.seq_len must be positive".into());
        }
        if s.samples_per_class < 10 {
            return bad("stream.samples_per_class must be at least 10 so every split is non-empty".into());
        }
        if !(s.separation >= 0.0) || s.separations.iter().any(|x| !(*x >= 0.0)) {
            return bad("separations must be non-negative".into());
        }
        if !(s.domain_shift >= 0.0) {
            return bad("stream.domain_shift must be non-negative".into());
        }
        let m = &self.model;
        if m.embed_dim == 0 || m.num_heads == 0 || m.embed_dim % m.num_heads != 0 {
            return bad("model.embed_dim must be a positive multiple of model.num_heads".into());
        }
        if m.num_layers == 0 || m.mlp_hidden == 0 {
            return bad("model.num_layers and model.mlp_hidden must be positive".into());
        }
        let a = &self.adapter;
        let min_dim = m.embed_dim.min(m.mlp_hidden);
        if a.r_max == 0 || a.r_max > min_dim {
            return bad(format!("adapter.r_max must be in 1..={min_dim}"));
        }
        if a.fixed_rank == 0 || a.fixed_rank > a.r_max {
            return bad("adapter.fixed_rank must be in 1..=adapter.r_max".into());
        }
        let d = &self.drs;
        if d.candidates.is_empty()
            || d.candidates[0] == 0
            || d.candidates.windows(2).any(|w| w[0] >= w[1])
            || *d.candidates.last().unwrap() > a.r_max
        {
            return bad("drs.candidates must be strictly increasing, positive and at most adapter.r_max".into());
        }
        if !(d.tau > 0.0 && d.tau.is_finite()) {
            return bad("drs.tau must be positive".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || !(t.lr >= 0.0) || !(t.weight_decay >= 0.0) {
            return bad("train.batch_size must be positive; lr and weight_decay non-negative".into());
        }
        Ok(())
    }

    /// Whether rank selection runs (only meaningful for F-LoRA).
    pub fn uses_drs(&self) -> bool {
        self.adapter.kind == AdapterChoice::Flora && self.drs.enabled
    }
}

/// Every leaf key of the default config, as dotted paths.
pub fn known_keys() -> Vec<String> {
    flatten_keys(&toml::Value::try_from(RunConfig::default()).expect("default config serializes"))
}

fn flatten_keys(tree: &toml::Value) -> Vec<String> {
    let mut out = Vec::new();
    collect_leaves(tree, String::new(), &mut out);
    out.into_iter().map(|(k, _)| k).collect()
}

fn collect_leaves(value: &toml::Value, prefix: String, out: &mut Vec<(String, toml::Value)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect_leaves(v, key, out);
            }
        }
        other => out.push((prefix, other.clone())),
    }
}

fn set_key(tree: &mut toml::Value, known: &[String], key: &str, value: toml::Value) -> Result<(), ConfigError> {
    if !known.iter().any(|k| k == key) {
        let suggestion = known
            .iter()
            .map(|k| (strsim::levenshtein(k, key), k))
            .min()
            .filter(|(d, _)| *d <= key.len().max(3) / 2)
            .map(|(_, k)| k.clone());
        return Err(ConfigError::UnknownKey {
            key: key.into(),
            suggestion,
        });
    }
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node.get_mut(*part).expect("known key path exists");
    }
    let table = node.as_table_mut().expect("known key parent is a table");
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
