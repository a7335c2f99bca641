//! Run configuration: TOML file plus dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::AttentionConfig;
use crate::cptcn::CptcnConfig;
use crate::data::CorpusConfig;
use crate::error::{Error, Result};
use crate::gathering::GatherConfig;
use crate::model::{Architecture, ModelConfig};
use crate::optim::{AdamConfig, LrSchedule};
use crate::translate::DecodeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub checkpoint_every: u64,
    /// Number of most recent checkpoints averaged into the final model.
    pub average_last: usize,
    pub log_every: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 3000,
            batch_size: 8,
            lr_peak: 6.8e-4,
            warmup: 1000,
            adam: AdamConfig::default(),
            grad_clip: 0.0,
            checkpoint_every: 100,
            average_last: 5,
            log_every: 10,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { peak: self.lr_peak, warmup: self.warmup }
    }
}

/// One ablation axis: a dotted config key and the values it takes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationAxis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

/// A named grid; cells are the cartesian product of the axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub name: String,
    pub axes: Vec<AblationAxis>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Training steps per cell; overrides `train.steps`.
    pub steps: u64,
    pub grids: Vec<AblationGrid>,
}

fn axis(key: &str, values: Vec<toml::Value>) -> AblationAxis {
    AblationAxis { key: key.into(), values }
}

fn s(v: &str) -> toml::Value {
    toml::Value::String(v.into())
}

fn list(items: &[&str]) -> toml::Value {
    toml::Value::Array(items.iter().map(|x| s(x)).collect())
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            steps: 300,
            grids: vec![
                AblationGrid {
                    name: "gathering".into(),
                    axes: vec![axis("gathering.variant", vec![s("none"), s("centered"), s("sparse"), s("content_aware")])],
                },
                AblationGrid {
                    name: "cptcn".into(),
                    axes: vec![axis("cptcn.pe", vec![s("none"), s("ape"), s("rpe")])],
                },
                AblationGrid {
                    name: "cptcn_blocks".into(),
                    axes: vec![
                        axis("cptcn.residual", vec![toml::Value::Boolean(false), toml::Value::Boolean(true)]),
                        axis("cptcn.layernorm", vec![toml::Value::Boolean(false), toml::Value::Boolean(true)]),
                    ],
                },
                AblationGrid {
                    name: "drpe_sites".into(),
                    axes: vec![axis(
                        "attention.sites_with_drpe",
                        vec![list(&[]), list(&["enc"]), list(&["dec"]), list(&["enc", "dec"]), list(&["cross"]), list(&["enc", "dec", "cross"])],
                    )],
                },
                AblationGrid {
                    name: "drpe_terms".into(),
                    axes: vec![axis("attention.terms", vec![list(&["c2c"]), list(&["c2c", "c2p", "p2c"]), list(&["c2c", "c2p", "p2c", "p2p"])])],
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub gathering: GatherConfig,
    pub cptcn: CptcnConfig,
    pub attention: AttentionConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            gathering: GatherConfig::default(),
            cptcn: CptcnConfig::default(),
            attention: AttentionConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig { beam_width: 5, ..DecodeConfig::default() },
            ablation: AblationConfig::default(),
        }
    }
}

/// Parses a flag value as TOML; bare words become strings.
pub fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets `key` (dot-separated) in `root`; the key must already exist.
pub fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let entry = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}` (no `{}`)", parts[..=i].join("."))))?;
        if last {
            *entry = value;
            return Ok(());
        }
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("config key `{}` is not a section", parts[..=i].join("."))))?;
    }
    Err(Error::Config("empty config key".into()))
}

fn merge(base: &mut toml::Table, over: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in over {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &path)?,
            (Some(slot), v) => *slot = v,
            (None, _) => return Err(Error::Config(format!("unknown config key `{path}`"))),
        }
    }
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file (if any), then overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let file: toml::Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, file, "")?;
        }
        for (k, v) in overrides {
            set_dotted(&mut table, k, parse_value(v))?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_overrides(&self, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            set_dotted(&mut table, k, v.clone())?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            model: self.model.clone(),
            gathering: self.gathering.clone(),
            cptcn: self.cptcn.clone(),
            attention: self.attention.clone(),
            input_dim: self.corpus.input_dim,
            gloss_classes: self.corpus.gloss_classes(),
            word_vocab: self.corpus.word_vocab(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.architecture();
        arch.validate()?;
        self.corpus.validate(arch.min_frames())?;
        self.decode.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.checkpoint_every == 0 || t.log_every == 0 {
            return Err(Error::Config("train.batch_size, checkpoint_every and log_every must be positive".into()));
        }
        if t.average_last == 0 {
            return Err(Error::Config("train.average_last must be at least 1".into()));
        }
        if !(t.lr_peak.is_finite() && t.lr_peak > 0.0) {
            return Err(Error::Config("train.lr_peak must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("run config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
