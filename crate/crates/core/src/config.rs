//! Run configuration: one TOML file plus `section.key=value` overrides.
//! Every field has a default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::read_text;
use crate::error::{Error, Result};
use crate::graph::FilterConfig;
use crate::mcsm::{LossWeights, TauPolicy};
use crate::neural::AdamConfig;
use crate::realizer::{BeamOptions, BlindSchedule, ExternalConfig, NoiseRates, NucleusOptions};
use crate::ssm::DEFAULT_T_MAX;
use crate::training::TrainOptions;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Run seed; every artifact header records it.
    pub seed: u64,
    pub paths: PathsConfig,
    pub graph: FilterConfig,
    pub model: ModelConfig,
    pub train: PlannerTraining,
    pub ssm: SsmConfig,
    pub mcsm: McsmConfig,
    pub realizer: RealizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    pub kb: PathBuf,
    pub embeddings: PathBuf,
    /// Directory for graphs, checkpoints, plans, stories and reports.
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            train: "data/train.jsonl".into(),
            test: "data/test.jsonl".into(),
            kb: "data/kb.tsv".into(),
            embeddings: "data/embeddings.txt".into(),
            output: "out".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    /// Largest sequence length the positional embeddings cover.
    pub max_images: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            emb_dim: 32,
            hidden_dim: 32,
            heads: 4,
            max_images: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: AdamConfig::default().lr,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            clip_norm: self.clip_norm,
            seed,
        }
    }
}

/// Separate schedules per planner.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerTraining {
    pub ssm: TrainConfig,
    pub mcsm: TrainConfig,
    pub i2c: TrainConfig,
}

impl PlannerTraining {
    fn all(&self) -> [(&'static str, &TrainConfig); 3] {
        [("train.ssm", &self.ssm), ("train.mcsm", &self.mcsm), ("train.i2c", &self.i2c)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsmConfig {
    pub t_max: usize,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig { t_max: DEFAULT_T_MAX }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McsmConfig {
    pub weights: LossWeights,
    pub tau: TauPolicy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStrategy {
    Greedy,
    Beam,
    Nucleus,
    Template,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RealizerConfig {
    pub strategy: DecodeStrategy,
    pub beam: BeamOptions,
    pub nucleus: NucleusOptions,
    pub external: ExternalConfig,
    pub noise: NoiseRates,
    pub blinding: BlindSchedule,
    pub vocab_cap: usize,
    pub max_sentence_len: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for RealizerConfig {
    fn default() -> Self {
        RealizerConfig {
            strategy: DecodeStrategy::Beam,
            beam: BeamOptions::default(),
            nucleus: NucleusOptions::default(),
            external: ExternalConfig::default(),
            noise: NoiseRates::default(),
            blinding: BlindSchedule::default(),
            vocab_cap: 5000,
            max_sentence_len: 30,
            epochs: 20,
            lr: 1e-3,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override. Values parse as TOML, falling back
/// to a plain string.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let (last, path) = parts.split_last().expect("non-empty");
    let mut table = root;
    for p in path {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{p}` is not a section")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` when given, otherwise starts from defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => read_text(p)?,
            None => String::new(),
        };
        RunConfig::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if self.graph.k == 0 {
            return fail("graph.k", "must be at least 1");
        }
        if self.model.emb_dim == 0 || self.model.hidden_dim == 0 {
            return fail("model", "dimensions must be positive");
        }
        if self.model.heads == 0 || self.model.emb_dim % self.model.heads != 0 {
            return fail("model.heads", "must divide model.emb_dim");
        }
        for (name, t) in self.train.all() {
            if t.lr <= 0.0 || !t.lr.is_finite() {
                return fail(&format!("{name}.lr"), "must be positive");
            }
            if t.batch_size == 0 {
                return fail(&format!("{name}.batch_size"), "must be at least 1");
            }
        }
        if self.realizer.lr <= 0.0 {
            return fail("realizer.lr", "must be positive");
        }
        let tau = &self.mcsm.tau;
        if !(tau.floor > 0.0 && tau.floor <= tau.start && tau.start < 1.0 && tau.step > 0.0) {
            return fail("mcsm.tau", "need 0 < floor <= start < 1 and step > 0");
        }
        if tau.min_size > tau.max_size {
            return fail("mcsm.tau.min_size", "exceeds max_size");
        }
        let r = &self.realizer;
        for (name, v) in [("realizer.noise.mask", r.noise.mask), ("realizer.noise.replace", r.noise.replace)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(name, "must lie in [0, 1]");
            }
        }
        if r.nucleus.temperature <= 0.0 {
            return fail("realizer.nucleus.temperature", "must be positive");
        }
        if !(r.nucleus.p > 0.0 && r.nucleus.p <= 1.0) {
            return fail("realizer.nucleus.p", "must lie in (0, 1]");
        }
        if r.beam.width == 0 {
            return fail("realizer.beam.width", "must be at least 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), cfg);
        assert_eq!(cfg.train.mcsm.lr, 4e-4);
        assert_eq!(cfg.mcsm.tau.start, 0.3);
        assert_eq!((cfg.realizer.noise.mask, cfg.realizer.noise.replace), (0.3, 0.2));
        assert_eq!((cfg.realizer.nucleus.temperature, cfg.realizer.nucleus.p), (0.9, 0.9));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[train.ssm]\nepoch = 3\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("epoch")), "{err}");
        let err = RunConfig::from_toml("", &["mcsm.tau.strat=0.2".into()]).unwrap_err();
        assert!(err.to_string().contains("strat"));
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_toml(
            "[train.ssm]\nepochs = 3\n",
            &[
                "train.ssm.epochs=7".into(),
                "mcsm.tau.start=0.25".into(),
                "realizer.strategy=template".into(),
                "paths.output=/tmp/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.ssm.epochs, 7);
        assert_eq!(cfg.train.mcsm.epochs, 20);
        assert_eq!(cfg.mcsm.tau.start, 0.25);
        assert_eq!(cfg.realizer.strategy, DecodeStrategy::Template);
        assert_eq!(cfg.paths.output, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = RunConfig::from_toml("", &["realizer.nucleus.p=1.5".into()]).unwrap_err();
        assert!(err.to_string().contains("realizer.nucleus.p"));
        assert_eq!(err.exit_code(), 1);
        assert!(RunConfig::from_toml("", &["nonsense".into()]).is_err());
    }
}
