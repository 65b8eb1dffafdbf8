//! Experiment configuration: a TOML document with one table per stage,
//! dotted-path overrides, validation and a stable content hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::EncoderConfig;
use crate::error::{Error, Result};
use crate::merge::{default_alpha_grid, MergeRule, MergeSpec};
use crate::probe::ProbeTarget;
use crate::synth::{AttributeSchema, Vocab, WorldConfig};
use crate::trainer::{PretrainConfig, TrainConfig, TrainMode};

/// Encoder sizes. Vocabulary size and visual input width follow from the
/// world schema and are filled in by [`EncoderSection::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub d_model: usize,
    pub n_blocks: usize,
    pub max_len: usize,
    pub rank: usize,
    pub lora_alpha: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self { d_model: e.d_model, n_blocks: e.n_blocks, max_len: e.max_len, rank: e.rank, lora_alpha: e.lora_alpha }
    }
}

impl EncoderSection {
    pub fn resolve(&self, schema: &AttributeSchema) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_blocks: self.n_blocks,
            max_len: self.max_len,
            d_visual_in: schema.feature_dim(),
            vocab_size: Vocab::from_schema(schema).len(),
            rank: self.rank,
            lora_alpha: self.lora_alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Mini-batches per probe run; must be even.
    pub batches: usize,
    /// Independently trained checkpoints to probe.
    pub seeds: usize,
    pub batch_size: usize,
    pub target: ProbeTarget,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { batches: 16, seeds: 5, batch_size: 64, target: ProbeTarget::Shared }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    /// Grid searched on the validation split for the coefficient merge.
    pub alpha_grid: Vec<f64>,
    /// Weight-space baselines merged alongside it.
    pub rules: Vec<MergeRule>,
    /// Transition weight used by the baselines.
    pub alpha: f64,
    pub ties_density: f64,
    pub dare_drop_p: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        let spec = MergeSpec::default();
        Self {
            alpha_grid: default_alpha_grid(),
            rules: vec![MergeRule::TaskArithmetic, MergeRule::Ties, MergeRule::Dare, MergeRule::DareTies],
            alpha: spec.alpha,
            ties_density: spec.ties_density,
            dare_drop_p: spec.dare_drop_p,
        }
    }
}

impl MergeConfig {
    pub fn spec(&self, rule: MergeRule, alpha: f64, seed: u64) -> MergeSpec {
        MergeSpec { rule, alpha, ties_density: self.ties_density, dare_drop_p: self.dare_drop_p, seed }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate only the first `max_queries` test queries; 0 keeps all.
    pub max_queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Transition weights tried with joint training.
    pub lambda_grid: Vec<f64>,
    /// Source-anchor mixing weights tried with decoupled training.
    pub omega_grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { lambda_grid: vec![0.5, 1.0, 2.0], omega_grid: vec![0.0, 0.25, 0.5] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Training modes run by the `train` stage.
    pub modes: Vec<TrainMode>,
    pub world: WorldConfig,
    pub encoder: EncoderSection,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub merge: MergeConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            modes: TrainMode::ALL.to_vec(),
            world: WorldConfig::default(),
            encoder: EncoderSection::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            merge: MergeConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::ConfigInvalid(msg.into())
}

/// Sets `path = value` inside `table`, creating intermediate tables. The
/// value is read as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(format!("override {assignment:?} is not of the form key.path=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(invalid(format!("override {assignment:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = keys.split_last().expect("nonempty path");
    let mut cur = table;
    for key in parents {
        let entry = cur.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| invalid(format!("override {assignment:?}: {key} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let schema = self.world.schema();
        schema.validate()?;
        if schema.cardinalities().iter().any(|&c| c < 2) {
            return Err(invalid("every attribute needs at least two values to be editable"));
        }
        let items = self.world.train_tuples + self.world.val_queries + self.world.test_queries;
        if items > schema.combinations() {
            return Err(invalid(format!("{items} distinct items requested but the schema only has {}", schema.combinations())));
        }
        if self.world.train_tuples == 0 || self.world.val_queries == 0 || self.world.test_queries == 0 {
            return Err(invalid("world tuple and query counts must be positive"));
        }
        if !(self.world.noise_sigma.is_finite() && self.world.noise_sigma >= 0.0) {
            return Err(invalid(format!("world.noise_sigma must be non-negative, got {}", self.world.noise_sigma)));
        }
        self.encoder.resolve(&schema).validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        if self.modes.is_empty() {
            return Err(invalid("modes must list at least one training mode"));
        }
        if self.probe.batches < 2 || self.probe.batches % 2 != 0 {
            return Err(invalid(format!("probe.batches must be even and at least 2, got {}", self.probe.batches)));
        }
        if self.probe.seeds < 2 {
            return Err(invalid(format!("probe.seeds must be at least 2, got {}", self.probe.seeds)));
        }
        if self.probe.batch_size < 2 {
            return Err(invalid(format!("probe.batch_size must be at least 2, got {}", self.probe.batch_size)));
        }
        if self.merge.alpha_grid.is_empty() {
            return Err(invalid("merge.alpha_grid must not be empty"));
        }
        for &a in &self.merge.alpha_grid {
            self.merge.spec(MergeRule::Lrdm, a, self.seed).validate()?;
        }
        for &rule in &self.merge.rules {
            self.merge.spec(rule, self.merge.alpha, self.seed).validate()?;
        }
        if let Some(&l) = self.sweep.lambda_grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(invalid(format!("sweep.lambda_grid entry {l} must be non-negative")));
        }
        if let Some(&w) = self.sweep.omega_grid.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(invalid(format!("sweep.omega_grid entry {w} outside [0, 1]")));
        }
        if self.ablate.seeds == 0 {
            return Err(invalid("ablate.seeds must be at least 1"));
        }
        Ok(())
    }

    /// Canonical TOML rendering of every setting except the output directory.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        toml::to_string(&c).expect("experiment config serializes")
    }

    /// SHA-256 of [`canonical`](Self::canonical), hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        self.encoder.resolve(&self.world.schema())
    }
}
