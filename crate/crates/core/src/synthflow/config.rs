use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::growprune::GrowPruneConfig;
use crate::hlstm::{BridgingMode, ModelSpec, SplitRatios, TrainConfig};
use crate::latlab::{parse_grid, LhpRule, MeasureConfig, SyntheticCurveSpec, MIN_RUNS};
use crate::numkit::Activation;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training text; relative paths resolve against the config file.
    pub corpus: PathBuf,
    #[serde(default = "default_max_vocab")]
    pub max_vocab: usize,
    #[serde(default)]
    pub split: SplitRatios,
    /// Parallel streams used for validation.
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

fn default_max_vocab() -> usize {
    128
}

fn default_eval_batch() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_x: usize,
    pub d_s: usize,
    pub d_h: usize,
    #[serde(default = "one_u8")]
    pub hidden_depth: u8,
    #[serde(default = "one")]
    pub stack: usize,
    #[serde(default = "relu")]
    pub hidden_activation: Activation,
    #[serde(default)]
    pub dropout_h: f64,
}

fn one() -> usize {
    1
}

fn one_u8() -> u8 {
    1
}

fn relu() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Stacked plain LSTM layers in the dense reference model.
    pub stack: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    /// Training epochs in the weight-growth phase.
    pub wg_epochs: usize,
    /// Of those, how many end with a weight-growth step.
    pub wg_grow_epochs: usize,
    /// Prune/retrain iterations allowed in row/column pruning.
    pub rcp_max_iterations: usize,
    /// Retraining epochs after row/column growth.
    pub rcg_epochs: usize,
    /// Prune/retrain iterations allowed in weight pruning.
    pub wp_max_iterations: usize,
    #[serde(default)]
    pub bridging: BridgingMode,
    /// Grown row/column entries get `U(±jitter/√fan_in)` added to their
    /// gradient-derived start value; 0 disables.
    #[serde(default)]
    pub grow_jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatencyMode {
    /// Model latency from the profile table (deterministic).
    #[default]
    Virtual,
    /// Wall-clock timing of the model's unrolled forward pass.
    Native,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepBackend {
    #[default]
    Synthetic,
    Native,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// `start:stop:step`.
    pub grid: String,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub backend: SweepBackend,
    #[serde(default = "default_sweep_measure")]
    pub measure: MeasureConfig,
}

fn default_batch() -> usize {
    16
}

fn default_sweep_measure() -> MeasureConfig {
    MeasureConfig {
        warmup_runs: 1,
        measured_runs: MIN_RUNS,
    }
}

/// Where the hysteresis map comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProfileSource {
    File(PathBuf),
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyConfig {
    #[serde(default)]
    pub mode: LatencyMode,
    #[serde(default)]
    pub rule: LhpRule,
    /// Profile CSV to analyse; relative to the config file.
    #[serde(default)]
    pub profile: Option<PathBuf>,
    /// Sweep to run when no profile file is used.
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    /// Closed-form curve for the synthetic sweep backend.
    #[serde(default)]
    pub curve: Option<SyntheticCurveSpec>,
    /// Model-forward batch for latency rows.
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_model_measure")]
    pub measure: MeasureConfig,
}

fn default_seq_len() -> usize {
    64
}

fn default_model_measure() -> MeasureConfig {
    MeasureConfig {
        warmup_runs: 2,
        measured_runs: MIN_RUNS,
    }
}

/// Complete, versioned description of one synthesis run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub cpu_mode: bool,
    pub seed_sparsity: f64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub baseline: BaselineConfig,
    pub train: TrainConfig,
    pub growprune: GrowPruneConfig,
    pub phases: PhaseConfig,
    pub latency: LatencyConfig,
}

impl FlowConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let probe: toml::Table = toml::from_str(text)?;
        match probe.get("schema_version").and_then(toml::Value::as_integer) {
            Some(v) if v == SCHEMA_VERSION as i64 => {}
            Some(v) => {
                return Err(Error::Version {
                    found: u32::try_from(v).unwrap_or(u32::MAX),
                    expected: SCHEMA_VERSION,
                })
            }
            None => return Err(Error::config("missing integer `schema_version`")),
        }
        let mut cfg: Self = toml::from_str(text)?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if self.data.corpus.is_relative() {
            self.data.corpus = base.join(&self.data.corpus);
        }
        if let Some(p) = &mut self.latency.profile {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.seed_sparsity >= 0.0 && self.seed_sparsity < 1.0) {
            return Err(Error::config("seed_sparsity must lie in [0, 1)"));
        }
        let m = &self.model;
        if m.d_x == 0 || m.d_s == 0 || m.stack == 0 || (m.hidden_depth > 0 && m.d_h == 0) {
            return Err(Error::config("model dimensions and stack must be positive"));
        }
        if m.hidden_depth > 1 {
            return Err(Error::config("hidden_depth must be 0 or 1"));
        }
        if !(0.0..1.0).contains(&m.dropout_h) {
            return Err(Error::config("dropout_h must lie in [0, 1)"));
        }
        if self.baseline.stack == 0 {
            return Err(Error::config("baseline.stack must be at least 1"));
        }
        if self.data.max_vocab < 2 || self.data.eval_batch == 0 {
            return Err(Error::config("data.max_vocab ≥ 2 and data.eval_batch ≥ 1 required"));
        }
        self.train.validate()?;
        self.growprune.validate()?;
        let p = &self.phases;
        if p.wg_grow_epochs > p.wg_epochs {
            return Err(Error::config("phases.wg_grow_epochs cannot exceed phases.wg_epochs"));
        }
        if !(p.grow_jitter >= 0.0 && p.grow_jitter.is_finite()) {
            return Err(Error::config("phases.grow_jitter must be non-negative"));
        }
        if matches!(p.bridging, BridgingMode::Batches(0)) {
            return Err(Error::config("bridging batch count must be positive"));
        }
        let l = &self.latency;
        if l.batch == 0 || l.seq_len == 0 {
            return Err(Error::config("latency.batch and latency.seq_len must be positive"));
        }
        if l.measure.measured_runs < MIN_RUNS {
            return Err(Error::config(format!("latency.measure.measured_runs must be at least {MIN_RUNS}")));
        }
        if l.profile.is_some() && l.sweep.is_some() {
            return Err(Error::config("give either latency.profile or latency.sweep, not both"));
        }
        if let Some(s) = &l.sweep {
            parse_grid(&s.grid)?;
            if s.batch == 0 || s.measure.measured_runs < MIN_RUNS {
                return Err(Error::config("latency.sweep needs batch ≥ 1 and enough measured runs"));
            }
            if s.backend == SweepBackend::Synthetic && l.curve.is_none() {
                return Err(Error::config("a synthetic sweep needs a [latency.curve] table"));
            }
        }
        if let Some(c) = &l.curve {
            c.validate()?;
        }
        Ok(())
    }

    /// Configured profile source, if any.
    pub fn profile_source(&self) -> Option<ProfileSource> {
        if let Some(p) = &self.latency.profile {
            Some(ProfileSource::File(p.clone()))
        } else if self.latency.sweep.is_some() {
            Some(ProfileSource::Sweep)
        } else {
            None
        }
    }

    pub fn model_spec(&self, vocab: usize) -> ModelSpec {
        ModelSpec {
            vocab,
            d_x: self.model.d_x,
            d_s: self.model.d_s,
            d_h: self.model.d_h,
            hidden_depth: self.model.hidden_depth,
            stack: self.model.stack,
            hidden_activation: self.model.hidden_activation,
            dropout_h: self.model.dropout_h,
        }
    }

    /// Dense plain-LSTM reference with the same state width.
    pub fn baseline_spec(&self, vocab: usize) -> ModelSpec {
        ModelSpec {
            hidden_depth: 0,
            d_h: 0,
            stack: self.baseline.stack,
            dropout_h: 0.0,
            ..self.model_spec(vocab)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
seed = 1
seed_sparsity = 0.5

[data]
corpus = "text.txt"

[model]
d_x = 4
d_s = 8
d_h = 8

[baseline]
stack = 1
epochs = 1

[train]
lr = 1.0
lr_decay = 0.5
patience = 1
weight_decay = 0.0
batch = 2
seq_len = 4

[growprune]
g_w = 0.1
p_w = 0.7
p_r = 0.2
p_c = 0.2
g_r = 0.0
g_c = 0.0
halving_floor = 0.02
retrain_patience = 1
prune_input_columns = false

[phases]
wg_epochs = 1
wg_grow_epochs = 1
rcp_max_iterations = 1
rcg_epochs = 1
wp_max_iterations = 1

[latency]
"#;

    #[test]
    fn minimal_config_resolves_paths() {
        let cfg = FlowConfig::from_toml(MINIMAL, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.data.corpus, Path::new("/cfg/text.txt"));
        assert_eq!(cfg.profile_source(), None);
        assert_eq!(cfg.latency.rule, LhpRule::PrefixMin);
    }

    #[test]
    fn wrong_version_is_named() {
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 7");
        match FlowConfig::from_toml(&text, Path::new(".")) {
            Err(Error::Version { found, expected }) => assert_eq!((found, expected), (7, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(FlowConfig::from_toml(&MINIMAL.replace("seed = 1", "seed = 1\nbogus = 2"), Path::new(".")).is_err());
        let bad = MINIMAL.replace("seed_sparsity = 0.5", "seed_sparsity = 1.0");
        assert!(matches!(FlowConfig::from_toml(&bad, Path::new(".")), Err(Error::Config(_))));
        let sweep_without_curve = format!("{MINIMAL}\n[latency.sweep]\ngrid = \"1:8:1\"\n");
        assert!(FlowConfig::from_toml(&sweep_without_curve, Path::new(".")).is_err());
    }
}
