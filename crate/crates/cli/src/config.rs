//! Experiment configuration.
//!
//! Every section and field is optional; missing values take the defaults
//! below. A run echoes the fully resolved configuration into its output
//! directory so it can be replayed exactly.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use scaleladder::data::DatasetMode;
use scaleladder::ladder::TargetKind;
use scaleladder::model::EtaRule;
use scaleladder::risk::{Method, DEFAULT_PANELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub ladder: LadderConfig,
    pub law: LawConfig,
    /// Closed-form diffeomorphism that labels data in `tanh-target` mode and
    /// fixes the constants `M1`, `M2` used for the level budgets.
    pub target: TargetKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub out: OutConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            ladder: LadderConfig::default(),
            law: LawConfig::default(),
            target: TargetKind::Tanh,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            out: OutConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderConfig {
    pub epsilon: f64,
    pub beta: f64,
    pub d: usize,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0 / 32.0,
            beta: 2.0,
            d: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LawConfig {
    pub alpha: f64,
}

impl Default for LawConfig {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

/// One value for every level or one per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerLevel<T> {
    All(T),
    Each(Vec<T>),
}

impl<T: Clone> PerLevel<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            PerLevel::All(v) => vec![v.clone()],
            PerLevel::Each(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaConfig {
    Fixed(PerLevel<f64>),
    Auto { max_set_size: u64 },
}

impl EtaConfig {
    pub fn rule(&self) -> EtaRule {
        match self {
            EtaConfig::Fixed(v) => EtaRule::Fixed(v.to_vec()),
            EtaConfig::Auto { max_set_size } => EtaRule::MaxSetSize {
                max_set_size: u128::from(*max_set_size),
            },
        }
    }
}

/// Slope of the base map: a number, or `"f-prime-0"` for the target's
/// derivative at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaseSlope {
    Value(f64),
    Named(String),
}

pub const F_PRIME_0: &str = "f-prime-0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherKind {
    /// Uniform draw from each level's weight set.
    Random,
    /// Discretized Riemann network of the target's rung residuals.
    Riemann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub tau: PerLevel<usize>,
    pub eta: EtaConfig,
    pub base_slope: BaseSlope,
    pub mode: DatasetMode,
    pub teacher: TeacherKind,
    pub enumeration_cap: u128,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tau: PerLevel::All(2),
            eta: EtaConfig::Auto { max_set_size: 200 },
            base_slope: BaseSlope::Named(F_PRIME_0.into()),
            mode: DatasetMode::TanhTarget,
            teacher: TeacherKind::Random,
            enumeration_cap: scaleladder::model::DEFAULT_ENUMERATION_CAP,
        }
    }
}

/// Temperatures: the default schedule, or explicit per-level `lambda_bar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaConfig {
    Named(String),
    LambdaBar(Vec<f64>),
}

pub const COROLLARY_SCHEDULE: &str = "corollary2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n: usize,
    pub seed: u64,
    pub lambda: LambdaConfig,
    pub stop_after: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n: 200,
            seed: 0,
            lambda: LambdaConfig::Named(COROLLARY_SCHEDULE.into()),
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Quadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub method: MethodKind,
    pub panels: usize,
    pub n_mc: usize,
    /// Training repetitions in the `bounds` verification suite.
    pub trials: usize,
    /// Slack of the power-law comparison; by default the summed
    /// approximation bound in target mode and zero in planted mode.
    pub slack: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            method: MethodKind::Quadrature,
            panels: DEFAULT_PANELS,
            n_mc: 100_000,
            trials: 10,
            slack: None,
        }
    }
}

impl EvalConfig {
    pub fn method(&self, seed: u64) -> Method {
        match self.method {
            MethodKind::Quadrature => Method::Quadrature { panels: self.panels },
            MethodKind::MonteCarlo => Method::MonteCarlo { n_mc: self.n_mc, seed },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutConfig {
    pub directory: PathBuf,
}

impl Default for OutConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("runs/default"),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub stop_after: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &overrides.out {
            config.out.directory = out.clone();
        }
        if let Some(seed) = overrides.seed {
            config.train.seed = seed;
        }
        if overrides.stop_after.is_some() {
            config.train.stop_after = overrides.stop_after;
        }
        config.validate()?;
        Ok(config)
    }

    /// Checks the parts serde cannot.
    pub fn validate(&self) -> anyhow::Result<()> {
        if let BaseSlope::Named(name) = &self.model.base_slope {
            if name != F_PRIME_0 {
                bail!("model.base_slope must be a number or \"{F_PRIME_0}\", got \"{name}\"");
            }
        }
        if let LambdaConfig::Named(name) = &self.train.lambda {
            if name != COROLLARY_SCHEDULE {
                bail!("train.lambda must be \"{COROLLARY_SCHEDULE}\" or a list of per-level values, got \"{name}\"");
            }
        }
        if self.train.n == 0 {
            bail!("train.n must be positive");
        }
        if self.train.stop_after == Some(0) {
            bail!("stop_after must be at least 1");
        }
        if self.eval.trials == 0 {
            bail!("eval.trials must be positive");
        }
        Ok(())
    }
}
