//! Run configuration: one TOML document per training run.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agent::{SelectionConfig, StrategyKind};
use crate::env::{EnvConfig, NUM_ACTIONS};
use crate::mcts::PlannerConfig;
use crate::nets::{AgentKind, NetworksConfig};
use crate::objectives::{EfeKind, ObjectiveConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Transitions stored before learning starts.
    pub warmup: usize,
    /// Learning steps between target-network copies.
    pub target_sync: u64,
    pub lr: f64,
    pub seed: u64,
    /// Iterations per metrics row.
    pub log_every: u64,
    /// Iterations per checkpoint; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Corrupts the weights at this iteration. For exercising crash handling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault_at: Option<u64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 50_000,
            batch_size: 32,
            buffer_capacity: 50_000,
            warmup: 1000,
            target_sync: 100,
            lr: 1e-3,
            seed: 0,
            log_every: 100,
            checkpoint_every: 10_000,
            fault_at: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub agent: AgentKind,
    /// Where `train` writes when no directory is given on the command line.
    pub output_dir: Option<String>,
    pub env: EnvConfig,
    pub networks: NetworksConfig,
    pub objective: ObjectiveConfig,
    pub selection: SelectionConfig,
    pub training: TrainingConfig,
    pub planner: PlannerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            agent: AgentKind::Chmm,
            output_dir: None,
            env: EnvConfig::default(),
            networks: NetworksConfig::default(),
            objective: ObjectiveConfig::default(),
            selection: SelectionConfig::default(),
            training: TrainingConfig::default(),
            planner: PlannerConfig::default(),
        }
    }
}

/// A configuration problem, with the 1-based source line when known.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    /// Dotted path of the offending key, e.g. `training.batch_size`.
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.line, &self.key) {
            (Some(l), Some(k)) => write!(f, "line {l}: {k}: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            (None, Some(k)) => write!(f, "{k}: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line: None,
        key: Some(key.to_string()),
        message: message.into(),
    }
}

/// 1-based line defining `section.key` (or the section header, or a
/// top-level key) in `text`.
fn locate(text: &str, path: &str) -> Option<usize> {
    let (section, key) = match path.split_once('.') {
        Some((s, k)) => (Some(s), Some(k)),
        None if text.lines().any(|l| l.trim() == format!("[{path}]")) => (Some(path), None),
        None => (None, Some(path)),
    };
    let mut current: Option<String> = None;
    let mut header_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(name.trim().to_string());
            if section == Some(name.trim()) {
                header_line = Some(i + 1);
            }
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim();
        let matches = match section {
            Some(s) => (current.as_deref() == Some(s) && Some(k) == key) || k == path,
            None => current.is_none() && Some(k) == key,
        };
        if matches {
            return Some(i + 1);
        }
    }
    header_line
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            ConfigError {
                line,
                key: None,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate().map_err(|mut e| {
            e.line = e.key.as_deref().and_then(|k| locate(text, k));
            e
        })?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks that the blocks agree with each other and with the agent kind.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.env.validate().map_err(|e| err("env", e.to_string()))?;
        self.objective.validate().map_err(|m| err("objective", m))?;
        self.selection.validate(self.agent).map_err(|m| err("selection.strategy", m))?;
        self.planner
            .validate(NUM_ACTIONS)
            .map_err(|e| err("planner", e.to_string()))?;
        let n = &self.networks;
        if n.latent_dim == 0 {
            return Err(err("networks.latent_dim", "must be positive"));
        }
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(err("training.batch_size", "must be positive"));
        }
        if t.buffer_capacity < t.batch_size {
            return Err(err(
                "training.buffer_capacity",
                format!("must hold at least one batch ({} < {})", t.buffer_capacity, t.batch_size),
            ));
        }
        if t.warmup > t.buffer_capacity {
            return Err(err("training.warmup", "cannot exceed buffer_capacity"));
        }
        if t.target_sync == 0 {
            return Err(err("training.target_sync", "must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(err("training.lr", format!("must be positive, got {}", t.lr)));
        }
        if t.log_every == 0 {
            return Err(err("training.log_every", "must be positive"));
        }
        if self.agent == AgentKind::Dqn && self.objective != ObjectiveConfig::default() {
            let o = &self.objective;
            // DQN reads gamma only.
            let only_gamma = ObjectiveConfig {
                gamma: o.gamma,
                ..ObjectiveConfig::default()
            };
            if *o != only_gamma {
                return Err(err("objective", "a dqn agent only reads objective.gamma"));
            }
        }
        Ok(())
    }
}

/// A named configuration shipped with the workbench.
#[derive(Clone, Debug)]
pub struct Preset {
    pub name: String,
    pub config: RunConfig,
}

fn efe_name(efe: EfeKind) -> &'static str {
    match efe {
        EfeKind::Principled => "g",
        EfeKind::G1 => "g1",
        EfeKind::G2 => "g2",
        EfeKind::G3 => "g3",
        EfeKind::G4 => "g4",
        EfeKind::Blend => "blend",
    }
}

fn strategy_name(s: StrategyKind) -> &'static str {
    match s {
        StrategyKind::Random => "random",
        StrategyKind::Best => "best",
        StrategyKind::Softmax => "softmax",
        StrategyKind::EpsilonGreedy => "egreedy",
    }
}

/// Blend fractions shipped as presets.
pub const BLEND_LAMBDAS: [f64; 5] = [0.01, 0.05, 0.15, 0.25, 0.5];

/// The full experiment grid: VAE, HMM and DQN with defaults; CHMM and DAI
/// with each estimator and selection strategy; CHMM ε-greedy blends.
pub fn presets() -> Vec<Preset> {
    let mut out = Vec::new();
    for kind in [AgentKind::Vae, AgentKind::Hmm, AgentKind::Dqn] {
        let mut config = RunConfig {
            agent: kind,
            ..RunConfig::default()
        };
        if kind == AgentKind::Dqn {
            config.selection.strategy = StrategyKind::EpsilonGreedy;
        }
        out.push(Preset {
            name: kind.as_str().to_string(),
            config,
        });
    }
    for kind in [AgentKind::Chmm, AgentKind::Dai] {
        for efe in [EfeKind::Principled, EfeKind::G1, EfeKind::G2, EfeKind::G3, EfeKind::G4] {
            for strategy in [StrategyKind::Best, StrategyKind::Softmax, StrategyKind::EpsilonGreedy] {
                let mut config = RunConfig {
                    agent: kind,
                    ..RunConfig::default()
                };
                config.objective.efe = efe;
                config.selection.strategy = strategy;
                out.push(Preset {
                    name: format!("{}-{}-{}", kind.as_str(), efe_name(efe), strategy_name(strategy)),
                    config,
                });
            }
        }
    }
    for lambda in BLEND_LAMBDAS {
        let mut config = RunConfig::default();
        config.objective.efe = EfeKind::Blend;
        config.objective.lambda = lambda;
        config.selection.strategy = StrategyKind::EpsilonGreedy;
        out.push(Preset {
            name: format!("chmm-blend{lambda}-egreedy"),
            config,
        });
    }
    out
}

pub fn preset(name: &str) -> Option<RunConfig> {
    presets().into_iter().find(|p| p.name == name).map(|p| p.config)
}
