//! The action-perception loop: replay, action selection, learning and
//! metric logging.

mod eval;
mod learn;
mod metrics;
mod run;

pub use eval::{evaluate, EvalPolicy, EvalSummary};
pub use learn::{fit_critic, Agent, CriticBatch, LearnStats};
pub use metrics::{MetricsWriter, RunMetrics, METRICS_HEADER};
pub use run::{build_agent, run_training, RunOutcome, RunPaths};

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;
use crate::distributions::precision_softmax;
use crate::env::{EnvError, Observation, NUM_ACTIONS};
use crate::nets::checkpoint::CheckpointError;
use crate::nets::{AgentKind, AgentNetworks};
use crate::objectives::{ObjectiveError, Polarity};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl AgentError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        AgentError::Io {
            context: context.into(),
            source,
        }
    }

    /// True for failures that mark a run as crashed rather than aborting it.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            AgentError::Autodiff(AutodiffError::NumericInstability { .. } | AutodiffError::NonFiniteGradient(_))
        ) || matches!(self, AgentError::Objective(ObjectiveError::Distribution(_)))
    }
}

/// `(o_t, a_t, o_{t+1}, r_{t+1}, done)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub obs: Observation,
    pub action: usize,
    pub next_obs: Observation,
    pub reward: f64,
    pub done: bool,
}

/// FIFO ring of experiences with uniform sampling (with replacement).
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Experience>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Experience> {
        self.items.get(i)
    }

    pub fn push(&mut self, exp: Experience) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(exp);
    }

    pub fn sample_indices(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..batch_size).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<&Experience> {
        self.sample_indices(batch_size, rng)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

/// Appends `exp`, then samples a batch once the buffer holds at least
/// `warmup` experiences (an empty batch before that).
pub fn push_and_sample<'a>(
    buffer: &'a mut ReplayBuffer,
    exp: Experience,
    batch_size: usize,
    warmup: usize,
    rng: &mut impl Rng,
) -> Vec<&'a Experience> {
    buffer.push(exp);
    if buffer.len() < warmup.max(1) {
        return Vec::new();
    }
    buffer.sample(batch_size, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    Best,
    Softmax,
    EpsilonGreedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub strategy: StrategyKind,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Decay constant in iterations.
    pub epsilon_decay: f64,
    /// Softmax precision over critic or Q values.
    pub zeta: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Random,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 5000.0,
            zeta: 1.0,
        }
    }
}

impl SelectionConfig {
    /// `ε(i) = ε_end + (ε_start − ε_end)·exp(−i/decay)`.
    pub fn epsilon(&self, iteration: u64) -> f64 {
        match self.strategy {
            StrategyKind::Random => 1.0,
            StrategyKind::EpsilonGreedy => {
                self.epsilon_end
                    + (self.epsilon_start - self.epsilon_end) * (-(iteration as f64) / self.epsilon_decay).exp()
            }
            StrategyKind::Best | StrategyKind::Softmax => 0.0,
        }
    }

    pub fn validate(&self, kind: AgentKind) -> Result<(), String> {
        if !(0.0 <= self.epsilon_end && self.epsilon_end <= self.epsilon_start && self.epsilon_start <= 1.0) {
            return Err(format!(
                "need 0 <= epsilon_end <= epsilon_start <= 1, got {} and {}",
                self.epsilon_end, self.epsilon_start
            ));
        }
        if !(self.epsilon_decay > 0.0) {
            return Err("epsilon_decay must be positive".into());
        }
        if !(self.zeta >= 0.0) {
            return Err("zeta must be non-negative".into());
        }
        if matches!(kind, AgentKind::Vae | AgentKind::Hmm) && self.strategy != StrategyKind::Random {
            return Err(format!(
                "a {} agent has no critic or policy; only the random strategy is available",
                kind.as_str()
            ));
        }
        Ok(())
    }
}

/// Outcome of one action choice.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub action: usize,
    /// Chosen uniformly at random (strategy or ε branch).
    pub explored: bool,
    pub epsilon: f64,
    /// Critic G-values at the encoder mean, when the agent has a critic.
    pub critic: Option<Vec<f64>>,
}

fn best_action(
    nets: &AgentNetworks,
    obs: &Observation,
    state: Option<&[f64]>,
    critic: Option<&[f64]>,
    polarity: Polarity,
) -> Result<usize, AgentError> {
    Ok(match nets.kind {
        AgentKind::Chmm => polarity.best(critic.expect("critic values computed")),
        AgentKind::Dai => nets.policy_distribution(state.expect("state computed"))?.argmax(),
        AgentKind::Dqn => Polarity::Max.best(&nets.q_values(obs)?),
        kind => {
            return Err(AgentError::Config(format!(
                "{} agents cannot pick a best action",
                kind.as_str()
            )))
        }
    })
}

/// Chooses `a_t` for observation `o_t` at training iteration `iteration`.
/// Latent-state agents act on the encoder mean.
pub fn select_action(
    cfg: &SelectionConfig,
    nets: &AgentNetworks,
    obs: &Observation,
    iteration: u64,
    polarity: Polarity,
    rng: &mut impl Rng,
) -> Result<Selection, AgentError> {
    let kind = nets.kind;
    if matches!(kind, AgentKind::Vae | AgentKind::Hmm) && cfg.strategy != StrategyKind::Random {
        return Err(AgentError::Config(format!(
            "strategy {:?} needs a critic or policy network, which a {} agent lacks",
            cfg.strategy,
            kind.as_str()
        )));
    }
    let state = if kind.has_critic() {
        Some(nets.encode(obs)?.mean().to_vec())
    } else {
        None
    };
    let critic = match &state {
        Some(s) => Some(nets.critic_values(s)?),
        None => None,
    };
    let epsilon = cfg.epsilon(iteration);
    let random = |rng: &mut _| Selection {
        action: Rng::random_range(rng, 0..NUM_ACTIONS),
        explored: true,
        epsilon,
        critic: critic.clone(),
    };
    let greedy = |action| Selection {
        action,
        explored: false,
        epsilon,
        critic: critic.clone(),
    };
    Ok(match cfg.strategy {
        StrategyKind::Random => random(rng),
        StrategyKind::EpsilonGreedy if rng.random_bool(epsilon.clamp(0.0, 1.0)) => random(rng),
        StrategyKind::Best | StrategyKind::EpsilonGreedy => {
            greedy(best_action(nets, obs, state.as_deref(), critic.as_deref(), polarity)?)
        }
        StrategyKind::Softmax => {
            let dist = match kind {
                AgentKind::Chmm => precision_softmax(
                    critic.as_deref().expect("critic values computed"),
                    cfg.zeta,
                    polarity == Polarity::Min,
                ),
                AgentKind::Dai => nets.policy_distribution(state.as_deref().expect("state computed"))?,
                _ => precision_softmax(&nets.q_values(obs)?, cfg.zeta, false),
            };
            greedy(dist.sample(rng))
        }
    })
}
