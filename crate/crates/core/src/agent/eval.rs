use rand::Rng;
use serde::Serialize;

use super::AgentError;
use crate::env::{Action, DSpritesEnv, EnvConfig, Observation, NUM_ACTIONS};
use crate::mcts::{plan, PlannerConfig};
use crate::nets::AgentNetworks;
use crate::objectives::Polarity;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_reward: f64,
    /// Population standard deviation over episodes.
    pub std_reward: f64,
    pub mean_length: f64,
    pub histogram: [u64; NUM_ACTIONS],
    pub planner: bool,
}

/// How evaluation picks actions.
#[derive(Clone, Debug)]
pub enum EvalPolicy {
    /// Critic argbest, Q argmax, or uniform when the agent has neither.
    Greedy(Polarity),
    /// MCTS over the learned transition and critic from the encoder mean.
    Planner(PlannerConfig),
}

fn choose(nets: &AgentNetworks, obs: &Observation, policy: &EvalPolicy, rng: &mut impl Rng) -> Result<usize, AgentError> {
    match policy {
        EvalPolicy::Greedy(polarity) => {
            if nets.kind.has_critic() {
                let s = nets.encode(obs)?.mean().to_vec();
                Ok(polarity.best(&nets.critic_values(&s)?))
            } else if nets.q_net.is_some() {
                Ok(crate::distributions::argmax(&nets.q_values(obs)?))
            } else {
                Ok(rng.random_range(0..NUM_ACTIONS))
            }
        }
        EvalPolicy::Planner(cfg) => {
            let s = nets.encode(obs)?.mean().to_vec();
            let result = plan(&s, cfg, nets, rng).map_err(|e| AgentError::Config(e.to_string()))?;
            Ok(result.best_action())
        }
    }
}

/// Plays `episodes` fresh episodes without learning.
pub fn evaluate(
    nets: &AgentNetworks,
    env: &EnvConfig,
    episodes: usize,
    policy: &EvalPolicy,
    rng: &mut impl Rng,
) -> Result<EvalSummary, AgentError> {
    if episodes == 0 {
        return Err(AgentError::Config("need at least one episode".into()));
    }
    if matches!(policy, EvalPolicy::Planner(_)) && !(nets.kind.has_transition() && nets.kind.has_critic()) {
        return Err(AgentError::Config(format!(
            "planning needs a transition and a critic network; a {} agent lacks them",
            nets.kind.as_str()
        )));
    }
    let mut env = DSpritesEnv::new(env.clone())?;
    let mut rewards = Vec::with_capacity(episodes);
    let mut lengths = 0u64;
    let mut histogram = [0u64; NUM_ACTIONS];
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        let mut total = 0.0;
        loop {
            let a = choose(nets, &obs, policy, rng)?;
            histogram[a] += 1;
            lengths += 1;
            let step = env.step(Action::from_index(a).expect("action in range"))?;
            total += step.reward;
            if step.done {
                break;
            }
            obs = step.observation;
        }
        rewards.push(total);
    }
    let n = episodes as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(EvalSummary {
        episodes,
        mean_reward: mean,
        std_reward: var.sqrt(),
        mean_length: lengths as f64 / n,
        histogram,
        planner: matches!(policy, EvalPolicy::Planner(_)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{AgentKind, NetworksConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env() -> EnvConfig {
        EnvConfig {
            resolution: 8,
            ..EnvConfig::default()
        }
    }

    fn nets(kind: AgentKind) -> AgentNetworks {
        let cfg = NetworksConfig {
            latent_dim: 4,
            encoder: vec![16],
            decoder: vec![16],
            transition: vec![16],
            critic: vec![16],
            policy: vec![16],
            q_net: vec![16],
            ..NetworksConfig::default()
        };
        let e = env();
        AgentNetworks::new(kind, &cfg, e.obs_dim(), e.frame_dim(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn random_policy_loses_on_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = evaluate(&nets(AgentKind::Vae), &env(), 400, &EvalPolicy::Greedy(Polarity::Min), &mut rng).unwrap();
        assert!(s.mean_reward < 0.0, "{s:?}");
        assert_eq!(s.histogram.iter().sum::<u64>() as f64, s.mean_length * 400.0);
    }

    #[test]
    fn zero_episodes_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = evaluate(&nets(AgentKind::Chmm), &env(), 0, &EvalPolicy::Greedy(Polarity::Min), &mut rng);
        assert!(matches!(r, Err(AgentError::Config(_))));
    }

    #[test]
    fn planner_needs_a_world_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EvalPolicy::Planner(PlannerConfig::default());
        assert!(evaluate(&nets(AgentKind::Dqn), &env(), 1, &p, &mut rng).is_err());
        let s = evaluate(&nets(AgentKind::Chmm), &env(), 2, &p, &mut rng).unwrap();
        assert!(s.planner);
        assert_eq!(s.episodes, 2);
    }

    #[test]
    fn greedy_critic_is_deterministic() {
        let n = nets(AgentKind::Chmm);
        let p = EvalPolicy::Greedy(Polarity::Min);
        let a = evaluate(&n, &env(), 5, &p, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = evaluate(&n, &env(), 5, &p, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }
}
