use rand::Rng;

use super::{AgentError, Experience, SelectionConfig};
use crate::autodiff::{Adam, Parameter, Tape, Tensor};
use crate::nets::{latest_frame_batch, obs_batch, AgentKind, AgentNetworks, Network, NetworksConfig};
use crate::objectives::{
    critic_target, dqn_target, efe_one_step, vfe_dai, vfe_hmm, vfe_vae, ObjectiveConfig, ObjectiveError, VfeBreakdown,
};

/// Losses produced by one learning iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LearnStats {
    pub vfe: Option<VfeBreakdown>,
    /// Smooth-L1 for critics, squared error for the DQN.
    pub critic_loss: Option<f64>,
}

/// One regression batch for a critic: `G(s_t, a_t) ← cost + γ·backup`.
#[derive(Clone, Debug)]
pub struct CriticBatch {
    pub states: Tensor,
    pub actions: Vec<usize>,
    pub costs: Vec<f64>,
    pub next_states: Tensor,
    pub done: Vec<bool>,
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor, crate::autodiff::AutodiffError> {
    let mut data = Vec::with_capacity(rows.len() * t.last_dim());
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::matrix(rows.len(), t.last_dim(), data)
}

fn target_rows(target: &Network, states: &Tensor, idx: &[usize]) -> Result<Vec<Vec<f64>>, ObjectiveError> {
    let values = target.eval(&select_rows(states, idx)?)?.remove(0);
    Ok((0..values.rows()).map(|r| values.row(r).to_vec()).collect())
}

fn step_network(adam: &Adam, net: &mut Network, grads: &crate::autodiff::Gradients) -> Result<(), AgentError> {
    for p in net.params_mut() {
        grads.accumulate_into(p);
    }
    adam.step(net.params_mut())?;
    Ok(())
}

/// One smooth-L1 step of `critic` toward Bellman targets bootstrapped from
/// `target`. Returns the batch-mean loss before the update.
pub fn fit_critic(
    critic: &mut Network,
    target: &Network,
    adam: &Adam,
    batch: &CriticBatch,
    objective: &ObjectiveConfig,
) -> Result<f64, AgentError> {
    let y = critic_target(&batch.costs, &batch.done, objective.gamma, objective.backup, |idx| {
        target_rows(target, &batch.next_states, idx)
    })?;
    let mut tape = Tape::new();
    let s = tape.constant(batch.states.clone());
    let g = critic.forward(&mut tape, s)?.heads[0];
    let pred = tape.gather(g, &batch.actions)?;
    let l = tape.smooth_l1(pred, &y, objective.sl1_beta)?;
    let loss = tape.mean(l);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    step_network(adam, critic, &grads)?;
    Ok(value)
}

/// Networks plus everything needed to act and learn.
#[derive(Clone, Debug)]
pub struct Agent {
    pub nets: AgentNetworks,
    pub objective: ObjectiveConfig,
    pub selection: SelectionConfig,
    pub adam: Adam,
    /// Target networks are synced every this many learning steps.
    pub target_sync: u64,
    learn_steps: u64,
}

impl Agent {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: AgentKind,
        networks: &NetworksConfig,
        obs_dim: usize,
        frame_dim: usize,
        objective: ObjectiveConfig,
        selection: SelectionConfig,
        adam: Adam,
        target_sync: u64,
        rng: &mut impl Rng,
    ) -> Result<Self, AgentError> {
        if target_sync == 0 {
            return Err(AgentError::Config("target sync period must be positive".into()));
        }
        Ok(Self {
            nets: AgentNetworks::new(kind, networks, obs_dim, frame_dim, rng)?,
            objective,
            selection,
            adam,
            target_sync,
            learn_steps: 0,
        })
    }

    pub fn kind(&self) -> AgentKind {
        self.nets.kind
    }

    pub fn learn_steps(&self) -> u64 {
        self.learn_steps
    }

    /// One learning iteration on `batch`.
    pub fn learn(&mut self, batch: &[&Experience], rng: &mut impl Rng) -> Result<LearnStats, AgentError> {
        if batch.is_empty() {
            return Err(AgentError::Config("learn step needs a non-empty batch".into()));
        }
        let stats = match self.kind() {
            AgentKind::Dqn => self.learn_dqn(batch)?,
            _ => self.learn_model(batch, rng)?,
        };
        self.learn_steps += 1;
        if self.learn_steps.is_multiple_of(self.target_sync) {
            self.nets.sync_targets()?;
        }
        Ok(stats)
    }

    fn learn_model(&mut self, batch: &[&Experience], rng: &mut impl Rng) -> Result<LearnStats, AgentError> {
        let kind = self.kind();
        let obs: Vec<_> = batch.iter().map(|e| e.obs.clone()).collect();
        let next: Vec<_> = batch.iter().map(|e| e.next_obs.clone()).collect();
        let actions: Vec<usize> = batch.iter().map(|e| e.action).collect();
        let next_t = obs_batch(&next)?;
        let next_frame = latest_frame_batch(&next)?;

        let mut tape = Tape::new();
        let terms = match kind {
            AgentKind::Vae => {
                let frame = latest_frame_batch(&obs)?;
                vfe_vae(&mut tape, &self.nets, &obs_batch(&obs)?, &frame, rng)?
            }
            AgentKind::Hmm | AgentKind::Chmm => {
                vfe_hmm(&mut tape, &self.nets, &obs_batch(&obs)?, &actions, &next_t, &next_frame, rng)?
            }
            AgentKind::Dai => vfe_dai(
                &mut tape,
                &self.nets,
                &obs_batch(&obs)?,
                &actions,
                &next_t,
                &next_frame,
                self.objective.zeta,
                rng,
            )?,
            AgentKind::Dqn => unreachable!("handled by learn_dqn"),
        };
        let breakdown = terms.breakdown(&tape);
        if !breakdown.total.is_finite() {
            return Err(crate::autodiff::AutodiffError::NumericInstability {
                node: terms.total.index(),
            }
            .into());
        }

        // Critic regression data is read off the same forward pass. The
        // critic sees posterior means, as at action time: regressing on
        // samples lets the min in the bootstrap feed on input noise.
        let critic_batch = if kind.has_critic() {
            let prior = terms.prior.expect("transition agents have a prior");
            let variant = self.objective.variant();
            let costs = batch
                .iter()
                .enumerate()
                .map(|(r, e)| {
                    efe_one_step(
                        variant,
                        self.objective.psi,
                        &prior.row(&tape, r),
                        &terms.posterior.row(&tape, r),
                        e.reward,
                    )
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(ObjectiveError::from)?;
            Some(CriticBatch {
                states: tape.value(terms.prev_posterior.expect("transition agents encode o_t").mean).clone(),
                actions: actions.clone(),
                costs,
                next_states: tape.value(terms.posterior.mean).clone(),
                done: batch.iter().map(|e| e.done).collect(),
            })
        } else {
            None
        };

        let grads = tape.backward(terms.total)?;
        let nets = &mut self.nets;
        for net in [&mut nets.encoder, &mut nets.decoder, &mut nets.transition, &mut nets.policy]
            .into_iter()
            .flatten()
        {
            step_network(&self.adam, net, &grads)?;
        }

        let critic_loss = match critic_batch {
            Some(cb) => {
                let target = nets.target_critic.as_ref().expect("critic agents have a target");
                let critic = nets.critic.as_mut().expect("critic agents have a critic");
                Some(fit_critic(critic, target, &self.adam, &cb, &self.objective)?)
            }
            None => None,
        };
        Ok(LearnStats {
            vfe: Some(breakdown),
            critic_loss,
        })
    }

    fn learn_dqn(&mut self, batch: &[&Experience]) -> Result<LearnStats, AgentError> {
        let obs: Vec<_> = batch.iter().map(|e| e.obs.clone()).collect();
        let next: Vec<_> = batch.iter().map(|e| e.next_obs.clone()).collect();
        let actions: Vec<usize> = batch.iter().map(|e| e.action).collect();
        let next_q = self.nets.target_q()?.eval(&obs_batch(&next)?)?.remove(0);
        let y: Vec<f64> = batch
            .iter()
            .enumerate()
            .map(|(r, e)| dqn_target(e.reward, Some(next_q.row(r)), self.objective.gamma, e.done))
            .collect();

        let q_net = self.nets.q_net.as_mut().expect("dqn agents have a q-network");
        let mut tape = Tape::new();
        let x = tape.constant(obs_batch(&obs)?);
        let q = q_net.forward(&mut tape, x)?.heads[0];
        let pred = tape.gather(q, &actions)?;
        let target = tape.constant(Tensor::vector(y));
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff);
        let loss = tape.mean(sq);
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        step_network(&self.adam, q_net, &grads)?;
        Ok(LearnStats {
            vfe: None,
            critic_loss: Some(value),
        })
    }

    /// Overwrites one weight with NaN. Used to exercise crash handling.
    pub fn poison(&mut self) {
        if let Some(p) = self.nets.trainable_params_mut().next() {
            poison_param(p);
        }
    }
}

fn poison_param(p: &mut Parameter) {
    if let Some(v) = p.value_mut().data_mut().first_mut() {
        *v = f64::NAN;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::env::{DSpritesEnv, EnvConfig, Observation};
    use crate::nets::{HeadSpec, NetworkSpec};
    use crate::objectives::EfeKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetworksConfig {
        NetworksConfig {
            encoder: vec![16],
            decoder: vec![16],
            transition: vec![16],
            critic: vec![16],
            policy: vec![16],
            q_net: vec![16],
            ..NetworksConfig::default()
        }
    }

    fn agent(kind: AgentKind, seed: u64) -> Agent {
        Agent::new(
            kind,
            &small(),
            192,
            64,
            ObjectiveConfig {
                efe: EfeKind::G4,
                ..ObjectiveConfig::default()
            },
            SelectionConfig::default(),
            Adam::with_lr(1e-3),
            3,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn experiences(n: usize) -> Vec<Experience> {
        let mut env = DSpritesEnv::new(EnvConfig {
            resolution: 8,
            ..EnvConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut o: Observation = env.reset(&mut rng);
        let mut out = Vec::new();
        for i in 0..n {
            let a = i % 4;
            let step = env.step(crate::env::Action::from_index(a).unwrap()).unwrap();
            out.push(Experience {
                obs: o.clone(),
                action: a,
                next_obs: step.observation.clone(),
                reward: step.reward,
                done: step.done,
            });
            o = if step.done { env.reset(&mut rng) } else { step.observation };
        }
        out
    }

    #[test]
    fn every_kind_learns_without_error() {
        let data = experiences(12);
        let batch: Vec<&Experience> = data.iter().collect();
        for kind in [AgentKind::Vae, AgentKind::Hmm, AgentKind::Chmm, AgentKind::Dai, AgentKind::Dqn] {
            let mut a = agent(kind, 0);
            let stats = a.learn(&batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(stats.vfe.is_some(), kind != AgentKind::Dqn);
            assert_eq!(stats.critic_loss.is_some(), kind.has_critic() || kind == AgentKind::Dqn);
            if let Some(v) = stats.vfe {
                assert!((v.total - v.complexity - v.accuracy - v.action_kl).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn vae_learning_leaves_no_critic() {
        let data = experiences(4);
        let batch: Vec<&Experience> = data.iter().collect();
        let mut a = agent(AgentKind::Vae, 0);
        a.learn(&batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(a.nets.critic.is_none() && a.nets.target_critic.is_none());
    }

    #[test]
    fn identical_seeds_give_identical_losses() {
        let data = experiences(16);
        let batch: Vec<&Experience> = data.iter().collect();
        let run = || {
            let mut a = agent(AgentKind::Dai, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..3).map(|_| a.learn(&batch, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn targets_follow_the_sync_period() {
        let data = experiences(8);
        let batch: Vec<&Experience> = data.iter().collect();
        let mut a = agent(AgentKind::Chmm, 2);
        let probe = Tensor::matrix(1, 10, vec![0.1; 10]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for step in 1..=6u64 {
            a.learn(&batch, &mut rng).unwrap();
            let same = a.nets.critic_batch(&probe).unwrap() == a.nets.target_critic_batch(&probe).unwrap();
            assert_eq!(same, step % 3 == 0, "step {step}");
        }
    }

    #[test]
    fn poisoned_weights_surface_as_numeric_errors() {
        let data = experiences(4);
        let batch: Vec<&Experience> = data.iter().collect();
        for kind in [AgentKind::Chmm, AgentKind::Dqn] {
            let mut a = agent(kind, 0);
            a.poison();
            let err = a.learn(&batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
            assert!(err.is_numeric(), "{err}");
        }
    }

    #[test]
    fn fit_critic_moves_toward_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = NetworkSpec {
            input_dim: 2,
            hidden_dims: vec![8],
            hidden_activation: Activation::Relu,
            heads: vec![HeadSpec {
                name: "g_values".into(),
                dim: 2,
                activation: Activation::Identity,
            }],
        };
        let mut critic = Network::new("critic", spec, 1.0, &mut rng).unwrap();
        let target = critic.renamed("target", &mut rng).unwrap();
        let batch = CriticBatch {
            states: Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            actions: vec![0],
            costs: vec![2.0],
            next_states: Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            done: vec![true],
        };
        let adam = Adam::with_lr(1e-2);
        let obj = ObjectiveConfig::default();
        let first = fit_critic(&mut critic, &target, &adam, &batch, &obj).unwrap();
        let mut last = first;
        for _ in 0..300 {
            last = fit_critic(&mut critic, &target, &adam, &batch, &obj).unwrap();
        }
        assert!(last < first * 0.01, "{first} -> {last}");
    }
}
