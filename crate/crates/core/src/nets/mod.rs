//! The network roles: encoder, decoder, transition, critic, policy and the
//! DQN value network, plus target copies and checkpoint I/O.

pub mod checkpoint;
mod network;

pub use network::{Dense, Forward, HeadSpec, Network, NetworkSpec};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, AutodiffError, Parameter, Tape, Tensor, Var};
use crate::distributions::graph::GaussianNode;
use crate::distributions::{
    precision_softmax, BernoulliFactors, CategoricalDist, DiagGaussian, LOG_VAR_MAX, LOG_VAR_MIN,
};
use crate::env::{Observation, NUM_ACTIONS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vae,
    Hmm,
    Chmm,
    Dai,
    Dqn,
}

impl AgentKind {
    pub fn has_encoder(self) -> bool {
        !matches!(self, AgentKind::Dqn)
    }

    pub fn has_transition(self) -> bool {
        matches!(self, AgentKind::Hmm | AgentKind::Chmm | AgentKind::Dai)
    }

    pub fn has_critic(self) -> bool {
        matches!(self, AgentKind::Chmm | AgentKind::Dai)
    }

    pub fn has_policy(self) -> bool {
        matches!(self, AgentKind::Dai)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Vae => "vae",
            AgentKind::Hmm => "hmm",
            AgentKind::Chmm => "chmm",
            AgentKind::Dai => "dai",
            AgentKind::Dqn => "dqn",
        }
    }
}

/// Layer widths per role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworksConfig {
    pub latent_dim: usize,
    pub activation: Activation,
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
    pub transition: Vec<usize>,
    pub critic: Vec<usize>,
    pub policy: Vec<usize>,
    pub q_net: Vec<usize>,
}

impl Default for NetworksConfig {
    fn default() -> Self {
        Self {
            latent_dim: 10,
            activation: Activation::Relu,
            encoder: vec![256, 256],
            decoder: vec![256, 256],
            transition: vec![512, 512],
            critic: vec![128, 128],
            policy: vec![128, 128],
            q_net: vec![256, 256],
        }
    }
}

fn head(name: &str, dim: usize, activation: Activation) -> HeadSpec {
    HeadSpec {
        name: name.into(),
        dim,
        activation,
    }
}

/// Every network an agent of a given kind needs, and nothing else.
#[derive(Clone, Debug)]
pub struct AgentNetworks {
    pub kind: AgentKind,
    pub latent_dim: usize,
    pub num_actions: usize,
    pub obs_dim: usize,
    pub frame_dim: usize,
    pub encoder: Option<Network>,
    pub decoder: Option<Network>,
    pub transition: Option<Network>,
    pub critic: Option<Network>,
    pub target_critic: Option<Network>,
    pub policy: Option<Network>,
    pub q_net: Option<Network>,
    pub target_q: Option<Network>,
}

impl AgentNetworks {
    pub fn new(
        kind: AgentKind,
        cfg: &NetworksConfig,
        obs_dim: usize,
        frame_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, AutodiffError> {
        let act = cfg.activation;
        let latent = cfg.latent_dim;
        let a = NUM_ACTIONS;
        let spec = |input_dim, hidden: &Vec<usize>, heads| NetworkSpec {
            input_dim,
            hidden_dims: hidden.clone(),
            hidden_activation: act,
            heads,
        };
        let gaussian_heads = || {
            vec![
                head("mean", latent, Activation::Identity),
                head("log_var", latent, Activation::Identity),
            ]
        };

        let mut nets = Self {
            kind,
            latent_dim: latent,
            num_actions: a,
            obs_dim,
            frame_dim,
            encoder: None,
            decoder: None,
            transition: None,
            critic: None,
            target_critic: None,
            policy: None,
            q_net: None,
            target_q: None,
        };
        if kind.has_encoder() {
            nets.encoder = Some(Network::new("encoder", spec(obs_dim, &cfg.encoder, gaussian_heads()), 1.0, rng)?);
            nets.decoder = Some(Network::new(
                "decoder",
                spec(latent, &cfg.decoder, vec![head("pixels", frame_dim, Activation::Sigmoid)]),
                1.0,
                rng,
            )?);
        }
        if kind.has_transition() {
            nets.transition = Some(Network::new(
                "transition",
                spec(latent + a, &cfg.transition, gaussian_heads()),
                1.0,
                rng,
            )?);
        }
        if kind.has_critic() {
            let critic = Network::new(
                "critic",
                spec(latent, &cfg.critic, vec![head("g_values", a, Activation::Identity)]),
                1.0,
                rng,
            )?;
            nets.target_critic = Some(critic.renamed("target_critic", rng)?);
            nets.critic = Some(critic);
        }
        if kind.has_policy() {
            nets.policy = Some(Network::new(
                "policy",
                spec(latent, &cfg.policy, vec![head("logits", a, Activation::Identity)]),
                0.0,
                rng,
            )?);
        }
        if kind == AgentKind::Dqn {
            let q = Network::new(
                "q_net",
                spec(obs_dim, &cfg.q_net, vec![head("q_values", a, Activation::Identity)]),
                1.0,
                rng,
            )?;
            nets.target_q = Some(q.renamed("target_q", rng)?);
            nets.q_net = Some(q);
        }
        Ok(nets)
    }

    pub fn networks(&self) -> impl Iterator<Item = &Network> {
        [
            &self.encoder,
            &self.decoder,
            &self.transition,
            &self.critic,
            &self.target_critic,
            &self.policy,
            &self.q_net,
            &self.target_q,
        ]
        .into_iter()
        .flatten()
    }

    pub fn networks_mut(&mut self) -> impl Iterator<Item = &mut Network> {
        [
            &mut self.encoder,
            &mut self.decoder,
            &mut self.transition,
            &mut self.critic,
            &mut self.target_critic,
            &mut self.policy,
            &mut self.q_net,
            &mut self.target_q,
        ]
        .into_iter()
        .flatten()
    }

    pub fn network(&self, name: &str) -> Option<&Network> {
        self.networks().find(|n| n.name() == name)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.networks().flat_map(Network::params)
    }

    /// Parameters that receive gradients (target copies excluded).
    pub fn trainable_params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        [
            &mut self.encoder,
            &mut self.decoder,
            &mut self.transition,
            &mut self.critic,
            &mut self.policy,
            &mut self.q_net,
        ]
        .into_iter()
        .flatten()
        .flat_map(Network::params_mut)
    }

    /// Hard copy of critic → target critic and Q-net → target Q-net.
    pub fn sync_targets(&mut self) -> Result<(), AutodiffError> {
        if let (Some(src), Some(dst)) = (&self.critic, &mut self.target_critic) {
            dst.copy_from(src)?;
        }
        if let (Some(src), Some(dst)) = (&self.q_net, &mut self.target_q) {
            dst.copy_from(src)?;
        }
        Ok(())
    }

    fn require<'a>(net: &'a Option<Network>, role: &str) -> Result<&'a Network, AutodiffError> {
        net.as_ref()
            .ok_or_else(|| AutodiffError::Shape(format!("agent has no {role} network")))
    }

    pub fn encoder(&self) -> Result<&Network, AutodiffError> {
        Self::require(&self.encoder, "encoder")
    }

    pub fn decoder(&self) -> Result<&Network, AutodiffError> {
        Self::require(&self.decoder, "decoder")
    }

    pub fn transition(&self) -> Result<&Network, AutodiffError> {
        Self::require(&self.transition, "transition")
    }

    pub fn critic(&self) -> Result<&Network, AutodiffError> {
        Self::require(&self.critic, "critic")
    }

    pub fn target_critic(&self) -> Result<&Network, AutodiffError> {
        Self::require(&self.target_critic, "target critic")
    }

    pub fn policy(&self) -> Result<&Network, AutodiffError> {
        Self::require(&self.policy, "policy")
    }

    pub fn q_net(&self) -> Result<&Network, AutodiffError> {
        Self::require(&self.q_net, "q-network")
    }

    pub fn target_q(&self) -> Result<&Network, AutodiffError> {
        Self::require(&self.target_q, "target q-network")
    }

    // ---- tape-level forwards ----

    /// Encoder posterior on a batch of flattened observations.
    pub fn encode_node(&self, tape: &mut Tape, obs: Var) -> Result<GaussianNode, AutodiffError> {
        gaussian_node(self.encoder()?, tape, obs)
    }

    /// Transition prior for a batch of latent states and action indices.
    pub fn transit_node(&self, tape: &mut Tape, s: Var, actions: &[usize]) -> Result<GaussianNode, AutodiffError> {
        let onehot = tape.constant(one_hot(actions, self.num_actions));
        let input = tape.concat(s, onehot)?;
        gaussian_node(self.transition()?, tape, input)
    }

    /// Per-pixel probabilities of the most recent frame.
    pub fn decode_node(&self, tape: &mut Tape, s: Var) -> Result<Var, AutodiffError> {
        Ok(self.decoder()?.forward(tape, s)?.heads[0])
    }

    // ---- value-level forwards ----

    pub fn encode_batch(&self, obs: &Tensor) -> Result<Vec<DiagGaussian>, AutodiffError> {
        gaussian_rows(self.encoder()?, obs)
    }

    pub fn encode(&self, o: &Observation) -> Result<DiagGaussian, AutodiffError> {
        Ok(self.encode_batch(&obs_batch(std::slice::from_ref(o))?)?.remove(0))
    }

    pub fn decode(&self, s: &[f64]) -> Result<BernoulliFactors, AutodiffError> {
        let out = self.decoder()?.eval(&latent_row(s, self.latent_dim)?)?;
        BernoulliFactors::new(out[0].data().to_vec()).map_err(|e| AutodiffError::Shape(e.to_string()))
    }

    pub fn transit_batch(&self, s: &Tensor, actions: &[usize]) -> Result<Vec<DiagGaussian>, AutodiffError> {
        if s.rows() != actions.len() || s.last_dim() != self.latent_dim {
            return Err(AutodiffError::Shape(format!(
                "transit: states {:?} with {} actions",
                s.shape(),
                actions.len()
            )));
        }
        let onehot = one_hot(actions, self.num_actions);
        let mut data = Vec::with_capacity(s.rows() * (self.latent_dim + self.num_actions));
        for r in 0..s.rows() {
            data.extend_from_slice(s.row(r));
            data.extend_from_slice(onehot.row(r));
        }
        let input = Tensor::matrix(s.rows(), self.latent_dim + self.num_actions, data)?;
        gaussian_rows(self.transition()?, &input)
    }

    pub fn transit(&self, s: &[f64], action: usize) -> Result<DiagGaussian, AutodiffError> {
        Ok(self.transit_batch(&latent_row(s, self.latent_dim)?, &[action])?.remove(0))
    }

    /// One G-value per action (lower is better) for each latent row.
    pub fn critic_batch(&self, s: &Tensor) -> Result<Tensor, AutodiffError> {
        Ok(self.critic()?.eval(s)?.remove(0))
    }

    pub fn critic_values(&self, s: &[f64]) -> Result<Vec<f64>, AutodiffError> {
        Ok(self.critic_batch(&latent_row(s, self.latent_dim)?)?.into_data())
    }

    pub fn target_critic_batch(&self, s: &Tensor) -> Result<Tensor, AutodiffError> {
        Ok(self.target_critic()?.eval(s)?.remove(0))
    }

    pub fn policy_distribution(&self, s: &[f64]) -> Result<CategoricalDist, AutodiffError> {
        let logits = self.policy()?.eval(&latent_row(s, self.latent_dim)?)?.remove(0);
        Ok(precision_softmax(logits.data(), 1.0, false))
    }

    pub fn q_values(&self, o: &Observation) -> Result<Vec<f64>, AutodiffError> {
        Ok(self.q_net()?.eval(&obs_batch(std::slice::from_ref(o))?)?.remove(0).into_data())
    }
}

fn gaussian_node(net: &Network, tape: &mut Tape, input: Var) -> Result<GaussianNode, AutodiffError> {
    let out = net.forward(tape, input)?;
    let log_var = tape.clamp(out.heads[1], LOG_VAR_MIN, LOG_VAR_MAX);
    Ok(GaussianNode {
        mean: out.heads[0],
        log_var,
    })
}

fn gaussian_rows(net: &Network, input: &Tensor) -> Result<Vec<DiagGaussian>, AutodiffError> {
    let out = net.eval(input)?;
    (0..input.rows())
        .map(|r| {
            DiagGaussian::new(out[0].row(r).to_vec(), out[1].row(r).to_vec())
                .map_err(|e| AutodiffError::Shape(e.to_string()))
        })
        .collect()
}

fn latent_row(s: &[f64], latent_dim: usize) -> Result<Tensor, AutodiffError> {
    if s.len() != latent_dim {
        return Err(AutodiffError::Shape(format!(
            "latent vector has {} entries, expected {latent_dim}",
            s.len()
        )));
    }
    Tensor::matrix(1, s.len(), s.to_vec())
}

/// `[B × num_actions]` one-hot rows.
pub fn one_hot(actions: &[usize], num_actions: usize) -> Tensor {
    let mut data = vec![0.0; actions.len() * num_actions];
    for (r, &a) in actions.iter().enumerate() {
        data[r * num_actions + a] = 1.0;
    }
    Tensor::matrix(actions.len(), num_actions, data).expect("one-hot shape")
}

/// Stacks flattened observations into a `[B × obs_dim]` batch.
pub fn obs_batch(obs: &[Observation]) -> Result<Tensor, AutodiffError> {
    let dim = obs.first().map_or(0, Observation::dim);
    if obs.iter().any(|o| o.dim() != dim) {
        return Err(AutodiffError::Shape("observations differ in size".into()));
    }
    let mut data = Vec::with_capacity(obs.len() * dim);
    for o in obs {
        o.extend_f64(&mut data);
    }
    Tensor::matrix(obs.len(), dim, data)
}

/// Stacks the most recent frame of each observation, `[B × R²]`.
pub fn latest_frame_batch(obs: &[Observation]) -> Result<Tensor, AutodiffError> {
    let dim = obs.first().map_or(0, |o| o.latest_frame().len());
    let mut data = Vec::with_capacity(obs.len() * dim);
    for o in obs {
        data.extend(o.latest_frame().iter().map(|&p| f64::from(p)));
    }
    Tensor::matrix(obs.len(), dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use crate::distributions::graph::kl_rows;
    use crate::env::{DSpritesEnv, EnvConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> NetworksConfig {
        NetworksConfig {
            latent_dim: 10,
            encoder: vec![32],
            decoder: vec![32],
            transition: vec![32],
            critic: vec![16],
            policy: vec![16],
            q_net: vec![32],
            ..NetworksConfig::default()
        }
    }

    fn build(kind: AgentKind) -> AgentNetworks {
        let env = EnvConfig::default();
        AgentNetworks::new(kind, &small_cfg(), env.obs_dim(), env.frame_dim(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap()
    }

    fn observation() -> Observation {
        DSpritesEnv::new(EnvConfig::default())
            .unwrap()
            .reset(&mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn roles_present_by_kind() {
        let vae = build(AgentKind::Vae);
        assert!(vae.encoder.is_some() && vae.decoder.is_some());
        assert!(vae.transition.is_none() && vae.critic.is_none() && vae.q_net.is_none());
        let chmm = build(AgentKind::Chmm);
        assert!(chmm.critic.is_some() && chmm.target_critic.is_some() && chmm.policy.is_none());
        let dai = build(AgentKind::Dai);
        assert!(dai.policy.is_some());
        let dqn = build(AgentKind::Dqn);
        assert!(dqn.encoder.is_none() && dqn.q_net.is_some() && dqn.target_q.is_some());
    }

    #[test]
    fn default_widths() {
        let c = NetworksConfig::default();
        assert_eq!(c.latent_dim, 10);
        assert_eq!(
            (c.encoder[0], c.decoder[0], c.transition[0], c.critic[0], c.policy[0]),
            (256, 256, 512, 128, 128)
        );
    }

    #[test]
    fn encode_is_deterministic_with_latent_width() {
        let nets = build(AgentKind::Hmm);
        let o = observation();
        let a = nets.encode(&o).unwrap();
        assert_eq!(a, nets.encode(&o).unwrap());
        assert_eq!(a.dim(), 10);
    }

    #[test]
    fn decode_outputs_probabilities_of_one_frame() {
        let nets = build(AgentKind::Vae);
        let f = nets.decode(&[0.3; 10]).unwrap();
        assert_eq!(f.len(), 16 * 16);
        assert!(f.probs().iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(nets.decode(&[0.0; 3]).is_err());
    }

    #[test]
    fn transit_is_finite_and_deterministic() {
        let nets = build(AgentKind::Hmm);
        let a = nets.transit(&[0.1; 10], 2).unwrap();
        assert_eq!(a, nets.transit(&[0.1; 10], 2).unwrap());
        assert!(a.mean().iter().chain(a.log_var()).all(|v| v.is_finite()));
        assert!(nets.transit(&[0.1; 9], 2).is_err());
    }

    #[test]
    fn critic_has_one_value_per_action_and_target_sync() {
        let mut nets = build(AgentKind::Chmm);
        let s = [0.2; 10];
        assert_eq!(nets.critic_values(&s).unwrap().len(), 4);
        nets.critic.as_mut().unwrap().params_mut().last().unwrap().value_mut().data_mut()[0] += 1.0;
        let t = Tensor::matrix(1, 10, s.to_vec()).unwrap();
        assert_ne!(nets.critic_batch(&t).unwrap(), nets.target_critic_batch(&t).unwrap());
        nets.sync_targets().unwrap();
        assert_eq!(nets.critic_batch(&t).unwrap(), nets.target_critic_batch(&t).unwrap());
        nets.sync_targets().unwrap();
        assert_eq!(nets.critic_batch(&t).unwrap(), nets.target_critic_batch(&t).unwrap());
    }

    #[test]
    fn policy_starts_uniform() {
        let nets = build(AgentKind::Dai);
        let p = nets.policy_distribution(&[0.7; 10]).unwrap();
        assert_eq!(p.probs(), &[0.25; 4]);
    }

    #[test]
    fn sync_rejects_mismatched_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = |h: usize| NetworkSpec {
            input_dim: 3,
            hidden_dims: vec![h],
            hidden_activation: Activation::Relu,
            heads: vec![head("out", 2, Activation::Identity)],
        };
        let a = Network::new("a", spec(4), 1.0, &mut rng).unwrap();
        let mut b = Network::new("b", spec(5), 1.0, &mut rng).unwrap();
        assert!(b.copy_from(&a).is_err());
    }

    #[test]
    fn encoder_gradient_through_kl() {
        let nets = build(AgentKind::Vae);
        let x = obs_batch(&[observation()]).unwrap();
        let enc = nets.encoder().unwrap().clone();
        let mut params: Vec<Parameter> = enc.params().cloned().collect();
        let report = gradient_check(
            |t, vars| {
                // Rebuild the encoder forward from the perturbed parameter copies.
                let xin = t.constant(x.clone());
                let mut h = xin;
                let layers = vars.len() / 2;
                for l in 0..layers - 2 {
                    let z = t.affine(h, vars[2 * l], vars[2 * l + 1])?;
                    h = t.activation(z, Activation::Relu);
                }
                let mean = t.affine(h, vars[2 * (layers - 2)], vars[2 * (layers - 2) + 1])?;
                let lv = t.affine(h, vars[2 * (layers - 1)], vars[2 * (layers - 1) + 1])?;
                let lv = t.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
                let q = GaussianNode { mean, log_var: lv };
                let p = q.standard_like(t);
                let kl = kl_rows(t, q, p)?;
                Ok(t.sum(kl))
            },
            &mut params,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        // The hand-rolled forward above matches the network's own.
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let q = nets.encode_node(&mut tape, xv).unwrap();
        assert_eq!(tape.value(q.mean).data(), nets.encode_batch(&x).unwrap()[0].mean());
    }
}
