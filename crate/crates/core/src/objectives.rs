//! Variational and expected free energies, the critic's Bellman target,
//! smooth-L1 and the DQN target.
//!
//! G-values follow a lower-is-better convention: the action prior is
//! `σ[−ζG]` and the default Bellman backup takes the minimum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::distributions::graph::{bernoulli_ll_rows, categorical_kl_rows, kl_rows, reparameterize, GaussianNode};
use crate::distributions::{gaussian_entropy, kl_diag_gaussian, DiagGaussian, DistributionError};
use crate::nets::AgentNetworks;

/// One-step expected free energy estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EfeVariant {
    Principled,
    G1,
    G2,
    G3,
    G4,
    /// Reward plus a fraction `λ` of the information gain.
    Blend(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EfeKind {
    Principled,
    G1,
    G2,
    G3,
    G4,
    Blend,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Min,
    Max,
}

impl Polarity {
    pub fn best(self, values: &[f64]) -> usize {
        match self {
            Polarity::Min => crate::distributions::argmin(values),
            Polarity::Max => crate::distributions::argmax(values),
        }
    }

    pub fn backup(self, values: &[f64]) -> f64 {
        match self {
            Polarity::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            Polarity::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Objective block of a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub efe: EfeKind,
    /// Blend fraction; only read when `efe = "blend"`.
    pub lambda: f64,
    pub psi: f64,
    pub zeta: f64,
    pub gamma: f64,
    pub sl1_beta: f64,
    pub backup: Polarity,
    pub selection_polarity: Polarity,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            efe: EfeKind::Principled,
            lambda: 0.0,
            psi: 1.0,
            zeta: 1.0,
            gamma: 0.95,
            sl1_beta: 1.0,
            backup: Polarity::Min,
            selection_polarity: Polarity::Min,
        }
    }
}

impl ObjectiveConfig {
    pub fn variant(&self) -> EfeVariant {
        match self.efe {
            EfeKind::Principled => EfeVariant::Principled,
            EfeKind::G1 => EfeVariant::G1,
            EfeKind::G2 => EfeVariant::G2,
            EfeKind::G3 => EfeVariant::G3,
            EfeKind::G4 => EfeVariant::G4,
            EfeKind::Blend => EfeVariant::Blend(self.lambda),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.psi >= 0.0 && self.zeta >= 0.0) {
            return Err("psi and zeta must be non-negative".into());
        }
        if !(self.sl1_beta > 0.0) {
            return Err(format!("sl1_beta must be positive, got {}", self.sl1_beta));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.efe != EfeKind::Blend && self.lambda != 0.0 {
            return Err("lambda is only meaningful with efe = \"blend\"".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VfeBreakdown {
    pub total: f64,
    pub complexity: f64,
    pub accuracy: f64,
    pub action_kl: f64,
}

/// Batch-mean VFE terms on a tape, plus the intermediate posteriors the
/// critic update reuses.
#[derive(Clone, Copy, Debug)]
pub struct VfeTerms {
    pub total: Var,
    pub complexity: Var,
    pub accuracy: Var,
    pub action_kl: Option<Var>,
    /// `Q(s_{t+1} | o_{t+1})`.
    pub posterior: GaussianNode,
    /// One reparameterized sample from `posterior`.
    pub sample: Var,
    /// `P(s_{t+1} | s_t, a_t)` (transition agents only).
    pub prior: Option<GaussianNode>,
    /// `Q(s_t | o_t)` (transition agents only).
    pub prev_posterior: Option<GaussianNode>,
    /// One sample of `s_t` from `Q(s_t | o_t)` (transition agents only).
    pub prev_sample: Option<Var>,
}

impl VfeTerms {
    pub fn breakdown(&self, tape: &Tape) -> VfeBreakdown {
        let complexity = tape.value(self.complexity).item();
        let accuracy = tape.value(self.accuracy).item();
        let action_kl = self.action_kl.map_or(0.0, |v| tape.value(v).item());
        VfeBreakdown {
            total: complexity + accuracy + action_kl,
            complexity,
            accuracy,
            action_kl,
        }
    }
}

fn accuracy_term(
    tape: &mut Tape,
    nets: &AgentNetworks,
    sample: Var,
    frame: &Tensor,
) -> Result<Var, AutodiffError> {
    let probs = nets.decode_node(tape, sample)?;
    let ll = bernoulli_ll_rows(tape, probs, frame)?;
    let m = tape.mean(ll);
    Ok(tape.scale(m, -1.0))
}

/// VAE free energy of `obs` (`[B × obs_dim]`), reconstructing `frame`
/// (`[B × R²]`, its latest frame).
pub fn vfe_vae(
    tape: &mut Tape,
    nets: &AgentNetworks,
    obs: &Tensor,
    frame: &Tensor,
    rng: &mut impl Rng,
) -> Result<VfeTerms, AutodiffError> {
    let x = tape.constant(obs.clone());
    let q = nets.encode_node(tape, x)?;
    let sample = reparameterize(tape, q, rng)?;
    let p = q.standard_like(tape);
    let kl = kl_rows(tape, q, p)?;
    let complexity = tape.mean(kl);
    let accuracy = accuracy_term(tape, nets, sample, frame)?;
    let total = tape.add(complexity, accuracy)?;
    Ok(VfeTerms {
        total,
        complexity,
        accuracy,
        action_kl: None,
        posterior: q,
        sample,
        prior: None,
        prev_posterior: None,
        prev_sample: None,
    })
}

/// HMM free energy of the transition `o_t, a_t → o_{t+1}`. The complexity
/// term compares `Q(s_{t+1}|o_{t+1})` to the transition prior evaluated at
/// one sample of `s_t`.
pub fn vfe_hmm(
    tape: &mut Tape,
    nets: &AgentNetworks,
    obs: &Tensor,
    actions: &[usize],
    next_obs: &Tensor,
    next_frame: &Tensor,
    rng: &mut impl Rng,
) -> Result<VfeTerms, AutodiffError> {
    let x_next = tape.constant(next_obs.clone());
    let q = nets.encode_node(tape, x_next)?;
    // The posterior sample is drawn first so that a transition emitting
    // N(0, I) reproduces the VAE draw for draw.
    let sample = reparameterize(tape, q, rng)?;
    let x = tape.constant(obs.clone());
    let q_prev = nets.encode_node(tape, x)?;
    let s_prev = reparameterize(tape, q_prev, rng)?;
    let prior = nets.transit_node(tape, s_prev, actions)?;
    let kl = kl_rows(tape, q, prior)?;
    let complexity = tape.mean(kl);
    let accuracy = accuracy_term(tape, nets, sample, next_frame)?;
    let total = tape.add(complexity, accuracy)?;
    Ok(VfeTerms {
        total,
        complexity,
        accuracy,
        action_kl: None,
        posterior: q,
        sample,
        prior: Some(prior),
        prev_posterior: Some(q_prev),
        prev_sample: Some(s_prev),
    })
}

/// HMM free energy plus `KL(Q(a|s) ‖ σ[−ζG(s,·)])` at the sampled
/// `s_{t+1}`. The critic enters as a constant and the state is detached, so
/// the action term only trains the policy.
#[allow(clippy::too_many_arguments)]
pub fn vfe_dai(
    tape: &mut Tape,
    nets: &AgentNetworks,
    obs: &Tensor,
    actions: &[usize],
    next_obs: &Tensor,
    next_frame: &Tensor,
    zeta: f64,
    rng: &mut impl Rng,
) -> Result<VfeTerms, AutodiffError> {
    let mut terms = vfe_hmm(tape, nets, obs, actions, next_obs, next_frame, rng)?;
    let s = tape.value(terms.sample).clone();
    let g = nets.critic_batch(&s)?;
    let a = g.last_dim();
    let mut log_prior: Vec<f64> = g.data().iter().map(|v| -zeta * v).collect();
    crate::autodiff::kernels::log_softmax_rows(&mut log_prior, a);
    let log_prior = Tensor::new(g.shape().to_vec(), log_prior)?;
    let s_const = tape.constant(s);
    let logits = nets.policy()?.forward(tape, s_const)?.heads[0];
    let kl = categorical_kl_rows(tape, logits, &log_prior)?;
    let action_kl = tape.mean(kl);
    terms.total = tape.add(terms.total, action_kl)?;
    terms.action_kl = Some(action_kl);
    Ok(terms)
}

/// One-step EFE from the transition prior `P(s_{t+1}|s_t,a_t)` and the
/// posterior `Q(s_{t+1}|o_{t+1})`. Returns a plain number (a regression
/// target).
pub fn efe_one_step(
    variant: EfeVariant,
    psi: f64,
    prior: &DiagGaussian,
    posterior: &DiagGaussian,
    reward: f64,
) -> Result<f64, DistributionError> {
    let extrinsic = -psi * reward;
    let epistemic = match variant {
        EfeVariant::Principled => kl_diag_gaussian(prior, posterior)?,
        EfeVariant::G1 => gaussian_entropy(posterior) - gaussian_entropy(prior),
        EfeVariant::G2 => gaussian_entropy(prior) - gaussian_entropy(posterior),
        EfeVariant::G3 => kl_diag_gaussian(posterior, prior)?,
        EfeVariant::G4 => 0.0,
        EfeVariant::Blend(lambda) => {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(DistributionError::Invalid(format!("blend fraction {lambda} outside [0, 1]")));
            }
            if lambda == 0.0 {
                0.0
            } else {
                lambda * kl_diag_gaussian(prior, posterior)?
            }
        }
    };
    Ok(epistemic + extrinsic)
}

/// [`efe_one_step`] evaluated through the networks: the prior comes from
/// `transit(s_t, a_t)`, the posterior from `encode(o_{t+1})`. G4 never
/// touches a network.
pub fn efe_one_step_nets(
    variant: EfeVariant,
    psi: f64,
    s_t: &[f64],
    a_t: usize,
    next_obs: &crate::env::Observation,
    reward: f64,
    nets: &AgentNetworks,
) -> Result<f64, ObjectiveError> {
    if variant == EfeVariant::G4 {
        return Ok(-psi * reward);
    }
    let prior = nets.transit(s_t, a_t)?;
    let posterior = nets.encode(next_obs)?;
    Ok(efe_one_step(variant, psi, &prior, &posterior, reward)?)
}

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error("objective: {0}")]
    Invalid(String),
}

/// Bellman targets `y = G + γ·backup_a' target(s', a')`.
///
/// `bootstrap` receives the indices of rows that need a bootstrap (not done)
/// and returns one action-value row per index. It is not called at all when
/// no row needs one or `γ = 0`.
pub fn critic_target<F>(
    g_next: &[f64],
    done: &[bool],
    gamma: f64,
    backup: Polarity,
    bootstrap: F,
) -> Result<Vec<f64>, ObjectiveError>
where
    F: FnOnce(&[usize]) -> Result<Vec<Vec<f64>>, ObjectiveError>,
{
    if g_next.len() != done.len() {
        return Err(ObjectiveError::Invalid(format!(
            "{} targets with {} done flags",
            g_next.len(),
            done.len()
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(ObjectiveError::Invalid(format!("gamma {gamma} outside [0, 1)")));
    }
    let mut y = g_next.to_vec();
    let live: Vec<usize> = (0..done.len()).filter(|&i| !done[i]).collect();
    if live.is_empty() || gamma == 0.0 {
        return Ok(y);
    }
    let values = bootstrap(&live)?;
    if values.len() != live.len() {
        return Err(ObjectiveError::Invalid("bootstrap returned the wrong number of rows".into()));
    }
    for (&i, row) in live.iter().zip(&values) {
        y[i] += gamma * backup.backup(row);
    }
    Ok(y)
}

/// `r + γ·max_a' Q_target(o', a')`, dropping the bootstrap when `done`.
pub fn dqn_target(reward: f64, next_q: Option<&[f64]>, gamma: f64, done: bool) -> f64 {
    match next_q {
        Some(q) if !done && gamma != 0.0 => reward + gamma * Polarity::Max.backup(q),
        _ => reward,
    }
}

/// Huber loss with threshold `beta`.
pub fn smooth_l1(pred: f64, target: f64, beta: f64) -> f64 {
    let d = (pred - target).abs();
    if d < beta {
        0.5 * d * d / beta
    } else {
        d - 0.5 * beta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Activation, Parameter};
    use crate::distributions::{
        bernoulli_log_likelihood, categorical_kl, precision_softmax, reparameterize as sample_gaussian,
    };
    use crate::nets::{AgentKind, NetworksConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(1.0, 1.0, 1.0), 0.0);
        assert_eq!(smooth_l1(0.5, 0.0, 1.0), 0.125);
        assert_eq!(smooth_l1(0.0, 2.0, 1.0), 1.5);
        assert_eq!(smooth_l1(0.0, 1.0, 1.0), 0.5);
    }

    #[test]
    fn dqn_target_examples() {
        assert_eq!(dqn_target(1.0, Some(&[0.0, 1.0]), 0.5, true), 1.0);
        assert_eq!(dqn_target(1.0, Some(&[0.0, 1.0]), 0.0, false), 1.0);
        assert_eq!(dqn_target(1.0, Some(&[0.0, 1.0]), 0.5, false), 1.5);
    }

    #[test]
    fn critic_target_examples() {
        let table = |_: &[usize]| -> Result<Vec<Vec<f64>>, ObjectiveError> { Ok(vec![vec![1.0, 2.0, 3.0, 4.0]]) };
        let y = critic_target(&[0.0], &[false], 0.9, Polarity::Min, table).unwrap();
        assert!((y[0] - 0.9).abs() < 1e-15);
        let y = critic_target(&[0.0], &[false], 0.9, Polarity::Max, table).unwrap();
        assert!((y[0] - 3.6).abs() < 1e-15);
        assert_eq!(critic_target(&[0.7], &[false], 0.0, Polarity::Min, table).unwrap(), vec![0.7]);
        assert!(critic_target(&[0.7], &[false], 1.0, Polarity::Min, table).is_err());
    }

    #[test]
    fn done_rows_never_consult_the_target() {
        let calls = Cell::new(0);
        let y = critic_target(&[0.3, -1.0], &[true, true], 0.99, Polarity::Min, |_| {
            calls.set(calls.get() + 1);
            Ok(vec![])
        })
        .unwrap();
        assert_eq!(y, vec![0.3, -1.0]);
        assert_eq!(calls.get(), 0);
        let y = critic_target(&[0.0, 1.0], &[true, false], 0.5, Polarity::Min, |idx| {
            calls.set(calls.get() + 1);
            assert_eq!(idx, &[1]);
            Ok(vec![vec![2.0, 4.0]])
        })
        .unwrap();
        assert_eq!(y, vec![0.0, 2.0]);
        assert_eq!(calls.get(), 1);
    }

    fn gauss(m: &[f64], lv: &[f64]) -> DiagGaussian {
        DiagGaussian::new(m.to_vec(), lv.to_vec()).unwrap()
    }

    #[test]
    fn efe_examples() {
        let p = gauss(&[0.1, 0.2], &[0.0, -0.5]);
        let q = gauss(&[0.3, -0.2], &[0.4, 0.1]);
        assert_eq!(efe_one_step(EfeVariant::G4, 1.0, &p, &q, 0.5).unwrap(), -0.5);
        assert!((efe_one_step(EfeVariant::Principled, 2.0, &p, &p, 0.25).unwrap() + 0.5).abs() < 1e-15);
        let g1 = efe_one_step(EfeVariant::G1, 1.5, &p, &q, 0.4).unwrap();
        let g2 = efe_one_step(EfeVariant::G2, 1.5, &p, &q, 0.4).unwrap();
        assert!((g1 + g2 + 2.0 * 1.5 * 0.4).abs() < 1e-12);
        let full = efe_one_step(EfeVariant::Principled, 1.0, &p, &q, 0.0).unwrap();
        let blend = efe_one_step(EfeVariant::Blend(0.05), 1.0, &p, &q, 0.0).unwrap();
        assert!((blend - 0.05 * full).abs() < 1e-15);
        assert!(efe_one_step(EfeVariant::Blend(1.5), 1.0, &p, &q, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn kl_variants_bounded_below(
            m in prop::collection::vec(-3.0f64..3.0, 6),
            lv in prop::collection::vec(-4.0f64..4.0, 6),
            psi in 0.0f64..3.0,
            r in -1.0f64..1.0,
        ) {
            let p = gauss(&m[..3], &lv[..3]);
            let q = gauss(&m[3..], &lv[3..]);
            let floor = -psi * r;
            prop_assert!(efe_one_step(EfeVariant::Principled, psi, &p, &q, r).unwrap() >= floor - 1e-12);
            prop_assert!(efe_one_step(EfeVariant::G3, psi, &p, &q, r).unwrap() >= floor - 1e-12);
            let g1 = efe_one_step(EfeVariant::G1, psi, &p, &q, r).unwrap();
            let g2 = efe_one_step(EfeVariant::G2, psi, &p, &q, r).unwrap();
            prop_assert!((g1 + g2 - 2.0 * floor).abs() < 1e-9);
        }
    }

    fn toy_nets(kind: AgentKind, seed: u64) -> AgentNetworks {
        let cfg = NetworksConfig {
            latent_dim: 2,
            activation: Activation::Tanh,
            encoder: vec![3],
            decoder: vec![3],
            transition: vec![3],
            critic: vec![3],
            policy: vec![3],
            q_net: vec![3],
        };
        AgentNetworks::new(kind, &cfg, 2, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn zero_heads(net: &mut crate::nets::Network) {
        let n = net.params().count();
        for (i, p) in net.params_mut().enumerate() {
            if i + 4 >= n {
                let z = crate::autodiff::Tensor::zeros(p.value().shape().to_vec());
                p.assign(&z).unwrap();
            }
        }
    }

    fn toy_batch() -> (Tensor, Tensor) {
        let obs = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        (obs.clone(), obs)
    }

    #[test]
    fn vae_matches_hand_assembled_kl_plus_bce() {
        let nets = toy_nets(AgentKind::Vae, 4);
        let (obs, frame) = toy_batch();
        let mut tape = Tape::new();
        let terms = vfe_vae(&mut tape, &nets, &obs, &frame, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let got = terms.breakdown(&tape);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let posts = nets.encode_batch(&obs).unwrap();
        // Samples are drawn for the whole batch in row-major order.
        let samples: Vec<Vec<f64>> = posts.iter().map(|q| sample_gaussian(q, &mut rng)).collect();
        let (mut kl, mut nll) = (0.0, 0.0);
        for (r, q) in posts.iter().enumerate() {
            kl += kl_diag_gaussian(q, &DiagGaussian::standard(2)).unwrap();
            nll -= bernoulli_log_likelihood(frame.row(r), &nets.decode(&samples[r]).unwrap()).unwrap();
        }
        assert!((got.complexity - kl / 2.0).abs() < 1e-12);
        assert!((got.accuracy - nll / 2.0).abs() < 1e-12);
        assert!((got.total - got.complexity - got.accuracy).abs() < 1e-12);
        assert_eq!(got.action_kl, 0.0);
    }

    #[test]
    fn pinned_encoder_has_zero_complexity() {
        let mut nets = toy_nets(AgentKind::Vae, 4);
        zero_heads(nets.encoder.as_mut().unwrap());
        let (obs, frame) = toy_batch();
        let mut tape = Tape::new();
        let terms = vfe_vae(&mut tape, &nets, &obs, &frame, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(terms.breakdown(&tape).complexity, 0.0);
    }

    #[test]
    fn perfect_decoder_has_near_zero_accuracy() {
        let mut nets = toy_nets(AgentKind::Vae, 4);
        let dec = nets.decoder.as_mut().unwrap();
        zero_heads(dec);
        let bias = dec.params_mut().last().unwrap();
        bias.assign(&Tensor::vector(vec![50.0, -50.0])).unwrap();
        let obs = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let terms = vfe_vae(&mut tape, &nets, &obs, &obs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let acc = terms.breakdown(&tape).accuracy;
        assert!((0.0..1e-6).contains(&acc), "{acc}");
    }

    #[test]
    fn hmm_with_standard_transition_reduces_to_vae() {
        let mut hmm = toy_nets(AgentKind::Hmm, 4);
        zero_heads(hmm.transition.as_mut().unwrap());
        let mut vae = toy_nets(AgentKind::Vae, 4);
        vae.encoder = hmm.encoder.clone();
        vae.decoder = hmm.decoder.clone();
        let (obs, frame) = toy_batch();
        let mut t1 = Tape::new();
        let a = vfe_hmm(&mut t1, &hmm, &obs, &[0, 3], &obs, &frame, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut t2 = Tape::new();
        let b = vfe_vae(&mut t2, &vae, &obs, &frame, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let (a, b) = (a.breakdown(&t1), b.breakdown(&t2));
        assert!((a.total - b.total).abs() < 1e-12, "{a:?} vs {b:?}");
    }

    #[test]
    fn hmm_matches_compositional_rederivation() {
        let nets = toy_nets(AgentKind::Hmm, 6);
        let obs = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let next = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let terms = vfe_hmm(&mut tape, &nets, &obs, &[2], &next, &next, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let got = terms.breakdown(&tape);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = nets.encode_batch(&next).unwrap().remove(0);
        let s = sample_gaussian(&q, &mut rng);
        let q_prev = nets.encode_batch(&obs).unwrap().remove(0);
        let s_prev = sample_gaussian(&q_prev, &mut rng);
        let prior = nets.transit(&s_prev, 2).unwrap();
        let kl = kl_diag_gaussian(&q, &prior).unwrap();
        let nll = -bernoulli_log_likelihood(next.row(0), &nets.decode(&s).unwrap()).unwrap();
        assert!((got.complexity - kl).abs() < 1e-12);
        assert!((got.accuracy - nll).abs() < 1e-12);
    }

    #[test]
    fn pinned_transition_has_zero_complexity() {
        // Encoder and transition heads both emit N(0, I).
        let mut nets = toy_nets(AgentKind::Hmm, 6);
        zero_heads(nets.encoder.as_mut().unwrap());
        zero_heads(nets.transition.as_mut().unwrap());
        let (obs, frame) = toy_batch();
        let mut tape = Tape::new();
        let t = vfe_hmm(&mut tape, &nets, &obs, &[1, 1], &obs, &frame, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t.breakdown(&tape).complexity, 0.0);
    }

    #[test]
    fn dai_adds_categorical_kl_to_hmm() {
        let mut nets = toy_nets(AgentKind::Dai, 8);
        // Give the policy non-uniform output.
        for p in nets.policy.as_mut().unwrap().params_mut() {
            let v: Vec<f64> = (0..p.value().len()).map(|i| 0.3 * (i as f64).sin()).collect();
            p.assign(&Tensor::new(p.value().shape().to_vec(), v).unwrap()).unwrap();
        }
        let (obs, frame) = toy_batch();
        let zeta = 1.7;
        let mut t1 = Tape::new();
        let dai = vfe_dai(&mut t1, &nets, &obs, &[0, 1], &obs, &frame, zeta, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut t2 = Tape::new();
        let hmm = vfe_hmm(&mut t2, &nets, &obs, &[0, 1], &obs, &frame, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let s = t2.value(hmm.sample).clone();
        let mut kl = 0.0;
        for r in 0..2 {
            let prior = precision_softmax(&nets.critic_values(s.row(r)).unwrap(), zeta, true);
            kl += categorical_kl(&nets.policy_distribution(s.row(r)).unwrap(), &prior).unwrap();
        }
        let (a, b) = (dai.breakdown(&t1), hmm.breakdown(&t2));
        assert!(kl > 0.0);
        assert!((a.action_kl - kl / 2.0).abs() < 1e-12);
        assert!((a.total - b.total - kl / 2.0).abs() < 1e-12);
        assert!((a.total - (a.complexity + a.accuracy + a.action_kl)).abs() < 1e-12);
    }

    #[test]
    fn dai_uniform_policy_and_flat_prior_give_zero_action_kl() {
        let nets = toy_nets(AgentKind::Dai, 8);
        let (obs, frame) = toy_batch();
        let mut tape = Tape::new();
        let t = vfe_dai(&mut tape, &nets, &obs, &[0, 1], &obs, &frame, 0.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(t.breakdown(&tape).action_kl.abs() < 1e-15);
    }

    #[test]
    fn dai_action_term_trains_only_the_policy() {
        let nets = toy_nets(AgentKind::Dai, 8);
        let (obs, frame) = toy_batch();
        let mut tape = Tape::new();
        let t = vfe_dai(&mut tape, &nets, &obs, &[0, 1], &obs, &frame, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let grads = tape.backward(t.action_kl.unwrap()).unwrap();
        let touched = |net: &Option<crate::nets::Network>| {
            net.as_ref().unwrap().params().any(|p: &Parameter| grads.get(p.id()).is_some())
        };
        assert!(touched(&nets.policy));
        assert!(!touched(&nets.critic));
        assert!(!touched(&nets.encoder));
    }

    #[test]
    fn g4_ignores_the_networks() {
        let a = toy_nets(AgentKind::Chmm, 1);
        let obs = crate::env::Observation::from_frames(8, [vec![0u8; 64].as_slice()]);
        // The networks' input width does not even match the observation.
        let v = efe_one_step_nets(EfeVariant::G4, 1.0, &[0.0, 0.0], 0, &obs, 0.5, &a).unwrap();
        assert_eq!(v, -0.5);
        assert!(efe_one_step_nets(EfeVariant::Principled, 1.0, &[0.0, 0.0], 0, &obs, 0.5, &a).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = ObjectiveConfig::default();
        assert_eq!((c.gamma, c.psi, c.zeta, c.sl1_beta), (0.95, 1.0, 1.0, 1.0));
        assert_eq!(c.backup, Polarity::Min);
        assert!(c.validate().is_ok());
        let bad = ObjectiveConfig { lambda: 0.1, ..c.clone() };
        assert!(bad.validate().is_err());
        let blend = ObjectiveConfig { efe: EfeKind::Blend, lambda: 0.05, ..c };
        assert_eq!(blend.variant(), EfeVariant::Blend(0.05));
    }
}
