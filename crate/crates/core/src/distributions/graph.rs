//! Differentiable, batched (`[B×D]`) versions of the distribution terms.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{DiagGaussian, PROB_EPS};
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

/// Batched diagonal Gaussian living on a tape. `log_var` is already clamped.
#[derive(Clone, Copy, Debug)]
pub struct GaussianNode {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianNode {
    pub fn rows(&self, tape: &Tape) -> usize {
        tape.value(self.mean).rows()
    }

    /// Copies row `r` out as a value-level distribution.
    pub fn row(&self, tape: &Tape, r: usize) -> DiagGaussian {
        DiagGaussian::new(
            tape.value(self.mean).row(r).to_vec(),
            tape.value(self.log_var).row(r).to_vec(),
        )
        .expect("matching head widths")
    }

    pub fn detach(&self, tape: &mut Tape) -> GaussianNode {
        GaussianNode {
            mean: tape.detach(self.mean),
            log_var: tape.detach(self.log_var),
        }
    }

    /// Standard normal prior with the same shape.
    pub fn standard_like(&self, tape: &mut Tape) -> GaussianNode {
        let shape = tape.shape(self.mean).to_vec();
        GaussianNode {
            mean: tape.constant(Tensor::zeros(shape.clone())),
            log_var: tape.constant(Tensor::zeros(shape)),
        }
    }
}

/// Row-wise `KL(q ‖ p)`, shape `[B]`.
pub fn kl_rows(tape: &mut Tape, q: GaussianNode, p: GaussianNode) -> Result<Var, AutodiffError> {
    let dl = tape.sub(q.log_var, p.log_var)?;
    let var_ratio = tape.exp(dl);
    let dm = tape.sub(q.mean, p.mean)?;
    let dm2 = tape.square(dm);
    let neg_lp = tape.scale(p.log_var, -1.0);
    let inv_var_p = tape.exp(neg_lp);
    let maha = tape.mul(dm2, inv_var_p)?;
    let s = tape.add(var_ratio, maha)?;
    let neg_dl = tape.scale(dl, -1.0);
    let s = tape.add(s, neg_dl)?;
    let s = tape.add_scalar(s, -1.0);
    let s = tape.scale(s, 0.5);
    Ok(tape.sum_last(s))
}

/// `mean + exp(½·log_var) ⊙ ε`; `ε` enters as a constant.
pub fn reparameterize(tape: &mut Tape, g: GaussianNode, rng: &mut impl Rng) -> Result<Var, AutodiffError> {
    let shape = tape.shape(g.mean).to_vec();
    let n: usize = shape.iter().product();
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let eps = tape.constant(Tensor::new(shape, eps)?);
    let half = tape.scale(g.log_var, 0.5);
    let std = tape.exp(half);
    let noise = tape.mul(std, eps)?;
    tape.add(g.mean, noise)
}

/// Row-wise Bernoulli log-likelihood of binary `obs` under `probs`, `[B]`.
pub fn bernoulli_ll_rows(tape: &mut Tape, probs: Var, obs: &Tensor) -> Result<Var, AutodiffError> {
    if tape.shape(probs) != obs.shape() {
        return Err(AutodiffError::Shape(format!(
            "likelihood: probs {:?} vs obs {:?}",
            tape.shape(probs),
            obs.shape()
        )));
    }
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let ln_p = tape.ln(p);
    let one_minus = tape.scale(p, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let ln_q = tape.ln(one_minus);
    let o = tape.constant(obs.clone());
    let not_o = obs.data().iter().map(|v| 1.0 - v).collect();
    let not_o = tape.constant(Tensor::new(obs.shape().to_vec(), not_o)?);
    let a = tape.mul(o, ln_p)?;
    let b = tape.mul(not_o, ln_q)?;
    let ll = tape.add(a, b)?;
    Ok(tape.sum_last(ll))
}

/// Row-wise `KL(softmax(q_logits) ‖ p)` for a constant log-probability table
/// `p_log`, `[B]`.
pub fn categorical_kl_rows(tape: &mut Tape, q_logits: Var, p_log: &Tensor) -> Result<Var, AutodiffError> {
    let log_q = tape.log_softmax(q_logits);
    let q = tape.exp(log_q);
    let lp = tape.constant(p_log.clone());
    let diff = tape.sub(log_q, lp)?;
    let terms = tape.mul(q, diff)?;
    Ok(tape.sum_last(terms))
}
