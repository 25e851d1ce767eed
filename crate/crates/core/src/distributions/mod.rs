//! Diagonal Gaussians, Bernoulli pixel factors and categoricals.
//!
//! Value-level functions live here; [`graph`] holds the differentiable
//! versions used inside training losses.

pub mod graph;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Log-variances are clamped into this range before exponentiation.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
/// Bernoulli probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;
/// Tolerance on a categorical's total mass.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("divergence is infinite: reference has zero mass at index {0}")]
    InfiniteDivergence(usize),
    #[error("invalid distribution: {0}")]
    Invalid(String),
}

/// `N(mean, diag(exp(log_var)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    /// Log-variances are clamped into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self, DistributionError> {
        if mean.len() != log_var.len() {
            return Err(DistributionError::Dimension(mean.len(), log_var.len()));
        }
        if log_var.iter().any(|v| v.is_nan()) {
            return Err(DistributionError::Invalid("NaN log-variance".into()));
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(x)
            .map(|((m, lv), xi)| -0.5 * ((2.0 * PI).ln() + lv + (xi - m).powi(2) / lv.exp()))
            .sum()
    }
}

/// `KL(q ‖ p)` in closed form.
pub fn kl_diag_gaussian(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64, DistributionError> {
    if q.dim() != p.dim() {
        return Err(DistributionError::Dimension(q.dim(), p.dim()));
    }
    let mut kl = 0.0;
    for d in 0..q.dim() {
        let (mq, lq, mp, lp) = (q.mean[d], q.log_var[d], p.mean[d], p.log_var[d]);
        kl += 0.5 * ((lq - lp).exp() + (mq - mp).powi(2) / lp.exp() - 1.0 + lp - lq);
    }
    Ok(kl.max(0.0))
}

/// Differential entropy in nats.
pub fn gaussian_entropy(g: &DiagGaussian) -> f64 {
    let c = (2.0 * PI * std::f64::consts::E).ln();
    g.log_var.iter().map(|lv| 0.5 * (c + lv)).sum()
}

/// `mean + exp(½·log_var) ⊙ ε` with `ε ~ N(0, I)`.
pub fn reparameterize(g: &DiagGaussian, rng: &mut impl Rng) -> Vec<f64> {
    g.mean
        .iter()
        .zip(&g.log_var)
        .map(|(m, lv)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + (0.5 * lv).exp() * eps
        })
        .collect()
}

/// Independent Bernoulli factors, one per pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BernoulliFactors {
    probs: Vec<f64>,
}

impl BernoulliFactors {
    pub fn new(probs: Vec<f64>) -> Result<Self, DistributionError> {
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(DistributionError::Invalid(format!("probability {p} outside [0,1]")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `Σ o·ln p + (1−o)·ln(1−p)` with clamped probabilities.
pub fn bernoulli_log_likelihood(obs: &[f64], factors: &BernoulliFactors) -> Result<f64, DistributionError> {
    if obs.len() != factors.len() {
        return Err(DistributionError::Dimension(obs.len(), factors.len()));
    }
    Ok(obs
        .iter()
        .zip(&factors.probs)
        .map(|(o, p)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            o * p.ln() + (1.0 - o) * (1.0 - p).ln()
        })
        .sum())
}

/// Probability vector over a finite support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(probs: Vec<f64>) -> Result<Self, DistributionError> {
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(DistributionError::Invalid("negative or non-finite mass".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(DistributionError::Invalid(format!("mass sums to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }

    /// Index of the largest mass (first on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }
}

/// `Σ q (ln q − ln p)` with `0·ln 0 = 0`.
pub fn categorical_kl(q: &CategoricalDist, p: &CategoricalDist) -> Result<f64, DistributionError> {
    if q.len() != p.len() {
        return Err(DistributionError::Dimension(q.len(), p.len()));
    }
    let mut kl = 0.0;
    for (i, (qa, pa)) in q.probs.iter().zip(&p.probs).enumerate() {
        if *qa == 0.0 {
            continue;
        }
        if *pa == 0.0 {
            return Err(DistributionError::InfiniteDivergence(i));
        }
        kl += qa * (qa.ln() - pa.ln());
    }
    Ok(kl)
}

/// `softmax(±zeta·values)`; `negate = true` gives `σ[−ζ·values]`.
pub fn precision_softmax(values: &[f64], zeta: f64, negate: bool) -> CategoricalDist {
    let sign = if negate { -1.0 } else { 1.0 };
    let mut logits: Vec<f64> = values.iter().map(|v| sign * zeta * v).collect();
    crate::autodiff::kernels::softmax_rows(&mut logits, values.len().max(1));
    CategoricalDist { probs: logits }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const HALF_LN_2PIE: f64 = 1.418_938_533_204_672_7;

    fn g(mean: &[f64], log_var: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mean.to_vec(), log_var.to_vec()).unwrap()
    }

    #[test]
    fn kl_identical_is_zero() {
        let s = DiagGaussian::standard(3);
        assert_eq!(kl_diag_gaussian(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let kl = kl_diag_gaussian(&g(&[1.0], &[0.0]), &DiagGaussian::standard(1)).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let q = g(&[0.3], &[0.25f64.ln()]);
        let p = g(&[-0.1], &[4f64.ln()]);
        let analytic = kl_diag_gaussian(&q, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = reparameterize(&q, &mut rng);
            let v = q.log_density(&x) - p.log_density(&x);
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - analytic).abs() < 3.0 * se, "{mean} vs {analytic} (se {se})");
    }

    #[test]
    fn kl_dimension_mismatch() {
        assert_eq!(
            kl_diag_gaussian(&DiagGaussian::standard(2), &DiagGaussian::standard(3)),
            Err(DistributionError::Dimension(2, 3))
        );
    }

    #[test]
    fn entropy_values() {
        assert!((gaussian_entropy(&DiagGaussian::standard(1)) - HALF_LN_2PIE).abs() < 1e-12);
        assert_eq!(
            gaussian_entropy(&g(&[5.0], &[0.0])),
            gaussian_entropy(&DiagGaussian::standard(1))
        );
        assert!((gaussian_entropy(&DiagGaussian::standard(3)) - 3.0 * HALF_LN_2PIE).abs() < 1e-12);
    }

    #[test]
    fn log_var_is_clamped() {
        let d = g(&[0.0], &[-1e9]);
        assert_eq!(d.log_var(), &[LOG_VAR_MIN]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = reparameterize(&g(&[2.0], &[f64::NEG_INFINITY]), &mut rng);
        assert!((x[0] - 2.0).abs() < 6.0 * (0.5 * LOG_VAR_MIN).exp());
    }

    #[test]
    fn reparameterize_mean_and_seed() {
        let d = g(&[1.5, -0.5], &[0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let x = reparameterize(&d, &mut rng);
            sum[0] += x[0];
            sum[1] += x[1];
        }
        for k in 0..2 {
            let sd = (0.5 * d.log_var()[k]).exp();
            assert!((sum[k] / n as f64 - d.mean()[k]).abs() < 4.0 * sd / (n as f64).sqrt());
        }
        let a = reparameterize(&d, &mut ChaCha8Rng::seed_from_u64(1));
        let b = reparameterize(&d, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn bernoulli_cases() {
        let ones = BernoulliFactors::new(vec![1.0; 4]).unwrap();
        let ll = bernoulli_log_likelihood(&[1.0; 4], &ones).unwrap();
        assert!((ll - 4.0 * (1.0 - PROB_EPS).ln()).abs() < 1e-15);
        let half = BernoulliFactors::new(vec![0.5; 4]).unwrap();
        let ll = bernoulli_log_likelihood(&[1.0; 4], &half).unwrap();
        assert!((ll - 4.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((ll + 2.772_588_722_239_781).abs() < 1e-12);
        assert!(bernoulli_log_likelihood(&[1.0; 3], &half).is_err());
        assert!(BernoulliFactors::new(vec![1.2]).is_err());
    }

    #[test]
    fn bernoulli_matches_direct_sum_on_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let obs: Vec<f64> = (0..64).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect();
        let probs: Vec<f64> = (0..64).map(|_| rng.random_range(0.01..0.99)).collect();
        let mut direct = 0.0;
        for i in 0..64 {
            direct += if obs[i] == 1.0 { probs[i].ln() } else { (1.0 - probs[i]).ln() };
        }
        let ll = bernoulli_log_likelihood(&obs, &BernoulliFactors::new(probs).unwrap()).unwrap();
        assert!((ll - direct).abs() < 1e-12);
    }

    #[test]
    fn categorical_kl_cases() {
        let u = CategoricalDist::uniform(2);
        assert_eq!(categorical_kl(&u, &u).unwrap(), 0.0);
        let q = CategoricalDist::new(vec![1.0, 0.0]).unwrap();
        assert!((categorical_kl(&q, &u).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(categorical_kl(&u, &q), Err(DistributionError::InfiniteDivergence(1)));
    }

    #[test]
    fn categorical_kl_matches_brute_force() {
        let q = CategoricalDist::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let p = CategoricalDist::new(vec![0.25, 0.35, 0.15, 0.25]).unwrap();
        let brute = 0.1 * (0.1f64 / 0.25).ln()
            + 0.2 * (0.2f64 / 0.35).ln()
            + 0.3 * (0.3f64 / 0.15).ln()
            + 0.4 * (0.4f64 / 0.25).ln();
        assert!((categorical_kl(&q, &p).unwrap() - brute).abs() < 1e-15);
    }

    #[test]
    fn precision_softmax_cases() {
        assert_eq!(precision_softmax(&[3.0, -1.0, 7.0], 0.0, true).probs(), &[1.0 / 3.0; 3]);
        let p = precision_softmax(&[0.0, 2f64.ln()], 1.0, false);
        assert!((p.probs()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.probs()[1] - 2.0 / 3.0).abs() < 1e-15);
        let sharp = precision_softmax(&[1.0, 0.5, 2.0], 1e4, true);
        assert!((sharp.probs()[1] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(
            a in prop::collection::vec((-3.0f64..3.0, -4.0f64..4.0), 1..6),
            b in prop::collection::vec((-3.0f64..3.0, -4.0f64..4.0), 6),
        ) {
            let d = a.len();
            let q = DiagGaussian::new(a.iter().map(|x| x.0).collect(), a.iter().map(|x| x.1).collect()).unwrap();
            let p = DiagGaussian::new(b[..d].iter().map(|x| x.0).collect(), b[..d].iter().map(|x| x.1).collect()).unwrap();
            prop_assert!(kl_diag_gaussian(&q, &p).unwrap() >= 0.0);
            prop_assert!(kl_diag_gaussian(&q, &q).unwrap().abs() < 1e-12);
        }

        #[test]
        fn precision_softmax_is_normalized_and_argmax_consistent(
            values in prop::collection::vec(-5.0f64..5.0, 2..8),
            zeta in 0.01f64..10.0,
            negate in any::<bool>(),
        ) {
            let p = precision_softmax(&values, zeta, negate);
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let target = if negate { argmin(&values) } else { argmax(&values) };
            let best = p.probs()[p.argmax()];
            prop_assert!((p.probs()[target] - best).abs() < 1e-12);
        }
    }
}
