//! Exact tabular analysis of the epistemic value
//! `E_{P(o|s)Q(s)}[ln P(s|o) − ln Q(s)]`.
//!
//! Two deterministic experiments: mixing a sharp likelihood toward uniform
//! (epistemic value falls as the true posterior approaches `Q`), and sliding
//! the state prior away from `Q` under a nearly flat likelihood (epistemic
//! value falls as the posteriors drift apart).

use serde::Serialize;

/// Trials of the base binomial.
pub const BINOMIAL_TRIALS: u32 = 6;
pub const DEFAULT_STATES: usize = 30;
pub const DEFAULT_OBS: usize = 30;
/// Likelihood mixing weight used as the "high entropy" likelihood.
pub const HIGH_ENTROPY_MIX: f64 = 0.9;
/// Uniform mass mixed into a shifted prior so Bayes' rule never divides by 0.
pub const PRIOR_FLOOR: f64 = 1e-3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TabularError {
    #[error("binomial domain: n={n}, p={p}, k={k}")]
    Domain { n: u32, p: f64, k: u32 },
    #[error("binomial support of {support} does not fit {num_obs} observations")]
    SupportTooLarge { support: usize, num_obs: usize },
    #[error("observation {0} has zero evidence")]
    ZeroEvidence(usize),
    #[error("ln 0 at a visited cell (o={o}, s={s})")]
    Degenerate { o: usize, s: usize },
    #[error("shift {shift} exceeds the {states}-state support")]
    ShiftTooLarge { shift: usize, states: usize },
    #[error("invalid table: {0}")]
    Invalid(String),
}

pub fn binomial_pmf(n: u32, p: f64, k: u32) -> Result<f64, TabularError> {
    if k > n || !(0.0..=1.0).contains(&p) {
        return Err(TabularError::Domain { n, p, k });
    }
    let mut c = 1.0;
    for i in 0..k {
        c = c * f64::from(n - i) / f64::from(i + 1);
    }
    Ok(c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32))
}

fn base_binomial() -> Vec<f64> {
    (0..=BINOMIAL_TRIALS)
        .map(|k| binomial_pmf(BINOMIAL_TRIALS, 0.5, k).expect("valid"))
        .collect()
}

/// `rows × cols` row-major table; for a likelihood, rows are observations
/// and each column `P(·|s)` is a distribution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Table {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Table {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![1.0 / rows as f64; rows * cols],
        }
    }

    /// `(1 − t)·self + t·other`.
    pub fn mix(&self, other: &Table, t: f64) -> Table {
        Table {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| (1.0 - t) * a + t * b).collect(),
        }
    }
}

/// Column `s` holds the 7-point binomial starting at observation
/// `min(s, |O| − 7)`: it slides one step per state and then stays put.
pub fn build_sliding_likelihood(num_states: usize, num_obs: usize) -> Result<Table, TabularError> {
    let base = base_binomial();
    if num_obs < base.len() {
        return Err(TabularError::SupportTooLarge {
            support: base.len(),
            num_obs,
        });
    }
    let mut data = vec![0.0; num_obs * num_states];
    let last = num_obs - base.len();
    for s in 0..num_states {
        let off = s.min(last);
        for (k, p) in base.iter().enumerate() {
            data[(off + k) * num_states + s] = *p;
        }
    }
    Ok(Table {
        rows: num_obs,
        cols: num_states,
        data,
    })
}

/// The base binomial on states `0..=6` of an `n`-state axis.
pub fn binomial_over_states(n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for (i, p) in base_binomial().into_iter().enumerate().take(n) {
        v[i] = p;
    }
    v
}

/// Moves every entry `shift` states to the right; mass pushed past the last
/// state accumulates there.
pub fn shift_distribution(d: &[f64], shift: usize) -> Result<Vec<f64>, TabularError> {
    if shift >= d.len() {
        return Err(TabularError::ShiftTooLarge { shift, states: d.len() });
    }
    let mut out = vec![0.0; d.len()];
    for (i, p) in d.iter().enumerate() {
        out[(i + shift).min(d.len() - 1)] += p;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TabularWorld {
    /// `P(o|s)`, `|O| × |S|`.
    pub likelihood: Table,
    /// `P(s)`.
    pub prior: Vec<f64>,
    /// `Q(s|π)`.
    pub q: Vec<f64>,
}

fn check_simplex(v: &[f64], what: &str) -> Result<(), TabularError> {
    if v.iter().any(|p| !(*p >= 0.0)) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(TabularError::Invalid(format!("{what} is not a distribution")));
    }
    Ok(())
}

impl TabularWorld {
    pub fn new(likelihood: Table, prior: Vec<f64>, q: Vec<f64>) -> Result<Self, TabularError> {
        if prior.len() != likelihood.cols || q.len() != likelihood.cols {
            return Err(TabularError::Invalid("state counts differ".into()));
        }
        for s in 0..likelihood.cols {
            check_simplex(&likelihood.column(s), &format!("likelihood column {s}"))?;
        }
        check_simplex(&prior, "prior")?;
        check_simplex(&q, "q")?;
        Ok(Self { likelihood, prior, q })
    }

    pub fn num_states(&self) -> usize {
        self.likelihood.cols
    }

    pub fn num_obs(&self) -> usize {
        self.likelihood.rows
    }

    /// `P(o) = Σ_s P(o|s) P(s)`.
    pub fn evidence(&self, o: usize) -> f64 {
        (0..self.num_states()).map(|s| self.likelihood.get(o, s) * self.prior[s]).sum()
    }
}

/// `P(s|o) ∝ P(o|s) P(s)`.
pub fn true_posterior(world: &TabularWorld, o: usize) -> Result<Vec<f64>, TabularError> {
    let z = world.evidence(o);
    if z <= 0.0 {
        return Err(TabularError::ZeroEvidence(o));
    }
    Ok((0..world.num_states())
        .map(|s| world.likelihood.get(o, s) * world.prior[s] / z)
        .collect())
}

fn posteriors(world: &TabularWorld) -> Vec<Option<Vec<f64>>> {
    (0..world.num_obs()).map(|o| true_posterior(world, o).ok()).collect()
}

/// `Σ_s Σ_o P(o|s) Q(s) (ln P(s|o) − ln Q(s))`, skipping zero-weight cells.
pub fn epistemic_value(world: &TabularWorld) -> Result<f64, TabularError> {
    let post = posteriors(world);
    let mut ev = 0.0;
    for s in 0..world.num_states() {
        let q = world.q[s];
        if q == 0.0 {
            continue;
        }
        for (o, p) in post.iter().enumerate() {
            let w = world.likelihood.get(o, s) * q;
            if w == 0.0 {
                continue;
            }
            let ps = p.as_ref().map_or(0.0, |p| p[s]);
            if ps == 0.0 {
                return Err(TabularError::Degenerate { o, s });
            }
            ev += w * (ps.ln() - q.ln());
        }
    }
    Ok(ev)
}

/// `1 − TV(P(s|o), Q)` averaged over `o` with weights `P(o)`.
pub fn posterior_similarity(world: &TabularWorld) -> f64 {
    let mut total = 0.0;
    for o in 0..world.num_obs() {
        let w = world.evidence(o);
        if w == 0.0 {
            continue;
        }
        let p = true_posterior(world, o).expect("positive evidence");
        let tv: f64 = 0.5 * p.iter().zip(&world.q).map(|(a, b)| (a - b).abs()).sum::<f64>();
        total += w * (1.0 - tv);
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub param: f64,
    pub epistemic_value: f64,
    pub posterior_similarity: f64,
}

pub type ExperimentTrace = Vec<TraceRecord>;

fn record(step: usize, param: f64, world: &TabularWorld) -> Result<TraceRecord, TabularError> {
    Ok(TraceRecord {
        step,
        param,
        epistemic_value: epistemic_value(world)?,
        posterior_similarity: posterior_similarity(world),
    })
}

/// Prior = `Q` = binomial; the likelihood moves linearly from the sliding
/// binomial (`t = 0`) to uniform (`t = 1`).
pub fn run_experiment_uniformize(steps: usize) -> Result<ExperimentTrace, TabularError> {
    if steps < 2 {
        return Err(TabularError::Invalid("need at least 2 steps".into()));
    }
    let sharp = build_sliding_likelihood(DEFAULT_STATES, DEFAULT_OBS)?;
    let flat = Table::uniform(DEFAULT_OBS, DEFAULT_STATES);
    let q = binomial_over_states(DEFAULT_STATES);
    (0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            let world = TabularWorld::new(sharp.mix(&flat, t), q.clone(), q.clone())?;
            record(i, t, &world)
        })
        .collect()
}

/// `Q` stays binomial on states `0..=6`; the prior is `Q` translated by a
/// growing number of states (with a small uniform floor), under a nearly
/// uniform likelihood. `param` is the shift in states.
pub fn run_experiment_prior_shift(steps: usize) -> Result<ExperimentTrace, TabularError> {
    if steps < 2 {
        return Err(TabularError::Invalid("need at least 2 steps".into()));
    }
    let likelihood =
        build_sliding_likelihood(DEFAULT_STATES, DEFAULT_OBS)?.mix(&Table::uniform(DEFAULT_OBS, DEFAULT_STATES), HIGH_ENTROPY_MIX);
    let q = binomial_over_states(DEFAULT_STATES);
    let max_shift = DEFAULT_STATES - (BINOMIAL_TRIALS as usize + 1);
    (0..steps)
        .map(|i| {
            let shift = (i * max_shift + (steps - 1) / 2) / (steps - 1);
            let shifted = shift_distribution(&q, shift)?;
            let prior = shifted
                .iter()
                .map(|p| (1.0 - PRIOR_FLOOR) * p + PRIOR_FLOOR / DEFAULT_STATES as f64)
                .collect();
            let world = TabularWorld::new(likelihood.clone(), prior, q.clone())?;
            record(i, shift as f64, &world)
        })
        .collect()
}

/// Pearson correlation.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn write_trace_csv(trace: &[TraceRecord], w: impl std::io::Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in trace {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
