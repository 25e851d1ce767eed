use std::io::Write;
use std::ops::Range;

use serde::Serialize;

use crate::env::NUM_ACTIONS;
use crate::nets::AgentKind;
use crate::objectives::VfeBreakdown;

pub const METRICS_HEADER: [&str; 16] = [
    "iter",
    "agent",
    "vfe",
    "complexity",
    "accuracy",
    "action_kl",
    "critic_loss",
    "ep_reward",
    "cum_reward",
    "entropy_prior",
    "epsilon",
    "a0",
    "a1",
    "a2",
    "a3",
    "crashed",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Episode {
    /// Iteration count at which the episode ended.
    pub end: u64,
    pub reward: f64,
    pub length: u32,
}

/// Everything recorded during a training run, one entry per iteration
/// unless noted.
#[derive(Clone, Debug, Serialize)]
pub struct RunMetrics {
    pub agent: AgentKind,
    pub actions: Vec<u8>,
    pub explored: Vec<bool>,
    /// Entropy of `σ[−ζG]` at the visited state (NaN without a critic).
    pub entropy_prior: Vec<f64>,
    pub epsilon: Vec<f64>,
    /// `(iteration, breakdown)` per learning step.
    pub vfe: Vec<(u64, VfeBreakdown)>,
    pub critic_loss: Vec<(u64, f64)>,
    pub episodes: Vec<Episode>,
    pub crashed: bool,
    pub crash_reason: Option<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl RunMetrics {
    pub fn new(agent: AgentKind) -> Self {
        Self {
            agent,
            actions: Vec::new(),
            explored: Vec::new(),
            entropy_prior: Vec::new(),
            epsilon: Vec::new(),
            vfe: Vec::new(),
            critic_loss: Vec::new(),
            episodes: Vec::new(),
            crashed: false,
            crash_reason: None,
        }
    }

    pub fn iterations(&self) -> u64 {
        self.actions.len() as u64
    }

    /// The last `n` iterations (or all of them if fewer).
    pub fn tail(&self, n: u64) -> Range<u64> {
        self.iterations().saturating_sub(n)..self.iterations()
    }

    /// The first `n` iterations.
    pub fn head(&self, n: u64) -> Range<u64> {
        0..n.min(self.iterations())
    }

    pub fn histogram(&self, range: Range<u64>) -> [u64; NUM_ACTIONS] {
        let mut h = [0; NUM_ACTIONS];
        for &a in &self.actions[range.start as usize..range.end as usize] {
            h[a as usize] += 1;
        }
        h
    }

    pub fn cumulative_reward(&self) -> f64 {
        self.episodes.iter().map(|e| e.reward).sum()
    }

    /// Mean reward of episodes that ended inside `range`.
    pub fn mean_episode_reward(&self, range: Range<u64>) -> Option<f64> {
        mean(
            self.episodes
                .iter()
                .filter(|e| e.end > range.start && e.end <= range.end)
                .map(|e| e.reward),
        )
    }

    pub fn mean_vfe(&self, range: Range<u64>) -> Option<f64> {
        mean(self.vfe.iter().filter(|(i, _)| range.contains(i)).map(|(_, v)| v.total))
    }

    fn mean_vfe_breakdown(&self, range: Range<u64>) -> Option<VfeBreakdown> {
        let rows: Vec<_> = self.vfe.iter().filter(|(i, _)| range.contains(i)).map(|(_, v)| v).collect();
        let n = rows.len() as f64;
        (n > 0.0).then(|| VfeBreakdown {
            total: rows.iter().map(|v| v.total).sum::<f64>() / n,
            complexity: rows.iter().map(|v| v.complexity).sum::<f64>() / n,
            accuracy: rows.iter().map(|v| v.accuracy).sum::<f64>() / n,
            action_kl: rows.iter().map(|v| v.action_kl).sum::<f64>() / n,
        })
    }

    pub fn mean_critic_loss(&self, range: Range<u64>) -> Option<f64> {
        mean(self.critic_loss.iter().filter(|(i, _)| range.contains(i)).map(|(_, v)| *v))
    }

    pub fn mean_entropy_prior(&self, range: Range<u64>) -> Option<f64> {
        mean(
            self.entropy_prior[range.start as usize..range.end as usize]
                .iter()
                .copied()
                .filter(|v| v.is_finite()),
        )
    }

    /// `(modal action, its frequency)` inside `range`.
    pub fn modal_action(&self, range: Range<u64>) -> (usize, f64) {
        let len = (range.end - range.start).max(1) as f64;
        let h = self.histogram(range);
        let (a, &c) = h.iter().enumerate().max_by_key(|(_, c)| **c).expect("non-empty");
        (a, c as f64 / len)
    }

    pub fn explored_fraction(&self, range: Range<u64>) -> f64 {
        let slice = &self.explored[range.start as usize..range.end as usize];
        slice.iter().filter(|&&e| e).count() as f64 / slice.len().max(1) as f64
    }

    /// One CSV row summarizing iterations in `range`.
    pub fn row(&self, range: Range<u64>) -> Vec<String> {
        let f = |v: Option<f64>| v.unwrap_or(f64::NAN).to_string();
        let vfe = self.mean_vfe_breakdown(range.clone());
        let hist = self.histogram(0..range.end);
        let eps = range
            .end
            .checked_sub(1)
            .and_then(|i| self.epsilon.get(i as usize).copied());
        let cum: f64 = self.episodes.iter().filter(|e| e.end <= range.end).map(|e| e.reward).sum();
        let mut row = vec![
            range.end.to_string(),
            self.agent.as_str().to_string(),
            f(vfe.map(|v| v.total)),
            f(vfe.map(|v| v.complexity)),
            f(vfe.map(|v| v.accuracy)),
            f(vfe.map(|v| v.action_kl)),
            f(self.mean_critic_loss(range.clone())),
            f(self.mean_episode_reward(range.clone())),
            cum.to_string(),
            f(self.mean_entropy_prior(range)),
            f(eps),
        ];
        row.extend(hist.iter().map(u64::to_string));
        row.push(u8::from(self.crashed).to_string());
        row
    }
}

/// Streams metric rows to CSV, flushing after each one so that a crash
/// leaves every completed period on disk.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
    last: u64,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> csv::Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        inner.write_record(METRICS_HEADER)?;
        inner.flush()?;
        Ok(Self { inner, last: 0 })
    }

    /// Writes the row covering everything since the previous call.
    pub fn log(&mut self, metrics: &RunMetrics) -> csv::Result<()> {
        let end = metrics.iterations();
        if end == self.last && !metrics.crashed {
            return Ok(());
        }
        self.inner.write_record(metrics.row(self.last..end))?;
        self.inner.flush()?;
        self.last = end;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner.into_inner().unwrap_or_else(|e| panic!("flushed writer: {}", e.error()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunMetrics {
        let mut m = RunMetrics::new(AgentKind::Chmm);
        for i in 0..10u64 {
            m.actions.push((i % 3) as u8);
            m.explored.push(i < 5);
            m.entropy_prior.push(0.5);
            m.epsilon.push(1.0 / (i + 1) as f64);
            if i >= 2 {
                m.vfe.push((
                    i,
                    VfeBreakdown {
                        total: i as f64,
                        complexity: 1.0,
                        accuracy: i as f64 - 1.0,
                        action_kl: 0.0,
                    },
                ));
            }
        }
        m.episodes.push(Episode { end: 4, reward: -1.0, length: 4 });
        m.episodes.push(Episode { end: 9, reward: 0.5, length: 5 });
        m
    }

    #[test]
    fn windows_and_histograms() {
        let m = sample();
        assert_eq!(m.histogram(0..10), [4, 3, 3, 0]);
        assert_eq!(m.histogram(0..10).iter().sum::<u64>(), m.iterations());
        assert_eq!(m.cumulative_reward(), -0.5);
        assert_eq!(m.mean_episode_reward(m.tail(5)), Some(0.5));
        assert_eq!(m.mean_episode_reward(0..3), None);
        assert_eq!(m.mean_vfe(0..4), Some(2.5));
        assert_eq!(m.modal_action(0..10), (0, 0.4));
        assert_eq!(m.explored_fraction(0..10), 0.5);
        assert_eq!(m.tail(100), 0..10);
    }

    #[test]
    fn csv_rows_cover_periods() {
        let m = sample();
        let mut w = MetricsWriter::new(Vec::new()).unwrap();
        let mut partial = m.clone();
        partial.actions.truncate(5);
        partial.explored.truncate(5);
        partial.entropy_prior.truncate(5);
        partial.epsilon.truncate(5);
        partial.episodes.truncate(1);
        w.log(&partial).unwrap();
        w.log(&m).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER.join(","));
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("5,chmm,3,1,2,0,NaN,-1,-1,0.5,0.2,2,2,1,0,0"), "{}", lines[1]);
        assert!(lines[2].starts_with("10,chmm,7,1,6,0,NaN,0.5,-0.5,0.5,0.1,4,3,3,0,0"), "{}", lines[2]);
    }
}
