//! Linear centered kernel alignment between layer activations.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tensor};
use rand::Rng;

use crate::env::{Action, DSpritesEnv, EnvConfig, EnvError, Observation, NUM_ACTIONS};
use crate::nets::{obs_batch, AgentNetworks, Network};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CkaError {
    #[error("need at least 2 examples to center, got {0}")]
    TooFewExamples(usize),
    #[error("example counts differ: {0} vs {1}")]
    ExampleMismatch(usize, usize),
    #[error("unknown layer {0}")]
    UnknownLayer(String),
    #[error("empty probe set")]
    EmptyProbe,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// `n × p` activations of one layer (row-major).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMatrix {
    pub label: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub centered: bool,
}

impl ActivationMatrix {
    pub fn new(label: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "activation matrix shape");
        Self {
            label: label.into(),
            rows,
            cols,
            data,
            centered: false,
        }
    }

    fn from_tensor(label: String, t: Tensor) -> Self {
        let (rows, cols) = (t.rows(), t.last_dim());
        Self::new(label, rows, cols, t.into_data())
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for r in self.data.chunks(self.cols.max(1)) {
            for (acc, v) in m.iter_mut().zip(r) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.rows as f64);
        m
    }
}

pub fn center_columns(x: &ActivationMatrix) -> Result<ActivationMatrix, CkaError> {
    if x.rows < 2 {
        return Err(CkaError::TooFewExamples(x.rows));
    }
    let mut means = x.column_means();
    // Constant columns center to exact zeros; the float mean may differ from
    // the shared value in the last bit.
    for (c, m) in means.iter_mut().enumerate() {
        let first = x.data[c];
        if (0..x.rows).all(|r| x.data[r * x.cols + c] == first) {
            *m = first;
        }
    }
    let mut out = x.clone();
    for r in out.data.chunks_mut(x.cols.max(1)) {
        for (v, m) in r.iter_mut().zip(&means) {
            *v -= m;
        }
    }
    out.centered = true;
    Ok(out)
}

/// `aᵀb` for row-major `n × p` and `n × q`, as `p × q`.
fn cross(a: &ActivationMatrix, b: &ActivationMatrix) -> Vec<f64> {
    let mut out = vec![0.0; a.cols * b.cols];
    crate::autodiff::kernels::gemm(a.cols, a.rows, b.cols, &a.data, true, &b.data, false, 0.0, &mut out);
    out
}

fn frob_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `‖yᵀx‖²_F / (‖xᵀx‖_F · ‖yᵀy‖_F)`, centering inputs that are not already
/// centered. Returns 0 when either activation set is identically zero.
pub fn linear_cka(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64, CkaError> {
    if x.rows != y.rows {
        return Err(CkaError::ExampleMismatch(x.rows, y.rows));
    }
    let xc;
    let x = if x.centered {
        x
    } else {
        xc = center_columns(x)?;
        &xc
    };
    let yc;
    let y = if y.centered {
        y
    } else {
        yc = center_columns(y)?;
        &yc
    };
    let dx = frob_sq(&cross(x, x)).sqrt();
    let dy = frob_sq(&cross(y, y)).sqrt();
    if dx == 0.0 || dy == 0.0 {
        return Ok(0.0);
    }
    // A fixed operand order makes the score exactly symmetric.
    let swap = (y.cols, &y.data).partial_cmp(&(x.cols, &x.data)) == Some(std::cmp::Ordering::Less);
    let num = if swap { frob_sq(&cross(y, x)) } else { frob_sq(&cross(x, y)) };
    Ok(num / (dx * dy))
}

/// Symmetric matrix of pairwise CKA scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CkaMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        Some(self.values[i][j])
    }
}

/// Pairwise CKA after centering. A zero-variance matrix scores 1 against
/// itself and 0 against everything else.
pub fn cka_matrix(mats: &[ActivationMatrix]) -> Result<CkaMatrix, CkaError> {
    let centered = mats.iter().map(center_columns).collect::<Result<Vec<_>, _>>()?;
    let n = centered.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        values[i][i] = 1.0;
        for j in i + 1..n {
            let v = linear_cka(&centered[i], &centered[j])?;
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    Ok(CkaMatrix {
        labels: mats.iter().map(|m| m.label.clone()).collect(),
        values,
    })
}

/// Post-activation outputs of every layer of `net`, labelled
/// `"{prefix}{layer}"`.
fn capture_network(net: &Network, input: &Tensor, prefix: &str) -> Result<Vec<ActivationMatrix>, CkaError> {
    let (hidden, heads) = net.eval_all(input)?;
    Ok(net
        .layer_labels()
        .into_iter()
        .zip(hidden.into_iter().chain(heads))
        .map(|(label, t)| ActivationMatrix::from_tensor(format!("{prefix}{label}"), t))
        .collect())
}

/// `n` observations from random-policy episodes, starting each from a
/// uniform reset.
pub fn sample_probe(env: &EnvConfig, n: usize, rng: &mut impl Rng) -> Result<Vec<Observation>, EnvError> {
    let mut env = DSpritesEnv::new(env.clone())?;
    let mut out = Vec::with_capacity(n);
    let mut obs = env.reset(rng);
    while out.len() < n {
        out.push(obs.clone());
        let a = Action::from_index(rng.random_range(0..NUM_ACTIONS)).expect("in range");
        let step = env.step(a)?;
        obs = if step.done { env.reset(rng) } else { step.observation };
    }
    Ok(out)
}

/// Every layer label [`capture_activations`] can produce for `nets`.
pub fn available_layers(nets: &AgentNetworks) -> Vec<String> {
    [&nets.encoder, &nets.transition, &nets.critic, &nets.policy, &nets.q_net]
        .into_iter()
        .flatten()
        .flat_map(Network::layer_labels)
        .collect()
}

/// Runs the probe set through the agent and records each layer.
///
/// Encoder layers see the observations; the transition, critic and policy
/// see the encoder mean (the transition with action 0 one-hot, so every
/// probe is pushed through the same slice of the model). The DQN network
/// sees the observations. `layers = None` captures everything.
pub fn capture_activations(
    nets: &AgentNetworks,
    probe: &[Observation],
    layers: Option<&[String]>,
    prefix: &str,
) -> Result<Vec<ActivationMatrix>, CkaError> {
    if probe.is_empty() {
        return Err(CkaError::EmptyProbe);
    }
    if let Some(sel) = layers {
        let known = available_layers(nets);
        if let Some(bad) = sel.iter().find(|l| !known.contains(l)) {
            return Err(CkaError::UnknownLayer(bad.clone()));
        }
    }
    let x = obs_batch(probe)?;
    let mut out = Vec::new();
    if let Some(enc) = &nets.encoder {
        out.extend(capture_network(enc, &x, prefix)?);
        let means = enc.eval(&x)?.remove(0);
        if let Some(tr) = &nets.transition {
            let mut data = Vec::with_capacity(means.rows() * (nets.latent_dim + nets.num_actions));
            for r in 0..means.rows() {
                data.extend_from_slice(means.row(r));
                data.push(1.0);
                data.extend(std::iter::repeat_n(0.0, nets.num_actions - 1));
            }
            let input = Tensor::matrix(means.rows(), nets.latent_dim + nets.num_actions, data)?;
            out.extend(capture_network(tr, &input, prefix)?);
        }
        for net in [&nets.critic, &nets.policy].into_iter().flatten() {
            out.extend(capture_network(net, &means, prefix)?);
        }
    }
    if let Some(q) = &nets.q_net {
        out.extend(capture_network(q, &x, prefix)?);
    }
    if let Some(sel) = layers {
        out.retain(|m| sel.iter().any(|l| format!("{prefix}{l}") == m.label));
    }
    Ok(out)
}
