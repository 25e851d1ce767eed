use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Activation, AutodiffError, Parameter, Tape, Tensor, Var};

/// One output head of a [`Network`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub dim: usize,
    pub activation: Activation,
}

/// Shape of a dense network: a hidden trunk feeding one or more heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub heads: Vec<HeadSpec>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), AutodiffError> {
        if self.input_dim == 0 {
            return Err(AutodiffError::Shape("network input_dim is 0".into()));
        }
        if self.heads.is_empty() {
            return Err(AutodiffError::Shape("network has no output head".into()));
        }
        if self.hidden_dims.iter().chain(self.heads.iter().map(|h| &h.dim)).any(|d| *d == 0) {
            return Err(AutodiffError::Shape("zero-width layer".into()));
        }
        Ok(())
    }
}

/// Fully connected layer `act(x·W + b)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
    pub activation: Activation,
}

impl Dense {
    pub fn new(
        name: &str,
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = if init_std == 0.0 {
            Parameter::zeros(format!("{name}.weight"), vec![fan_in, fan_out])
        } else {
            let normal = Normal::new(0.0, init_std).expect("finite std");
            let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
            Parameter::new(
                format!("{name}.weight"),
                Tensor::new(vec![fan_in, fan_out], data).expect("shape"),
            )
        };
        Self {
            weight,
            bias: Parameter::zeros(format!("{name}.bias"), vec![fan_out]),
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, AutodiffError> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let z = tape.affine(x, w, b)?;
        Ok(tape.activation(z, self.activation))
    }

    pub fn eval(&self, x: &Tensor) -> Result<Tensor, AutodiffError> {
        if x.last_dim() != self.fan_in() {
            return Err(AutodiffError::Shape(format!(
                "{}: input width {} vs {}",
                self.weight.name(),
                x.last_dim(),
                self.fan_in()
            )));
        }
        let rows = x.rows();
        let mut out = kernels::affine(
            x.data(),
            rows,
            self.weight.value().data(),
            self.bias.value().data(),
            self.fan_in(),
            self.fan_out(),
        );
        self.activation.apply(&mut out, self.fan_out());
        Tensor::new(vec![rows, self.fan_out()], out)
    }
}

/// Tape outputs of a forward pass: every hidden layer, then every head.
#[derive(Clone, Debug)]
pub struct Forward {
    pub hidden: Vec<Var>,
    pub heads: Vec<Var>,
}

/// A dense trunk with named heads.
#[derive(Clone, Debug)]
pub struct Network {
    name: String,
    spec: NetworkSpec,
    trunk: Vec<Dense>,
    heads: Vec<Dense>,
}

impl Network {
    /// Hidden layers get He-normal weights; heads get `N(0, 1/fan_in)`
    /// scaled by `head_gain` (0 gives zero-initialized heads).
    pub fn new(
        name: &str,
        spec: NetworkSpec,
        head_gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self, AutodiffError> {
        spec.validate()?;
        let mut trunk = Vec::with_capacity(spec.hidden_dims.len());
        let mut fan_in = spec.input_dim;
        for (i, &h) in spec.hidden_dims.iter().enumerate() {
            let std = (2.0 / fan_in as f64).sqrt();
            trunk.push(Dense::new(&format!("{name}.fc{i}"), fan_in, h, spec.hidden_activation, std, rng));
            fan_in = h;
        }
        let heads = spec
            .heads
            .iter()
            .map(|hs| {
                let std = head_gain / (fan_in as f64).sqrt();
                Dense::new(&format!("{name}.{}", hs.name), fan_in, hs.dim, hs.activation, std, rng)
            })
            .collect();
        Ok(Self {
            name: name.to_string(),
            spec,
            trunk,
            heads,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn head_index(&self, head: &str) -> Option<usize> {
        self.spec.heads.iter().position(|h| h.name == head)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Forward, AutodiffError> {
        let mut hidden = Vec::with_capacity(self.trunk.len());
        let mut h = x;
        for layer in &self.trunk {
            h = layer.forward(tape, h)?;
            hidden.push(h);
        }
        let heads = self
            .heads
            .iter()
            .map(|l| l.forward(tape, h))
            .collect::<Result<_, _>>()?;
        Ok(Forward { hidden, heads })
    }

    /// Tape-free forward returning every hidden layer and every head.
    pub fn eval_all(&self, x: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>), AutodiffError> {
        let mut hidden = Vec::with_capacity(self.trunk.len());
        let mut h = x.clone();
        for layer in &self.trunk {
            h = layer.eval(&h)?;
            hidden.push(h.clone());
        }
        let heads = self.heads.iter().map(|l| l.eval(&h)).collect::<Result<_, _>>()?;
        Ok((hidden, heads))
    }

    /// Tape-free forward returning only the heads.
    pub fn eval(&self, x: &Tensor) -> Result<Vec<Tensor>, AutodiffError> {
        let mut h = x.clone();
        for layer in &self.trunk {
            h = layer.eval(&h)?;
        }
        self.heads.iter().map(|l| l.eval(&h)).collect()
    }

    /// Labels matching [`Network::eval_all`]'s outputs, in order.
    pub fn layer_labels(&self) -> Vec<String> {
        (0..self.trunk.len())
            .map(|i| format!("{}.fc{i}", self.name))
            .chain(self.spec.heads.iter().map(|h| format!("{}.{}", self.name, h.name)))
            .collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.trunk
            .iter()
            .chain(&self.heads)
            .flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.trunk
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Copies every weight of `source` into `self` (a hard target update).
    pub fn copy_from(&mut self, source: &Network) -> Result<(), AutodiffError> {
        if self.spec != source.spec {
            return Err(AutodiffError::Shape(format!(
                "cannot sync {} from {}: architectures differ",
                self.name, source.name
            )));
        }
        for (dst, src) in self.params_mut().zip(source.params()) {
            dst.assign(src.value())?;
        }
        Ok(())
    }

    /// A copy under a different name (parameter names follow).
    pub fn renamed(&self, name: &str, rng: &mut impl Rng) -> Result<Network, AutodiffError> {
        let mut out = Network::new(name, self.spec.clone(), 1.0, rng)?;
        out.copy_from(self)?;
        Ok(out)
    }
}
