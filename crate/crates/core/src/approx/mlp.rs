use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{sigmoid, ParamBlock, Parametric, StateActionFunction, StateFunction};
use crate::error::{arg, Error, Result};
use crate::Rng;

/// `sigma(x) * (1 + x * (1 - sigma(x)))`, the derivative of `x * sigma(x)`.
pub fn dsilu(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn dsilu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Dsilu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Dsilu => dsilu(z),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Dsilu => dsilu_derivative(z),
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

/// How the last linear layer is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Scalar,
    Vector(usize),
    /// Mean followed by raw log standard deviation, `2 * n` outputs.
    Gaussian(usize),
    /// Unnormalized log-probabilities.
    Categorical(usize),
}

impl Head {
    pub fn output_dim(self) -> usize {
        match self {
            Head::Scalar => 1,
            Head::Vector(n) | Head::Categorical(n) => n,
            Head::Gaussian(n) => 2 * n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

impl MlpSpec {
    /// Two hidden layers of 64 dSiLU units.
    pub fn desk(input_dim: usize, head: Head) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            activation: Activation::Dsilu,
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return arg("MLP input dimension must be positive");
        }
        if self.hidden.is_empty() {
            return arg("an MLP needs at least one hidden layer");
        }
        if self.hidden.contains(&0) || self.head.output_dim() == 0 {
            return arg("layer widths must be at least 1");
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every linear layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &w in self.hidden.iter().chain(std::iter::once(&self.head.output_dim())) {
            dims.push((prev, w));
            prev = w;
        }
        dims
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Intermediate values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Layer inputs; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// Fully connected network; weights stored `[out][in]` row-major per layer,
/// followed by that layer's biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(spec: MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::with_capacity(spec.n_params());
        for (fan_in, fan_out) in spec.layer_dims() {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-a..=a)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { spec, params })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let params = vec![0.0; spec.n_params()];
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.n_params() {
            return arg(format!(
                "expected {} parameters, got {}",
                spec.n_params(),
                params.len()
            ));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.output)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<MlpCache> {
        if input.len() != self.spec.input_dim {
            return arg(format!(
                "MLP expects input of size {}, got {}",
                self.spec.input_dim,
                input.len()
            ));
        }
        let dims = self.spec.layer_dims();
        let n_layers = dims.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        let mut current = input.to_vec();
        let mut offset = 0;
        for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    b[o] + w[o * fan_in..(o + 1) * fan_in]
                        .iter()
                        .zip(&current)
                        .map(|(wi, xi)| wi * xi)
                        .sum::<f64>()
                })
                .collect();
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: Some(layer),
                    what: "forward pass produced a non-finite pre-activation".into(),
                });
            }
            inputs.push(std::mem::take(&mut current));
            if layer + 1 < n_layers {
                current = z.iter().map(|v| self.spec.activation.apply(*v)).collect();
                pre.push(z);
            } else {
                current = z;
            }
        }
        Ok(MlpCache {
            inputs,
            pre,
            output: current,
        })
    }

    /// Reverse pass: adds `d loss / d params` into `grad` given `d loss / d output`,
    /// and returns `d loss / d input`.
    pub fn backward(&self, cache: &MlpCache, d_output: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        let dims = self.spec.layer_dims();
        if d_output.len() != dims.last().map(|d| d.1).unwrap_or(0) {
            return arg("output gradient has the wrong size");
        }
        let mut offsets = Vec::with_capacity(dims.len());
        let mut offset = 0;
        for (i, o) in &dims {
            offsets.push(offset);
            offset += i * o + o;
        }
        let mut delta = d_output.to_vec();
        for layer in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[layer];
            let base = offsets[layer];
            let x = &cache.inputs[layer];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[base + o * fan_in..base + (o + 1) * fan_in];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
                grad[base + fan_in * fan_out + o] += d;
            }
            let w = &self.params[base..base + fan_in * fan_out];
            let mut d_in = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (di, wi) in d_in.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *di += d * wi;
                }
            }
            if layer > 0 {
                let z = &cache.pre[layer - 1];
                for (di, zi) in d_in.iter_mut().zip(z) {
                    *di *= self.spec.activation.derivative(*zi);
                }
            }
            if d_in.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: Some(layer),
                    what: "backward pass produced a non-finite gradient".into(),
                });
            }
            delta = d_in;
        }
        Ok(delta)
    }

    /// Gradient of `sum_i loss(forward(inputs[i]))`, where `loss` returns its
    /// value and its derivative with respect to the network output.
    pub fn grad<F>(&self, inputs: &[Vec<f64>], loss: F) -> Result<(f64, Vec<f64>)>
    where
        F: Fn(&[f64]) -> (f64, Vec<f64>),
    {
        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        for input in inputs {
            let cache = self.forward_cached(input)?;
            let (value, d_out) = loss(&cache.output);
            if !value.is_finite() {
                return Err(Error::Numeric {
                    layer: None,
                    what: "loss is not finite".into(),
                });
            }
            total += value;
            self.backward(&cache, &d_out, &mut grad)?;
        }
        Ok((total, grad))
    }
}

impl Parametric for Mlp {
    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn manifest(&self) -> Vec<ParamBlock> {
        self.spec
            .layer_dims()
            .iter()
            .enumerate()
            .flat_map(|(l, (i, o))| {
                [
                    ParamBlock::new(format!("w_{l}"), vec![*o, *i]),
                    ParamBlock::new(format!("b_{l}"), vec![*o]),
                ]
            })
            .collect()
    }
}

/// MLP-backed `r(x)` or `V(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpStateFn {
    pub mlp: Mlp,
}

impl MlpStateFn {
    pub fn new(state_dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(MlpSpec::desk(state_dim, Head::Scalar), rng)?,
        })
    }
}

impl Parametric for MlpStateFn {
    fn params(&self) -> &[f64] {
        self.mlp.params()
    }
    fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }
    fn manifest(&self) -> Vec<ParamBlock> {
        self.mlp.manifest()
    }
}

impl StateFunction<Vec<f64>> for MlpStateFn {
    fn eval(&self, x: &Vec<f64>) -> f64 {
        self.mlp.forward(x).map(|o| o[0]).unwrap_or(f64::NAN)
    }

    fn backprop(&self, x: &Vec<f64>, upstream: f64, grad: &mut [f64]) {
        if let Ok(cache) = self.mlp.forward_cached(x) {
            // a failure here leaves a non-finite loss upstream, which the trainer reports
            let _ = self.mlp.backward(&cache, &[upstream], grad);
        }
    }

    fn input_grad(&self, x: &Vec<f64>) -> Result<Vec<f64>> {
        let cache = self.mlp.forward_cached(x)?;
        let mut scratch = vec![0.0; self.mlp.n_params()];
        self.mlp.backward(&cache, &[1.0], &mut scratch)
    }
}

/// MLP-backed `Q(x, u)` on the concatenated input `[x, u]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpStateActionFn {
    pub mlp: Mlp,
    state_dim: usize,
}

impl MlpStateActionFn {
    pub fn new(state_dim: usize, action_dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(MlpSpec::desk(state_dim + action_dim, Head::Scalar), rng)?,
            state_dim,
        })
    }

    pub fn from_mlp(mlp: Mlp, state_dim: usize) -> Result<Self> {
        if mlp.spec().head != Head::Scalar || mlp.spec().input_dim <= state_dim {
            return arg("Q network needs a scalar head and room for the action input");
        }
        Ok(Self { mlp, state_dim })
    }

    fn input(x: &[f64], u: &[f64]) -> Vec<f64> {
        x.iter().chain(u).copied().collect()
    }
}

impl Parametric for MlpStateActionFn {
    fn params(&self) -> &[f64] {
        self.mlp.params()
    }
    fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }
    fn manifest(&self) -> Vec<ParamBlock> {
        self.mlp.manifest()
    }
}

impl StateActionFunction<Vec<f64>, Vec<f64>> for MlpStateActionFn {
    fn eval(&self, x: &Vec<f64>, u: &Vec<f64>) -> f64 {
        self.mlp
            .forward(&Self::input(x, u))
            .map(|o| o[0])
            .unwrap_or(f64::NAN)
    }

    fn backprop(&self, x: &Vec<f64>, u: &Vec<f64>, upstream: f64, grad: &mut [f64]) {
        if let Ok(cache) = self.mlp.forward_cached(&Self::input(x, u)) {
            let _ = self.mlp.backward(&cache, &[upstream], grad);
        }
    }

    fn action_grad(&self, x: &Vec<f64>, u: &Vec<f64>) -> Result<Vec<f64>> {
        let cache = self.mlp.forward_cached(&Self::input(x, u))?;
        let mut scratch = vec![0.0; self.mlp.n_params()];
        let d_in = self.mlp.backward(&cache, &[1.0], &mut scratch)?;
        Ok(d_in[self.state_dim..].to_vec())
    }
}
