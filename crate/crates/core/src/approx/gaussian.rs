use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    Expectation, Head, LogTarget, Mlp, MlpSpec, ModelMap, ParamBlock, Parametric, PolicyMap,
};
use crate::error::{arg, Result};
use crate::mdp::Policy;
use crate::Rng;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Reparameterized draw `y = mean + exp(log_std) * eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct RSample {
    pub y: Vec<f64>,
    pub eps: Vec<f64>,
}

/// Diagonal Gaussian read from `[mean, raw_log_std]` network outputs. The
/// raw log standard deviation is clamped to `[LOG_STD_MIN, LOG_STD_MAX]`;
/// gradients do not flow through a clamped coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    clamped: Vec<bool>,
}

impl GaussianHead {
    pub fn from_output(output: &[f64]) -> Self {
        let n = output.len() / 2;
        let mean = output[..n].to_vec();
        let raw = &output[n..2 * n];
        let log_std = raw.iter().map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        let clamped = raw.iter().map(|v| !(LOG_STD_MIN..=LOG_STD_MAX).contains(v)).collect();
        Self { mean, log_std, clamped }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, y: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(y)
            .map(|((m, s), yi)| {
                let z = (yi - m) / s.exp();
                -0.5 * z * z - s - HALF_LN_2PI
            })
            .sum()
    }

    /// `d log_prob(y) / d output`, laid out like the raw network output.
    pub fn log_prob_output_grad(&self, y: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut d = vec![0.0; 2 * n];
        for i in 0..n {
            let var = (2.0 * self.log_std[i]).exp();
            let diff = y[i] - self.mean[i];
            d[i] = diff / var;
            if !self.clamped[i] {
                d[n + i] = diff * diff / var - 1.0;
            }
        }
        d
    }

    /// `d log_prob(y) / d y`.
    pub fn sample_grad(&self, y: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(y)
            .map(|((m, s), yi)| -(yi - m) / (2.0 * s).exp())
            .collect()
    }

    pub fn rsample(&self, rng: &mut Rng) -> RSample {
        let eps: Vec<f64> = (0..self.dim()).map(|_| StandardNormal.sample(rng)).collect();
        let y = self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(&eps)
            .map(|((m, s), e)| m + s.exp() * e)
            .collect();
        RSample { y, eps }
    }

    /// Pathwise estimate of `E[ln N(y) - target(y)]` from `k` draws. Returns the
    /// estimate and its gradient with respect to the raw network output.
    ///
    /// Under `y = mean + sigma * eps` the log-density equals
    /// `-sum(log_std) - |eps|^2 / 2 - const`, so it contributes `-1` per log
    /// standard deviation and nothing to the mean.
    pub fn improvement(&self, target: &dyn LogTarget<Vec<f64>>, k: usize, rng: &mut Rng) -> (f64, Vec<f64>) {
        let n = self.dim();
        let k = k.max(1);
        let mut value = 0.0;
        let mut d = vec![0.0; 2 * n];
        for _ in 0..k {
            let s = self.rsample(rng);
            value += self.log_prob(&s.y) - target.log_target(&s.y);
            let g = target.grad(&s.y);
            for i in 0..n {
                d[i] -= g[i];
                if !self.clamped[i] {
                    d[n + i] += -1.0 - g[i] * self.log_std[i].exp() * s.eps[i];
                }
            }
        }
        let scale = 1.0 / k as f64;
        d.iter_mut().for_each(|v| *v *= scale);
        (value * scale, d)
    }
}

/// Gaussian policy `b(u | x)` with an MLP producing mean and log standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mlp: Mlp,
}

impl GaussianPolicy {
    pub fn new(state_dim: usize, action_dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(MlpSpec::desk(state_dim, Head::Gaussian(action_dim)), rng)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        match mlp.spec().head {
            Head::Gaussian(_) => Ok(Self { mlp }),
            _ => arg("Gaussian policy needs a Gaussian head"),
        }
    }

    pub fn head(&self, x: &[f64]) -> Result<GaussianHead> {
        Ok(GaussianHead::from_output(&self.mlp.forward(x)?))
    }
}

impl Parametric for GaussianPolicy {
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

impl Policy<Vec<f64>, Vec<f64>> for GaussianPolicy {
    fn sample_action(&self, x: &Vec<f64>, rng: &mut Rng) -> Vec<f64> {
        match self.head(x) {
            Ok(h) => h.rsample(rng).y,
            Err(_) => vec![f64::NAN; self.mlp.spec().head.output_dim() / 2],
        }
    }
}

impl PolicyMap<Vec<f64>, Vec<f64>> for GaussianPolicy {
    fn log_prob(&self, x: &Vec<f64>, u: &Vec<f64>) -> f64 {
        self.head(x).map(|h| h.log_prob(u)).unwrap_or(f64::NAN)
    }

    fn backprop_log_prob(&self, x: &Vec<f64>, u: &Vec<f64>, upstream: f64, grad: &mut [f64]) {
        if let Ok(cache) = self.mlp.forward_cached(x) {
            let h = GaussianHead::from_output(&cache.output);
            let d: Vec<f64> = h.log_prob_output_grad(u).iter().map(|v| v * upstream).collect();
            let _ = self.mlp.backward(&cache, &d, grad);
        }
    }

    fn log_prob_action_grad(&self, x: &Vec<f64>, u: &Vec<f64>) -> Result<Vec<f64>> {
        Ok(self.head(x)?.sample_grad(u))
    }

    fn expectation_points(&self, x: &Vec<f64>, mode: Expectation, rng: &mut Rng) -> Result<Vec<(Vec<f64>, f64)>> {
        let k = match mode {
            Expectation::Samples(k) if k > 0 => k,
            _ => return arg("Gaussian expectations need a positive sample count"),
        };
        let h = self.head(x)?;
        Ok((0..k).map(|_| (h.rsample(rng).y, 1.0 / k as f64)).collect())
    }

    fn improvement(
        &self,
        x: &Vec<f64>,
        target: &dyn LogTarget<Vec<f64>>,
        k: usize,
        rng: &mut Rng,
        weight: f64,
        grad: &mut [f64],
    ) -> f64 {
        let cache = match self.mlp.forward_cached(x) {
            Ok(c) => c,
            Err(_) => return f64::NAN,
        };
        let h = GaussianHead::from_output(&cache.output);
        let (value, d) = h.improvement(target, k, rng);
        let d: Vec<f64> = d.iter().map(|v| v * weight).collect();
        match self.mlp.backward(&cache, &d, grad) {
            Ok(_) => value,
            Err(_) => f64::NAN,
        }
    }
}

/// Gaussian model `q(x' | x, u)`; the network predicts the change `x' - x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianModel {
    pub mlp: Mlp,
}

impl GaussianModel {
    pub fn new(state_dim: usize, action_dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(MlpSpec::desk(state_dim + action_dim, Head::Gaussian(state_dim)), rng)?,
        })
    }

    fn input(x: &[f64], u: &[f64]) -> Vec<f64> {
        x.iter().chain(u).copied().collect()
    }

    fn head_from_output(x: &[f64], output: &[f64]) -> GaussianHead {
        let mut h = GaussianHead::from_output(output);
        for (m, xi) in h.mean.iter_mut().zip(x) {
            *m += xi;
        }
        h
    }

    pub fn head(&self, x: &[f64], u: &[f64]) -> Result<GaussianHead> {
        let out = self.mlp.forward(&Self::input(x, u))?;
        Ok(Self::head_from_output(x, &out))
    }
}

impl Parametric for GaussianModel {
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

impl ModelMap<Vec<f64>, Vec<f64>> for GaussianModel {
    fn log_prob(&self, x: &Vec<f64>, u: &Vec<f64>, x_next: &Vec<f64>) -> f64 {
        self.head(x, u).map(|h| h.log_prob(x_next)).unwrap_or(f64::NAN)
    }

    fn sample(&self, x: &Vec<f64>, u: &Vec<f64>, rng: &mut Rng) -> Vec<f64> {
        match self.head(x, u) {
            Ok(h) => h.rsample(rng).y,
            Err(_) => vec![f64::NAN; x.len()],
        }
    }

    fn backprop_log_prob(&self, x: &Vec<f64>, u: &Vec<f64>, x_next: &Vec<f64>, upstream: f64, grad: &mut [f64]) {
        if let Ok(cache) = self.mlp.forward_cached(&Self::input(x, u)) {
            let h = Self::head_from_output(x, &cache.output);
            let d: Vec<f64> = h.log_prob_output_grad(x_next).iter().map(|v| v * upstream).collect();
            let _ = self.mlp.backward(&cache, &d, grad);
        }
    }

    fn log_prob_next_grad(&self, x: &Vec<f64>, u: &Vec<f64>, x_next: &Vec<f64>) -> Result<Vec<f64>> {
        Ok(self.head(x, u)?.sample_grad(x_next))
    }

    fn expectation_points(
        &self,
        x: &Vec<f64>,
        u: &Vec<f64>,
        mode: Expectation,
        rng: &mut Rng,
    ) -> Result<Vec<(Vec<f64>, f64)>> {
        let k = match mode {
            Expectation::Samples(k) if k > 0 => k,
            _ => return arg("Gaussian expectations need a positive sample count"),
        };
        let h = self.head(x, u)?;
        Ok((0..k).map(|_| (h.rsample(rng).y, 1.0 / k as f64)).collect())
    }

    fn improvement(
        &self,
        x: &Vec<f64>,
        u: &Vec<f64>,
        target: &dyn LogTarget<Vec<f64>>,
        k: usize,
        rng: &mut Rng,
        weight: f64,
        grad: &mut [f64],
    ) -> f64 {
        let cache = match self.mlp.forward_cached(&Self::input(x, u)) {
            Ok(c) => c,
            Err(_) => return f64::NAN,
        };
        let h = Self::head_from_output(x, &cache.output);
        let (value, d) = h.improvement(target, k, rng);
        let d: Vec<f64> = d.iter().map(|v| v * weight).collect();
        match self.mlp.backward(&cache, &d, grad) {
            Ok(_) => value,
            Err(_) => f64::NAN,
        }
    }
}
