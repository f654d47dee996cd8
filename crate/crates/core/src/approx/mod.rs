//! Parametric function families with analytic gradients.
//!
//! Two backends implement the same traits: tabular ([`StateTable`],
//! [`StateActionTable`], softmax [`TabularPolicy`]/[`TabularModel`]) and small
//! multilayer perceptrons ([`MlpStateFn`], [`MlpStateActionFn`], diagonal
//! Gaussian [`GaussianPolicy`]/[`GaussianModel`]). The learner's policy `b` and
//! model `q` are stochastic maps from either family.

mod gaussian;
mod gradcheck;
mod mlp;
mod params;
mod table;

pub use gaussian::{GaussianHead, GaussianModel, GaussianPolicy, RSample, LOG_STD_MAX, LOG_STD_MIN};
pub use gradcheck::{grad_check, grad_check_subset, relative_error};
pub use mlp::{dsilu, dsilu_derivative, Activation, Head, Mlp, MlpCache, MlpSpec, MlpStateActionFn, MlpStateFn};
pub use params::{ParamBlock, ParamVector};
pub use table::{
    randomize, CategoricalTable, SoftmaxTable, StateActionTable, StateTable, TabularModel,
    TabularPolicy,
};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::Result;
use crate::mdp::Policy;
use crate::space::Space;
use crate::Rng;

/// Max-shifted `ln sum exp`. Returns `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable `ln(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Owner of a flat parameter vector.
pub trait Parametric {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn manifest(&self) -> Vec<ParamBlock>;

    fn n_params(&self) -> usize {
        self.params().len()
    }

    fn to_param_vector(&self) -> ParamVector {
        ParamVector {
            manifest: self.manifest(),
            values: self.params().to_vec(),
        }
    }
}

/// Scalar function of the state: `r(x)` or `V(x)`.
pub trait StateFunction<S>: Parametric {
    fn eval(&self, x: &S) -> f64;

    /// Adds `upstream * d eval(x) / d params` into `grad`.
    fn backprop(&self, x: &S, upstream: f64, grad: &mut [f64]);

    /// `d eval(x) / d x`; only continuous backends provide it.
    fn input_grad(&self, x: &S) -> Result<Vec<f64>>;
}

/// Scalar function of a state-action pair: `Q(x, u)`.
pub trait StateActionFunction<S, A>: Parametric {
    fn eval(&self, x: &S, u: &A) -> f64;

    fn backprop(&self, x: &S, u: &A, upstream: f64, grad: &mut [f64]);

    /// `d eval(x, u) / d u`; only continuous backends provide it.
    fn action_grad(&self, x: &S, u: &A) -> Result<Vec<f64>>;
}

/// How to approximate an expectation under a stochastic map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expectation {
    /// Enumerate the support with its probabilities (tabular only).
    Exact,
    /// `k` independent draws, each weighted `1/k`.
    Samples(usize),
}

/// Unnormalized log-density that an improvement step pulls a map towards.
pub trait LogTarget<Y> {
    fn log_target(&self, y: &Y) -> f64;

    /// Gradient of `log_target` with respect to `y`, used by pathwise
    /// estimators. Tabular backends never call it.
    fn grad(&self, y: &Y) -> Vec<f64>;
}

/// [`LogTarget`] built from a pair of closures.
pub struct FnTarget<F, G> {
    pub value: F,
    pub gradient: G,
}

impl<Y, F, G> LogTarget<Y> for FnTarget<F, G>
where
    F: Fn(&Y) -> f64,
    G: Fn(&Y) -> Vec<f64>,
{
    fn log_target(&self, y: &Y) -> f64 {
        (self.value)(y)
    }

    fn grad(&self, y: &Y) -> Vec<f64> {
        (self.gradient)(y)
    }
}

/// Learnable stochastic policy `b(u | x)`.
pub trait PolicyMap<S: Space, A: Space>:
    Parametric + Policy<S, A> + Clone + Serialize + DeserializeOwned + Send + Sync
{
    fn log_prob(&self, x: &S, u: &A) -> f64;

    fn backprop_log_prob(&self, x: &S, u: &A, upstream: f64, grad: &mut [f64]);

    /// `d ln self(u|x) / d u`; only continuous backends provide it.
    fn log_prob_action_grad(&self, x: &S, u: &A) -> Result<Vec<f64>>;

    fn expectation_points(&self, x: &S, mode: Expectation, rng: &mut Rng) -> Result<Vec<(A, f64)>>;

    /// Estimate of `E_{u ~ self(.|x)}[ln self(u|x) - target(u)]`; adds `weight`
    /// times its gradient into `grad`. Tabular maps sum exactly; Gaussian maps
    /// average `k` reparameterized draws.
    fn improvement(
        &self,
        x: &S,
        target: &dyn LogTarget<A>,
        k: usize,
        rng: &mut Rng,
        weight: f64,
        grad: &mut [f64],
    ) -> f64;
}

/// Learnable stochastic model `q(x' | x, u)`.
pub trait ModelMap<S: Space, A: Space>: Parametric + Clone + Serialize + DeserializeOwned + Send + Sync {
    fn log_prob(&self, x: &S, u: &A, x_next: &S) -> f64;

    fn sample(&self, x: &S, u: &A, rng: &mut Rng) -> S;

    fn backprop_log_prob(&self, x: &S, u: &A, x_next: &S, upstream: f64, grad: &mut [f64]);

    /// `d ln self(x'|x,u) / d x'`; only continuous backends provide it.
    fn log_prob_next_grad(&self, x: &S, u: &A, x_next: &S) -> Result<Vec<f64>>;

    fn expectation_points(&self, x: &S, u: &A, mode: Expectation, rng: &mut Rng) -> Result<Vec<(S, f64)>>;

    /// Same contract as [`PolicyMap::improvement`], over next states.
    #[allow(clippy::too_many_arguments)]
    fn improvement(
        &self,
        x: &S,
        u: &A,
        target: &dyn LogTarget<S>,
        k: usize,
        rng: &mut Rng,
        weight: f64,
        grad: &mut [f64],
    ) -> f64;
}

/// Bundles the concrete function types used for one kind of problem.
pub trait Backend: 'static {
    /// Whether expectations over `q` and `b` can be enumerated exactly.
    const ENUMERABLE: bool;
    type State: Space;
    type Action: Space;
    type StateFn: StateFunction<Self::State> + Clone + Serialize + DeserializeOwned + Send + Sync + std::fmt::Debug;
    type StateActionFn: StateActionFunction<Self::State, Self::Action>
        + Clone
        + Serialize
        + DeserializeOwned
        + Send
        + Sync
        + std::fmt::Debug;
    type Policy: PolicyMap<Self::State, Self::Action> + std::fmt::Debug;
    type Model: ModelMap<Self::State, Self::Action> + std::fmt::Debug;
}

/// Everything tabular: lookup tables and softmax rows.
#[derive(Debug, Clone, Copy)]
pub struct Tabular;

impl Backend for Tabular {
    const ENUMERABLE: bool = true;
    type State = usize;
    type Action = usize;
    type StateFn = StateTable;
    type StateActionFn = StateActionTable;
    type Policy = TabularPolicy;
    type Model = TabularModel;
}

/// Continuous states and actions with MLP functions and Gaussian maps.
#[derive(Debug, Clone, Copy)]
pub struct Continuous;

impl Backend for Continuous {
    const ENUMERABLE: bool = false;
    type State = Vec<f64>;
    type Action = Vec<f64>;
    type StateFn = MlpStateFn;
    type StateActionFn = MlpStateActionFn;
    type Policy = GaussianPolicy;
    type Model = GaussianModel;
}
