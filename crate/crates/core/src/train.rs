//! The MB-ERIL training loop, its two ablations and the model-free and
//! cloning baselines, all as seeded, resumable loops over a shared state.
//!
//! One MB-ERIL iteration runs, in order:
//!
//! 1. collect `n_real` transitions with `b` in the real environment (`D^L`);
//! 2. collect `n_sim` transitions with `b` in the learned model `q` (`D^G`);
//! 3. train `r`, `V`, `Q` with the two discriminators, `q` and `b` frozen;
//! 4. collect another `n_sim` simulated transitions;
//! 5. fit `V` and `Q` to the soft Bellman targets under `q` and `b`;
//! 6. move `q` and `b` towards the softmax maps induced by `(r, V, Q)`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::approx::{
    Backend, Continuous, Expectation, GaussianModel, GaussianPolicy, ModelMap, Parametric, Tabular, TabularModel,
    TabularPolicy,
};
use crate::error::{arg, Error, Result};
use crate::eval::{episode_returns, nll_model, nll_policy, normalized_return};
use crate::losses::{
    loss_bc, loss_disc_total, loss_ermbc, loss_improve_model, loss_improve_policy, loss_model_nll, loss_policy_disc,
    loss_policy_eval, uniform_batch, DiscBatches, DiscForm, LossBreakdown, NextStates, ValueFn, ValueGrad,
};
use crate::mdp::{
    rollout, sample_union, BufferRole, EpisodeCursor, Environment, PointMass, TabularMdp, Transition, TransitionBuffer,
};
use crate::oracle::{solve_default, support_baselines, SolveResult};
use crate::regularization::RegularizationConfig;
use crate::space::Space;
use crate::{stream_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Variant {
    MbEril,
    /// Discriminator phase replaced by maximum likelihood and cloning.
    Ermbc,
    /// MB-ERIL without the second simulation and the policy-evaluation phase.
    MbErilNoPe,
    /// Model-free discriminator with a maximum-likelihood model for extra data.
    DynaMfEril,
    MfEril,
    Bc,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::MbEril,
        Variant::Ermbc,
        Variant::MbErilNoPe,
        Variant::DynaMfEril,
        Variant::MfEril,
        Variant::Bc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MbEril => "mb-eril",
            Variant::Ermbc => "ermbc",
            Variant::MbErilNoPe => "mb-eril-nope",
            Variant::DynaMfEril => "dyna-mf-eril",
            Variant::MfEril => "mf-eril",
            Variant::Bc => "bc",
        }
    }

    /// Whether the variant learns a transition model.
    pub fn uses_model(self) -> bool {
        !matches!(self, Variant::MfEril | Variant::Bc)
    }

    /// Whether the variant interacts with the real environment.
    pub fn collects_real(self) -> bool {
        self != Variant::Bc
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Argument(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().to_string()
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 3e-4;

/// Adam moment accumulators for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves everything
/// untouched and returns a numeric error.
pub fn optimizer_step(params: &mut [f64], grad: &[f64], moments: &mut Adam, lr: f64) -> Result<()> {
    if params.len() != grad.len() || moments.m.len() != grad.len() {
        return arg(format!(
            "optimizer shapes differ: {} params, {} grads, {} moments",
            params.len(),
            grad.len(),
            moments.m.len()
        ));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return arg(format!("learning rate must be finite and nonnegative, got {lr}"));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            layer: None,
            what: format!("gradient coordinate {i} is {}", grad[i]),
        });
    }
    moments.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powf(moments.t as f64);
    let c2 = 1.0 - ADAM_BETA2.powf(moments.t as f64);
    for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut moments.m).zip(&mut moments.v) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Outer-loop length, per-phase gradient steps and data sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub iterations: usize,
    /// Discriminator (or maximum-likelihood replacement) steps.
    pub disc_steps: usize,
    /// Policy-evaluation steps.
    pub pe_steps: usize,
    /// Model and policy improvement steps.
    pub improve_steps: usize,
    /// Maximum-likelihood model steps of the Dyna baseline.
    pub model_steps: usize,
    /// Cloning steps of the BC baseline.
    pub bc_steps: usize,
    pub batch_size: usize,
    /// Real transitions per iteration.
    pub n_real: usize,
    /// Simulated transitions per collection.
    pub n_sim: usize,
    pub sim_capacity: usize,
    /// Episode length for collection and evaluation.
    pub horizon: usize,
    pub lr: f64,
    /// Samples per expectation when it cannot be enumerated.
    pub k: usize,
    pub eval_episodes: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            iterations: 20,
            disc_steps: 50,
            pe_steps: 100,
            improve_steps: 50,
            model_steps: 50,
            bc_steps: 50,
            batch_size: 128,
            n_real: 100,
            n_sim: 10_000,
            sim_capacity: 100_000,
            horizon: 50,
            lr: DEFAULT_LR,
            k: 4,
            eval_episodes: 20,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("n_real", self.n_real),
            ("n_sim", self.n_sim),
            ("sim_capacity", self.sim_capacity),
            ("horizon", self.horizon),
            ("k", self.k),
            ("eval_episodes", self.eval_episodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return arg(format!("schedule.{name} must be positive"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return arg(format!("schedule.lr must be finite and nonnegative, got {}", self.lr));
        }
        Ok(())
    }

    /// Complaints about data sizes that break `N^G >> N^L >= N^E`, where `N^E`
    /// is compared against the whole real-interaction budget.
    pub fn warnings(&self, n_expert: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_sim < 10 * self.n_real {
            out.push(format!(
                "n_sim = {} is not much larger than n_real = {}; simulated data should dominate",
                self.n_sim, self.n_real
            ));
        }
        let budget = self.iterations * self.n_real;
        if budget < n_expert {
            out.push(format!(
                "real-interaction budget {budget} is smaller than the expert dataset ({n_expert} transitions)"
            ));
        }
        out
    }

    fn mode<B: Backend>(&self) -> Expectation {
        if B::ENUMERABLE {
            Expectation::Exact
        } else {
            Expectation::Samples(self.k)
        }
    }
}

/// Steps of the per-iteration schedule, recorded in the phase trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    CollectReal,
    CollectSim,
    /// Joint model and policy discriminators.
    Discriminator,
    /// Model-free policy discriminator.
    DiscriminatorMf,
    /// Maximum likelihood, cloning and policy evaluation on expert data.
    Ermbc,
    PolicyEval,
    ImproveModel,
    ImprovePolicy,
    ModelFit,
    BehaviorCloning,
    Evaluate,
}

/// One executed phase: `count` is gradient steps, transitions or episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub count: usize,
}

/// Mean losses over each phase of one iteration plus evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    /// Real transitions collected for training so far.
    pub real_interactions: u64,
    /// Real transitions spent on evaluation so far; never enters a buffer.
    pub eval_interactions: u64,
    pub losses: LossBreakdown,
    /// Weighted policy-evaluation loss.
    pub loss_pe: f64,
    pub eval_return: f64,
    pub normalized_return: f64,
    pub nll_policy: Option<f64>,
    pub nll_model: Option<f64>,
}

/// Where a run stopped because a loss or gradient went non-finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub iteration: usize,
    pub phase: Option<Phase>,
    pub message: String,
}

impl fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.phase {
            Some(p) => write!(f, "diverged at iteration {} in {:?}: {}", self.iteration, p, self.message),
            None => write!(f, "diverged at iteration {}: {}", self.iteration, self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub r: Adam,
    pub v: Adam,
    pub q: Adam,
    pub model: Adam,
    pub policy: Adam,
}

/// Initial learner functions.
pub struct Learner<B: Backend> {
    pub vf: ValueFn<B>,
    pub q: B::Model,
    pub b: B::Policy,
}

/// An environment the trainer knows how to build learners for.
pub trait Learnable: Environment + Sync {
    type B: Backend<State = Self::State, Action = Self::Action>;

    fn init_learner(&self, rng: &mut Rng) -> Result<Learner<Self::B>>;
}

impl TabularMdp {
    /// `[x][u][x']` mask of next states with positive probability.
    ///
    /// Learned tabular models are confined to it and start uniform on it,
    /// which is the same baseline the oracle expert is solved against: the
    /// learner knows where each action can lead but not how likely each
    /// outcome is.
    pub fn support_mask(&self) -> Vec<bool> {
        self.transitions().iter().map(|p| *p > 0.0).collect()
    }
}

impl Learnable for TabularMdp {
    type B = Tabular;

    fn init_learner(&self, _rng: &mut Rng) -> Result<Learner<Tabular>> {
        let (ns, na) = (self.n_states(), self.n_actions());
        Ok(Learner {
            vf: ValueFn::zeros(ns, na),
            q: TabularModel::uniform_masked(ns, na, self.support_mask())?,
            b: TabularPolicy::uniform(ns, na),
        })
    }
}

impl Learnable for PointMass {
    type B = Continuous;

    fn init_learner(&self, rng: &mut Rng) -> Result<Learner<Continuous>> {
        let (sd, ad) = (PointMass::STATE_DIM, PointMass::ACTION_DIM);
        Ok(Learner {
            vf: ValueFn::mlp(sd, ad, rng)?,
            q: GaussianModel::new(sd, ad, rng)?,
            b: GaussianPolicy::new(sd, ad, rng)?,
        })
    }
}

/// The learned model dressed up as an environment: initial states and
/// rewards come from the real one, transitions from `model`.
pub struct ModelDynamics<'a, E, M> {
    pub env: &'a E,
    pub model: &'a M,
}

impl<E: Environment, M: ModelMap<E::State, E::Action>> Environment for ModelDynamics<'_, E, M> {
    type State = E::State;
    type Action = E::Action;

    fn sample_initial(&self, rng: &mut Rng) -> E::State {
        self.env.sample_initial(rng)
    }

    fn step(&self, x: &E::State, u: &E::Action, rng: &mut Rng) -> Result<E::State> {
        let xn = self.model.sample(x, u, rng);
        if !xn.is_finite() {
            return Err(Error::Numeric {
                layer: None,
                what: "learned model produced a non-finite state".into(),
            });
        }
        Ok(xn)
    }

    fn reward(&self, x: &E::State) -> f64 {
        self.env.reward(x)
    }
}

/// Everything a run needs besides its state.
pub struct TrainSetup<'a, E: Environment> {
    pub env: &'a E,
    pub expert: &'a TransitionBuffer<E::State, E::Action>,
    /// Held-out expert transitions for the NLL columns.
    pub test: Option<&'a TransitionBuffer<E::State, E::Action>>,
    pub cfg: RegularizationConfig,
    pub schedule: Schedule,
    /// `(R_min, R_max)` for the normalized return.
    pub return_range: (f64, f64),
}

/// Full training state; serializes to a checkpoint.
#[derive(Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TrainState<B: Backend> {
    pub variant: Variant,
    pub vf: ValueFn<B>,
    pub q: B::Model,
    pub b: B::Policy,
    pub real: TransitionBuffer<B::State, B::Action>,
    pub sim: TransitionBuffer<B::State, B::Action>,
    /// Completed outer iterations.
    pub iteration: usize,
    pub real_interactions: u64,
    pub eval_interactions: u64,
    pub moments: Moments,
    pub trace: Vec<PhaseRecord>,
    pub reports: Vec<IterationReport>,
    rng: Rng,
    eval_rng: Rng,
    real_cursor: EpisodeCursor<B::State>,
    sim_cursor: EpisodeCursor<B::State>,
}

impl<B: Backend> Clone for TrainState<B> {
    fn clone(&self) -> Self {
        Self {
            variant: self.variant,
            vf: self.vf.clone(),
            q: self.q.clone(),
            b: self.b.clone(),
            real: self.real.clone(),
            sim: self.sim.clone(),
            iteration: self.iteration,
            real_interactions: self.real_interactions,
            eval_interactions: self.eval_interactions,
            moments: self.moments.clone(),
            trace: self.trace.clone(),
            reports: self.reports.clone(),
            rng: self.rng.clone(),
            eval_rng: self.eval_rng.clone(),
            real_cursor: self.real_cursor.clone(),
            sim_cursor: self.sim_cursor.clone(),
        }
    }
}

fn draw<S: Space, A: Space>(
    bufs: &[&TransitionBuffer<S, A>],
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<(Transition<S, A>, f64)>> {
    Ok(uniform_batch(&sample_union(bufs, n, rng)?))
}

/// Which parts of `(r, V, Q)` a value-function step may move.
#[derive(Clone, Copy)]
struct Sets {
    r: bool,
    v: bool,
    q: bool,
}

impl<B: Backend> TrainState<B> {
    pub fn new(variant: Variant, learner: Learner<B>, schedule: &Schedule, seed: u64) -> Result<Self> {
        schedule.validate()?;
        let moments = Moments {
            r: Adam::new(learner.vf.r.n_params()),
            v: Adam::new(learner.vf.v.n_params()),
            q: Adam::new(learner.vf.q.n_params()),
            model: Adam::new(learner.q.n_params()),
            policy: Adam::new(learner.b.n_params()),
        };
        Ok(Self {
            variant,
            vf: learner.vf,
            q: learner.q,
            b: learner.b,
            real: TransitionBuffer::new(BufferRole::RealLearner),
            sim: TransitionBuffer::with_capacity(BufferRole::Simulated, schedule.sim_capacity)?,
            iteration: 0,
            real_interactions: 0,
            eval_interactions: 0,
            moments,
            trace: Vec::new(),
            reports: Vec::new(),
            rng: stream_rng(seed, 0),
            eval_rng: stream_rng(seed, 1),
            real_cursor: EpisodeCursor::new(schedule.horizon)?,
            sim_cursor: EpisodeCursor::new(schedule.horizon)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
    }

    fn record(&mut self, phase: Phase, count: usize) {
        self.trace.push(PhaseRecord {
            iteration: self.iteration,
            phase,
            count,
        });
    }

    /// Steps of `phase` recorded so far.
    pub fn phase_count(&self, phase: Phase) -> usize {
        self.trace.iter().filter(|r| r.phase == phase).map(|r| r.count).sum()
    }

    /// Runs `b` for `n` steps in the real environment and stores the result in `D^L`.
    pub fn collect_real<E>(&mut self, env: &E, n: usize) -> Result<()>
    where
        E: Environment<State = B::State, Action = B::Action>,
    {
        if n == 0 {
            return arg("collect at least one transition");
        }
        let Self {
            real_cursor,
            b,
            rng,
            real,
            ..
        } = self;
        real_cursor.advance(env, &*b, n, rng, |t| real.push(t))?;
        self.real_interactions += n as u64;
        self.record(Phase::CollectReal, n);
        Ok(())
    }

    /// Runs `b` for `n` steps inside the learned model and stores the result in `D^G`.
    pub fn collect_sim<E>(&mut self, env: &E, n: usize) -> Result<()>
    where
        E: Environment<State = B::State, Action = B::Action>,
    {
        if n == 0 {
            return arg("collect at least one transition");
        }
        let Self {
            sim_cursor,
            b,
            q,
            rng,
            sim,
            ..
        } = self;
        let dynamics = ModelDynamics { env, model: &*q };
        sim_cursor.advance(&dynamics, &*b, n, rng, |t| sim.push(t))?;
        self.record(Phase::CollectSim, n);
        Ok(())
    }

    fn step_values(&mut self, grad: &ValueGrad, sets: Sets, lr: f64) -> Result<()> {
        if sets.r {
            optimizer_step(self.vf.r.params_mut(), &grad.r, &mut self.moments.r, lr)?;
        }
        if sets.v {
            optimizer_step(self.vf.v.params_mut(), &grad.v, &mut self.moments.v, lr)?;
        }
        if sets.q {
            optimizer_step(self.vf.q.params_mut(), &grad.q, &mut self.moments.q, lr)?;
        }
        Ok(())
    }

    /// Joint model and policy discriminators; only `r`, `V` and `Q` move.
    fn phase_disc(&mut self, expert: &TransitionBuffer<B::State, B::Action>, s: &Schedule, cfg: &RegularizationConfig) -> Result<LossBreakdown> {
        let mut acc = [0.0; 3];
        for _ in 0..s.disc_steps {
            let real = draw(&[expert, &self.real], s.batch_size, &mut self.rng)?;
            let sim = draw(&[&self.sim], s.batch_size, &mut self.rng)?;
            let exp = draw(&[expert], s.batch_size, &mut self.rng)?;
            let learner = draw(&[&self.real, &self.sim], s.batch_size, &mut self.rng)?;
            let batches = DiscBatches {
                real: &real,
                sim: &sim,
                expert: &exp,
                learner: &learner,
            };
            let (parts, grad) = loss_disc_total(&self.vf, &self.q, &self.b, &batches, cfg)?;
            self.step_values(&grad, Sets { r: true, v: true, q: true }, s.lr)?;
            acc[0] += parts.model_disc;
            acc[1] += parts.policy_disc;
            acc[2] += parts.total_disc;
        }
        self.record(Phase::Discriminator, s.disc_steps);
        let n = s.disc_steps as f64;
        Ok(LossBreakdown {
            model_disc: acc[0] / n,
            policy_disc: acc[1] / n,
            total_disc: acc[2] / n,
            ..LossBreakdown::default()
        })
    }

    /// Model-free policy discriminator on expert versus `learner` data;
    /// moves `r` and `V`.
    fn phase_disc_mf(
        &mut self,
        expert: &TransitionBuffer<B::State, B::Action>,
        with_sim: bool,
        s: &Schedule,
        cfg: &RegularizationConfig,
    ) -> Result<f64> {
        let mut acc = 0.0;
        for _ in 0..s.disc_steps {
            let exp = draw(&[expert], s.batch_size, &mut self.rng)?;
            let learner = if with_sim {
                draw(&[&self.real, &self.sim], s.batch_size, &mut self.rng)?
            } else {
                draw(&[&self.real], s.batch_size, &mut self.rng)?
            };
            let (value, grad) = loss_policy_disc(&self.vf, &self.b, &exp, &learner, DiscForm::ModelFree, cfg)?;
            self.step_values(&grad, Sets { r: true, v: true, q: false }, s.lr)?;
            acc += value;
        }
        self.record(Phase::DiscriminatorMf, s.disc_steps);
        Ok(acc / s.disc_steps as f64)
    }

    /// Maximum likelihood for `q`, cloning for `b` and policy evaluation for
    /// `V`, `Q`, all on expert data.
    fn phase_ermbc(&mut self, expert: &TransitionBuffer<B::State, B::Action>, s: &Schedule, cfg: &RegularizationConfig) -> Result<f64> {
        let mode = s.mode::<B>();
        let mut acc = 0.0;
        for _ in 0..s.disc_steps {
            let exp = draw(&[expert], s.batch_size, &mut self.rng)?;
            let out = loss_ermbc(&self.vf, &self.q, &self.b, &exp, mode, mode, cfg, &mut self.rng)?;
            optimizer_step(self.q.params_mut(), &out.q_grad, &mut self.moments.model, s.lr)?;
            optimizer_step(self.b.params_mut(), &out.b_grad, &mut self.moments.policy, s.lr)?;
            self.step_values(&out.pe.grad, Sets { r: false, v: true, q: true }, s.lr)?;
            acc += out.value;
        }
        self.record(Phase::Ermbc, s.disc_steps);
        Ok(acc / s.disc_steps as f64)
    }

    /// Soft Bellman consistency of `V` and `Q` on learner data. With
    /// `model_targets` the `Q` target takes its expectation under `q`,
    /// otherwise it uses the observed next state.
    fn phase_pe(&mut self, model_targets: bool, with_sim: bool, s: &Schedule, cfg: &RegularizationConfig) -> Result<(f64, f64, f64)> {
        let mode = s.mode::<B>();
        let mut acc = [0.0; 3];
        for _ in 0..s.pe_steps {
            let batch = if with_sim {
                draw(&[&self.real, &self.sim], s.batch_size, &mut self.rng)?
            } else {
                draw(&[&self.real], s.batch_size, &mut self.rng)?
            };
            let next = if model_targets {
                NextStates::Model { q: &self.q, mode }
            } else {
                NextStates::Observed
            };
            let out = loss_policy_eval(&self.vf, &next, &self.b, mode, &batch, cfg, &mut self.rng)?;
            self.step_values(&out.grad, Sets { r: false, v: true, q: true }, s.lr)?;
            acc[0] += out.value;
            acc[1] += out.qv;
            acc[2] += out.vq;
        }
        self.record(Phase::PolicyEval, s.pe_steps);
        let n = s.pe_steps as f64;
        Ok((acc[0] / n, acc[1] / n, acc[2] / n))
    }

    /// KL steps of `q` and/or `b` towards the maps induced by `(r, V, Q)`,
    /// anchored at their values at the start of the phase.
    fn phase_improve(
        &mut self,
        expert: &TransitionBuffer<B::State, B::Action>,
        model: bool,
        with_sim: bool,
        s: &Schedule,
        cfg: &RegularizationConfig,
    ) -> Result<(f64, f64)> {
        let q_frozen = self.q.clone();
        let b_frozen = self.b.clone();
        let (mut lm, mut lp) = (0.0, 0.0);
        for _ in 0..s.improve_steps {
            let batch = if with_sim {
                draw(&[expert, &self.real, &self.sim], s.batch_size, &mut self.rng)?
            } else {
                draw(&[expert, &self.real], s.batch_size, &mut self.rng)?
            };
            if model {
                let (v, g) = loss_improve_model(&self.q, &self.vf, &q_frozen, &batch, cfg, s.k, &mut self.rng)?;
                optimizer_step(self.q.params_mut(), &g, &mut self.moments.model, s.lr)?;
                lm += v;
            }
            let (v, g) = loss_improve_policy(&self.b, &self.vf, &b_frozen, &batch, cfg, s.k, &mut self.rng)?;
            optimizer_step(self.b.params_mut(), &g, &mut self.moments.policy, s.lr)?;
            lp += v;
        }
        if model {
            self.record(Phase::ImproveModel, s.improve_steps);
        }
        self.record(Phase::ImprovePolicy, s.improve_steps);
        let n = s.improve_steps as f64;
        Ok((if model { lm / n } else { f64::NAN }, lp / n))
    }

    /// Maximum-likelihood model on `D^L`.
    fn phase_model_fit(&mut self, s: &Schedule) -> Result<f64> {
        let mut acc = 0.0;
        for _ in 0..s.model_steps {
            let batch = draw(&[&self.real], s.batch_size, &mut self.rng)?;
            let (v, g) = loss_model_nll(&self.q, &batch)?;
            optimizer_step(self.q.params_mut(), &g, &mut self.moments.model, s.lr)?;
            acc += v;
        }
        self.record(Phase::ModelFit, s.model_steps);
        Ok(acc / s.model_steps as f64)
    }

    fn phase_bc(&mut self, expert: &TransitionBuffer<B::State, B::Action>, s: &Schedule) -> Result<f64> {
        let mut acc = 0.0;
        for _ in 0..s.bc_steps {
            let batch = draw(&[expert], s.batch_size, &mut self.rng)?;
            let (v, g) = loss_bc(&self.b, &batch)?;
            optimizer_step(self.b.params_mut(), &g, &mut self.moments.policy, s.lr)?;
            acc += v;
        }
        self.record(Phase::BehaviorCloning, s.bc_steps);
        Ok(acc / s.bc_steps as f64)
    }

    /// One outer iteration of the variant's schedule, without evaluation.
    fn run_phases<E>(&mut self, setup: &TrainSetup<'_, E>) -> Result<(LossBreakdown, f64)>
    where
        E: Environment<State = B::State, Action = B::Action>,
    {
        let (env, expert, s, cfg) = (setup.env, setup.expert, &setup.schedule, &setup.cfg);
        let mut losses = LossBreakdown::default();
        let mut loss_pe = f64::NAN;
        let weighted = |qv: f64, vq: f64| cfg.lambda_qv * qv + cfg.lambda_vq * vq;
        match self.variant {
            Variant::MbEril | Variant::Ermbc | Variant::MbErilNoPe => {
                self.collect_real(env, s.n_real)?;
                self.collect_sim(env, s.n_sim)?;
                if self.variant == Variant::Ermbc {
                    losses.total_disc = self.phase_ermbc(expert, s, cfg)?;
                } else {
                    losses = self.phase_disc(expert, s, cfg)?;
                }
                if self.variant != Variant::MbErilNoPe {
                    self.collect_sim(env, s.n_sim)?;
                    let (_, qv, vq) = self.phase_pe(true, true, s, cfg)?;
                    losses.pe_qv = qv;
                    losses.pe_vq = vq;
                    loss_pe = weighted(qv, vq);
                }
                let (lm, lp) = self.phase_improve(expert, true, true, s, cfg)?;
                losses.improve_model = lm;
                losses.improve_policy = lp;
            }
            Variant::DynaMfEril => {
                self.collect_real(env, s.n_real)?;
                losses.improve_model = self.phase_model_fit(s)?;
                self.collect_sim(env, s.n_sim)?;
                losses.policy_disc = self.phase_disc_mf(expert, true, s, cfg)?;
                losses.total_disc = losses.policy_disc;
                let (_, qv, vq) = self.phase_pe(false, true, s, cfg)?;
                losses.pe_qv = qv;
                losses.pe_vq = vq;
                loss_pe = weighted(qv, vq);
                losses.improve_policy = self.phase_improve(expert, false, true, s, cfg)?.1;
            }
            Variant::MfEril => {
                self.collect_real(env, s.n_real)?;
                losses.policy_disc = self.phase_disc_mf(expert, false, s, cfg)?;
                losses.total_disc = losses.policy_disc;
                let (_, qv, vq) = self.phase_pe(false, false, s, cfg)?;
                losses.pe_qv = qv;
                losses.pe_vq = vq;
                loss_pe = weighted(qv, vq);
                losses.improve_policy = self.phase_improve(expert, false, false, s, cfg)?.1;
            }
            Variant::Bc => {
                losses.improve_policy = self.phase_bc(expert, s)?;
            }
        }
        Ok((losses, loss_pe))
    }

    fn evaluate<E>(&mut self, setup: &TrainSetup<'_, E>) -> Result<(f64, f64, Option<f64>, Option<f64>)>
    where
        E: Environment<State = B::State, Action = B::Action>,
    {
        let s = &setup.schedule;
        let returns = episode_returns(setup.env, &self.b, s.eval_episodes, s.horizon, &mut self.eval_rng)?;
        self.eval_interactions += (s.eval_episodes * s.horizon) as u64;
        self.record(Phase::Evaluate, s.eval_episodes);
        let mean = returns.iter().sum::<f64>() / returns.len() as f64;
        let (r_min, r_max) = setup.return_range;
        let norm = normalized_return(&returns, r_max, r_min)?;
        let (np, nm) = match setup.test {
            Some(test) if !test.is_empty() => (
                Some(nll_policy(&self.b, test)?),
                if self.variant.uses_model() {
                    Some(nll_model(&self.q, test)?)
                } else {
                    None
                },
            ),
            _ => (None, None),
        };
        Ok((mean, norm, np, nm))
    }

    /// Runs one full iteration and appends its report.
    pub fn iterate<E>(&mut self, setup: &TrainSetup<'_, E>) -> Result<&IterationReport>
    where
        E: Environment<State = B::State, Action = B::Action>,
    {
        let (losses, loss_pe) = self.run_phases(setup)?;
        let (eval_return, normalized_return, nll_policy, nll_model) = self.evaluate(setup)?;
        self.iteration += 1;
        self.reports.push(IterationReport {
            iteration: self.iteration,
            real_interactions: self.real_interactions,
            eval_interactions: self.eval_interactions,
            losses,
            loss_pe,
            eval_return,
            normalized_return,
            nll_policy,
            nll_model,
        });
        Ok(self.reports.last().expect("just pushed"))
    }

    fn last_phase(&self) -> Option<Phase> {
        self.trace.last().map(|r| r.phase)
    }
}

/// Outcome of a run. A non-finite loss stops the run early and fills
/// `divergence`; the state is left as it was when the error surfaced.
pub struct TrainRun<B: Backend> {
    pub state: TrainState<B>,
    pub divergence: Option<DivergenceReport>,
    pub warnings: Vec<String>,
}

impl<B: Backend> TrainRun<B> {
    pub fn reports(&self) -> &[IterationReport] {
        &self.state.reports
    }
}

fn check_setup<E: Environment>(setup: &TrainSetup<'_, E>) -> Result<()> {
    setup.cfg.validate()?;
    setup.schedule.validate()?;
    if setup.expert.is_empty() {
        return arg("expert dataset is empty");
    }
    let (r_min, r_max) = setup.return_range;
    if !(r_max > r_min) {
        return arg(format!("return range needs R_max > R_min, got ({r_min}, {r_max})"));
    }
    Ok(())
}

/// Fresh state for `variant`, learner initialized from `seed`.
pub fn init_state<E: Learnable>(variant: Variant, setup: &TrainSetup<'_, E>, seed: u64) -> Result<TrainState<E::B>> {
    check_setup(setup)?;
    let learner = setup.env.init_learner(&mut stream_rng(seed, 2))?;
    TrainState::new(variant, learner, &setup.schedule, seed)
}

/// Continues `state` until it has completed `schedule.iterations` iterations.
pub fn resume<E: Learnable>(mut state: TrainState<E::B>, setup: &TrainSetup<'_, E>) -> Result<TrainRun<E::B>> {
    check_setup(setup)?;
    let warnings = if state.variant.collects_real() {
        setup.schedule.warnings(setup.expert.len())
    } else {
        Vec::new()
    };
    let mut divergence = None;
    while state.iteration < setup.schedule.iterations {
        match state.iterate(setup) {
            Ok(_) => {}
            Err(Error::Numeric { layer, what }) => {
                let message = match layer {
                    Some(l) => format!("non-finite value in layer {l}: {what}"),
                    None => format!("non-finite value: {what}"),
                };
                divergence = Some(DivergenceReport {
                    iteration: state.iteration + 1,
                    phase: state.last_phase(),
                    message,
                });
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainRun {
        state,
        divergence,
        warnings,
    })
}

pub fn train<E: Learnable>(variant: Variant, setup: &TrainSetup<'_, E>, seed: u64) -> Result<TrainRun<E::B>> {
    resume(init_state(variant, setup, seed)?, setup)
}

/// The oracle expert of a tabular task: solved with support-uniform
/// baselines, together with the environment whose dynamics are the induced
/// model `p`. For deterministic moves `p` equals the original dynamics.
pub fn expert_solution(mdp: &TabularMdp, cfg: &RegularizationConfig) -> Result<(SolveResult, TabularMdp)> {
    let (q0, b0) = support_baselines(mdp)?;
    let sol = solve_default(mdp, &q0, &b0, cfg)?;
    let env = mdp.with_transition(sol.expert_model.probs().to_vec())?;
    Ok((sol, env))
}

/// `n_trajectories` rollouts of length `horizon` of the oracle expert `pi`
/// under the induced dynamics `p`.
pub fn make_expert(
    mdp: &TabularMdp,
    cfg: &RegularizationConfig,
    n_trajectories: usize,
    horizon: usize,
    rng: &mut Rng,
) -> Result<TransitionBuffer<usize, usize>> {
    if n_trajectories == 0 {
        return arg("need at least one expert trajectory");
    }
    let (sol, env) = expert_solution(mdp, cfg)?;
    let mut buf = TransitionBuffer::new(BufferRole::Expert);
    for _ in 0..n_trajectories {
        for t in rollout(&env, &sol.expert_policy, horizon, rng)?.transitions {
            buf.push(t)?;
        }
    }
    Ok(buf)
}
