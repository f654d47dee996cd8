use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    log_sum_exp, Expectation, LogTarget, ModelMap, ParamBlock, Parametric, PolicyMap, StateActionFunction,
    StateFunction,
};
use crate::error::{arg, Error, Result};
use crate::mdp::{sample_categorical, Policy};
use crate::Rng;

/// Fixed conditional distributions, one probability row per conditioning index.
///
/// Used for oracle outputs (expert policy and dynamics) and for baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalTable {
    n_rows: usize,
    n_outcomes: usize,
    probs: Vec<f64>,
}

impl CategoricalTable {
    pub fn new(n_rows: usize, n_outcomes: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_rows * n_outcomes {
            return arg(format!(
                "table has {} entries, expected {n_rows} x {n_outcomes}",
                probs.len()
            ));
        }
        let table = Self {
            n_rows,
            n_outcomes,
            probs,
        };
        for r in 0..n_rows {
            let row = table.row(r);
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return arg(format!("row {r} has a negative or non-finite entry"));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return arg(format!("row {r} sums to {total}"));
            }
        }
        Ok(table)
    }

    pub fn uniform(n_rows: usize, n_outcomes: usize) -> Self {
        Self {
            n_rows,
            n_outcomes,
            probs: vec![1.0 / n_outcomes as f64; n_rows * n_outcomes],
        }
    }

    /// Each row uniform on the nonzero entries of the matching `support` row.
    pub fn uniform_on_support(n_rows: usize, n_outcomes: usize, support: &[f64]) -> Result<Self> {
        let mut probs = vec![0.0; n_rows * n_outcomes];
        for r in 0..n_rows {
            let s = &support[r * n_outcomes..(r + 1) * n_outcomes];
            let k = s.iter().filter(|p| **p > 0.0).count();
            if k == 0 {
                return arg(format!("support row {r} is empty"));
            }
            for (dst, src) in probs[r * n_outcomes..].iter_mut().zip(s) {
                if *src > 0.0 {
                    *dst = 1.0 / k as f64;
                }
            }
        }
        Self::new(n_rows, n_outcomes, probs)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_outcomes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.probs[r * self.n_outcomes..(r + 1) * self.n_outcomes]
    }

    pub fn prob(&self, r: usize, j: usize) -> f64 {
        self.probs[r * self.n_outcomes + j]
    }

    pub fn sample(&self, r: usize, rng: &mut Rng) -> usize {
        sample_categorical(self.row(r), rng)
    }

    /// Largest absolute deviation of any row sum from one.
    pub fn max_row_error(&self) -> f64 {
        (0..self.n_rows)
            .map(|r| (self.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// A fixed table read as a state-indexed policy.
impl Policy<usize, usize> for CategoricalTable {
    fn sample_action(&self, x: &usize, rng: &mut Rng) -> usize {
        self.sample(*x, rng)
    }
}

/// Learnable conditional distributions: one softmax over logits per row.
///
/// An optional mask pins entries to probability zero; masked logits receive
/// no gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxTable {
    n_rows: usize,
    n_outcomes: usize,
    logits: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl SoftmaxTable {
    /// All logits zero, i.e. uniform rows.
    pub fn uniform(n_rows: usize, n_outcomes: usize) -> Self {
        Self {
            n_rows,
            n_outcomes,
            logits: vec![0.0; n_rows * n_outcomes],
            mask: None,
        }
    }

    pub fn from_logits(n_rows: usize, n_outcomes: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != n_rows * n_outcomes {
            return arg("logit table has the wrong size");
        }
        Ok(Self {
            n_rows,
            n_outcomes,
            logits,
            mask: None,
        })
    }

    /// Table whose rows equal `table` on its support; zero entries are masked.
    pub fn from_probs(table: &CategoricalTable) -> Self {
        let mask: Vec<bool> = table.probs().iter().map(|p| *p > 0.0).collect();
        let logits = table
            .probs()
            .iter()
            .map(|p| if *p > 0.0 { p.ln() } else { 0.0 })
            .collect();
        Self {
            n_rows: table.n_rows(),
            n_outcomes: table.n_outcomes(),
            logits,
            mask: mask.iter().any(|m| !m).then_some(mask),
        }
    }

    /// Restricts each row to the entries where `allowed` is true.
    pub fn with_mask(mut self, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != self.logits.len() {
            return arg("mask has the wrong size");
        }
        for r in 0..self.n_rows {
            if !allowed[r * self.n_outcomes..(r + 1) * self.n_outcomes].iter().any(|a| *a) {
                return arg(format!("mask leaves row {r} empty"));
            }
        }
        self.mask = Some(allowed);
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_outcomes(&self) -> usize {
        self.n_outcomes
    }

    fn allowed(&self, i: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[i])
    }

    fn check_row(&self, r: usize) -> Result<()> {
        if r >= self.n_rows {
            return arg(format!("row {r} out of range ({} rows)", self.n_rows));
        }
        Ok(())
    }

    /// Log-probabilities of one row; masked entries are `-inf`.
    pub fn log_row(&self, r: usize) -> Vec<f64> {
        let base = r * self.n_outcomes;
        let masked: Vec<f64> = (0..self.n_outcomes)
            .map(|j| {
                if self.allowed(base + j) {
                    self.logits[base + j]
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let lse = log_sum_exp(&masked);
        masked.into_iter().map(|l| l - lse).collect()
    }

    pub fn row_probs(&self, r: usize) -> Vec<f64> {
        self.log_row(r).into_iter().map(f64::exp).collect()
    }

    pub fn log_prob(&self, r: usize, j: usize) -> f64 {
        self.log_row(r)[j]
    }

    pub fn to_categorical(&self) -> CategoricalTable {
        let probs = (0..self.n_rows).flat_map(|r| self.row_probs(r)).collect();
        CategoricalTable {
            n_rows: self.n_rows,
            n_outcomes: self.n_outcomes,
            probs,
        }
    }

    pub fn sample(&self, r: usize, rng: &mut Rng) -> usize {
        sample_categorical(&self.row_probs(r), rng)
    }

    /// Adds `upstream * d ln p(j | r) / d logits` into `grad`.
    pub fn backprop_log_prob(&self, r: usize, j: usize, upstream: f64, grad: &mut [f64]) {
        let base = r * self.n_outcomes;
        let probs = self.row_probs(r);
        for (k, p) in probs.iter().enumerate() {
            if self.allowed(base + k) {
                let indicator = if k == j { 1.0 } else { 0.0 };
                grad[base + k] += upstream * (indicator - p);
            }
        }
    }

    fn expectation_points(&self, r: usize, mode: Expectation, rng: &mut Rng) -> Result<Vec<(usize, f64)>> {
        self.check_row(r)?;
        let probs = self.row_probs(r);
        Ok(match mode {
            Expectation::Exact => probs
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(j, p)| (j, *p))
                .collect(),
            Expectation::Samples(k) => {
                if k == 0 {
                    return arg("need at least one sample");
                }
                (0..k)
                    .map(|_| (sample_categorical(&probs, rng), 1.0 / k as f64))
                    .collect()
            }
        })
    }

    /// Exact `sum_j p_j (ln p_j - target_j)` for one row, with its gradient
    /// scaled by `weight` added into `grad`.
    fn improvement(&self, r: usize, target: &dyn LogTarget<usize>, weight: f64, grad: &mut [f64]) -> f64 {
        let base = r * self.n_outcomes;
        let log_p = self.log_row(r);
        let mut value = 0.0;
        let mut advantages = vec![0.0; self.n_outcomes];
        for j in 0..self.n_outcomes {
            if log_p[j] == f64::NEG_INFINITY {
                continue;
            }
            let p = log_p[j].exp();
            let a = log_p[j] - target.log_target(&j);
            advantages[j] = a;
            value += p * a;
        }
        if value.is_finite() {
            for j in 0..self.n_outcomes {
                if log_p[j] > f64::NEG_INFINITY {
                    grad[base + j] += weight * log_p[j].exp() * (advantages[j] - value);
                }
            }
        }
        value
    }
}

impl Parametric for SoftmaxTable {
    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn manifest(&self) -> Vec<ParamBlock> {
        vec![ParamBlock::new("logits", vec![self.n_rows, self.n_outcomes])]
    }
}

/// Tabular softmax policy `b(u | x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub table: SoftmaxTable,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            table: SoftmaxTable::uniform(n_states, n_actions),
        }
    }

    pub fn from_table(table: &CategoricalTable) -> Self {
        Self {
            table: SoftmaxTable::from_probs(table),
        }
    }

    pub fn n_states(&self) -> usize {
        self.table.n_rows()
    }

    pub fn n_actions(&self) -> usize {
        self.table.n_outcomes()
    }

    pub fn to_categorical(&self) -> CategoricalTable {
        self.table.to_categorical()
    }
}

impl Parametric for TabularPolicy {
    fn params(&self) -> &[f64] {
        self.table.params()
    }
    fn params_mut(&mut self) -> &mut [f64] {
        self.table.params_mut()
    }
    fn manifest(&self) -> Vec<ParamBlock> {
        self.table.manifest()
    }
}

impl Policy<usize, usize> for TabularPolicy {
    fn sample_action(&self, x: &usize, rng: &mut Rng) -> usize {
        self.table.sample(*x, rng)
    }
}

impl PolicyMap<usize, usize> for TabularPolicy {
    fn log_prob(&self, x: &usize, u: &usize) -> f64 {
        self.table.log_prob(*x, *u)
    }

    fn backprop_log_prob(&self, x: &usize, u: &usize, upstream: f64, grad: &mut [f64]) {
        self.table.backprop_log_prob(*x, *u, upstream, grad);
    }

    fn log_prob_action_grad(&self, _x: &usize, _u: &usize) -> Result<Vec<f64>> {
        Err(Error::Argument("tabular maps have no sample gradient".into()))
    }

    fn expectation_points(&self, x: &usize, mode: Expectation, rng: &mut Rng) -> Result<Vec<(usize, f64)>> {
        self.table.expectation_points(*x, mode, rng)
    }

    fn improvement(
        &self,
        x: &usize,
        target: &dyn LogTarget<usize>,
        _k: usize,
        _rng: &mut Rng,
        weight: f64,
        grad: &mut [f64],
    ) -> f64 {
        self.table.improvement(*x, target, weight, grad)
    }
}

/// Tabular softmax model `q(x' | x, u)`; row index `x * n_actions + u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularModel {
    pub table: SoftmaxTable,
    n_actions: usize,
}

impl TabularModel {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            table: SoftmaxTable::uniform(n_states * n_actions, n_states),
            n_actions,
        }
    }

    pub fn from_table(table: &CategoricalTable, n_actions: usize) -> Result<Self> {
        if !table.n_rows().is_multiple_of(n_actions) || table.n_rows() / n_actions != table.n_outcomes() {
            return arg("model table must have n_states * n_actions rows over n_states outcomes");
        }
        Ok(Self {
            table: SoftmaxTable::from_probs(table),
            n_actions,
        })
    }

    /// Uniform over the next states allowed by `mask` (`[x][u][x']` order).
    pub fn uniform_masked(n_states: usize, n_actions: usize, mask: Vec<bool>) -> Result<Self> {
        Ok(Self {
            table: SoftmaxTable::uniform(n_states * n_actions, n_states).with_mask(mask)?,
            n_actions,
        })
    }

    pub fn n_states(&self) -> usize {
        self.table.n_outcomes()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn row(&self, x: usize, u: usize) -> usize {
        x * self.n_actions + u
    }

    pub fn to_categorical(&self) -> CategoricalTable {
        self.table.to_categorical()
    }
}

impl Parametric for TabularModel {
    fn params(&self) -> &[f64] {
        self.table.params()
    }
    fn params_mut(&mut self) -> &mut [f64] {
        self.table.params_mut()
    }
    fn manifest(&self) -> Vec<ParamBlock> {
        self.table.manifest()
    }
}

impl ModelMap<usize, usize> for TabularModel {
    fn log_prob(&self, x: &usize, u: &usize, x_next: &usize) -> f64 {
        self.table.log_prob(self.row(*x, *u), *x_next)
    }

    fn sample(&self, x: &usize, u: &usize, rng: &mut Rng) -> usize {
        self.table.sample(self.row(*x, *u), rng)
    }

    fn backprop_log_prob(&self, x: &usize, u: &usize, x_next: &usize, upstream: f64, grad: &mut [f64]) {
        self.table.backprop_log_prob(self.row(*x, *u), *x_next, upstream, grad);
    }

    fn log_prob_next_grad(&self, _x: &usize, _u: &usize, _x_next: &usize) -> Result<Vec<f64>> {
        Err(Error::Argument("tabular maps have no sample gradient".into()))
    }

    fn expectation_points(&self, x: &usize, u: &usize, mode: Expectation, rng: &mut Rng) -> Result<Vec<(usize, f64)>> {
        self.table.expectation_points(self.row(*x, *u), mode, rng)
    }

    fn improvement(
        &self,
        x: &usize,
        u: &usize,
        target: &dyn LogTarget<usize>,
        _k: usize,
        _rng: &mut Rng,
        weight: f64,
        grad: &mut [f64],
    ) -> f64 {
        self.table.improvement(self.row(*x, *u), target, weight, grad)
    }
}

/// Tabular state function, e.g. `r(x)` or `V(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTable {
    pub values: Vec<f64>,
}

impl StateTable {
    pub fn zeros(n_states: usize) -> Self {
        Self {
            values: vec![0.0; n_states],
        }
    }
}

impl Parametric for StateTable {
    fn params(&self) -> &[f64] {
        &self.values
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    fn manifest(&self) -> Vec<ParamBlock> {
        vec![ParamBlock::new("values", vec![self.values.len()])]
    }
}

impl StateFunction<usize> for StateTable {
    fn eval(&self, x: &usize) -> f64 {
        self.values[*x]
    }

    fn backprop(&self, x: &usize, upstream: f64, grad: &mut [f64]) {
        grad[*x] += upstream;
    }

    fn input_grad(&self, _x: &usize) -> Result<Vec<f64>> {
        Err(Error::Argument("tabular functions have no input gradient".into()))
    }
}

/// Tabular state-action function `Q(x, u)`, stored row-major by state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateActionTable {
    pub values: Vec<f64>,
    n_actions: usize,
}

impl StateActionTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            values: vec![0.0; n_states * n_actions],
            n_actions,
        }
    }

    pub fn from_values(values: Vec<f64>, n_actions: usize) -> Result<Self> {
        if n_actions == 0 || !values.len().is_multiple_of(n_actions) {
            return arg("Q table size is not a multiple of n_actions");
        }
        Ok(Self { values, n_actions })
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
}

impl Parametric for StateActionTable {
    fn params(&self) -> &[f64] {
        &self.values
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    fn manifest(&self) -> Vec<ParamBlock> {
        vec![ParamBlock::new(
            "values",
            vec![self.values.len() / self.n_actions, self.n_actions],
        )]
    }
}

impl StateActionFunction<usize, usize> for StateActionTable {
    fn eval(&self, x: &usize, u: &usize) -> f64 {
        self.values[x * self.n_actions + u]
    }

    fn backprop(&self, x: &usize, u: &usize, upstream: f64, grad: &mut [f64]) {
        grad[x * self.n_actions + u] += upstream;
    }

    fn action_grad(&self, _x: &usize, _u: &usize) -> Result<Vec<f64>> {
        Err(Error::Argument("tabular functions have no input gradient".into()))
    }
}

/// Random logits in `[-scale, scale]`, handy for tests and restarts.
pub fn randomize(params: &mut [f64], scale: f64, rng: &mut Rng) {
    for p in params {
        *p = rng.gen_range(-scale..=scale);
    }
}
