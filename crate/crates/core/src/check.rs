//! Self-checks with a pass/fail verdict, shared by the `check` command and the
//! acceptance tests.
//!
//! Each check returns a [`CheckOutcome`] instead of panicking so that a caller
//! can print every verdict before deciding what to do with a failure.

use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng as _;

use crate::approx::{
    grad_check_subset, randomize, Backend, CategoricalTable, Continuous, Expectation, GaussianModel, GaussianPolicy,
    Parametric, Tabular, TabularModel, TabularPolicy,
};
use crate::error::Result;
use crate::eval::{interactions_to_reach, median, run_experiment, run_file_name, ExperimentConfig, ExperimentOutput};
use crate::losses::{
    d_model, d_policy, loss_bc, loss_ermbc, loss_improve_model, loss_improve_policy, loss_model_disc,
    loss_model_nll, loss_policy_disc, loss_policy_eval, loss_policy_eval_against, DiscForm, NextStates, ValueFn,
    ValueGrad,
};
use crate::mdp::{TabularMdp, Transition};
use crate::oracle::{induced_model, inner_objective, solve, SolveResult, DEFAULT_MAX_ITER};
use crate::train::Variant;
use crate::{seeded_rng, RegularizationConfig, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} ({:.2?})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed
        )
    }
}

/// Runs `body`, turning an error into a failed outcome.
fn timed(name: &str, body: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = body().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn within(outcome: CheckOutcome, budget: Duration) -> CheckOutcome {
    if outcome.elapsed <= budget {
        return outcome;
    }
    CheckOutcome {
        passed: false,
        detail: format!("{}; over the {budget:?} budget", outcome.detail),
        ..outcome
    }
}

/// Row-stochastic table with entries bounded away from zero.
pub fn random_table(rows: usize, cols: usize, rng: &mut Rng) -> CategoricalTable {
    let mut probs = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|v| v / s));
    }
    CategoricalTable::new(rows, cols, probs).expect("rows are normalized")
}

/// A random MDP together with full-support baselines and its oracle solution.
pub struct Solved {
    pub mdp: TabularMdp,
    pub q: CategoricalTable,
    pub b: CategoricalTable,
    pub cfg: RegularizationConfig,
    pub result: SolveResult,
}

impl Solved {
    pub fn value_fn(&self) -> Result<ValueFn<Tabular>> {
        ValueFn::from_tables(self.mdp.rewards(), &self.result.values)
    }

    pub fn models(&self) -> Result<(TabularModel, TabularPolicy)> {
        Ok((
            TabularModel::from_table(&self.q, self.mdp.n_actions())?,
            TabularPolicy::from_table(&self.b),
        ))
    }
}

pub fn solved_random(n_states: usize, n_actions: usize, kappa: f64, eta: f64, rng: &mut Rng) -> Result<Solved> {
    let mdp = TabularMdp::random(n_states, n_actions, 0.9, rng)?;
    let q = random_table(n_states * n_actions, n_states, rng);
    let b = random_table(n_states, n_actions, rng);
    let cfg = RegularizationConfig::new(kappa, eta, 0.9)?;
    let result = solve(&mdp, &q, &b, &cfg, 1e-11, DEFAULT_MAX_ITER)?;
    Ok(Solved { mdp, q, b, cfg, result })
}

/// The 20 random MDPs shared by the oracle checks: 2 to 10 states, 1 to 4
/// actions, gamma 0.9, kappa = eta = 2.
pub fn test_mdps() -> Result<Vec<Solved>> {
    let mut rng = seeded_rng(2024);
    (0..20)
        .map(|_| {
            let ns = rng.gen_range(2..=10);
            let na = rng.gen_range(1..=4);
            solved_random(ns, na, 2.0, 2.0, &mut rng)
        })
        .collect()
}

/// Soft value iteration converges and the induced maps are stochastic.
pub fn oracle_fixed_point() -> CheckOutcome {
    let out = timed("oracle fixed point", || {
        let mut rng = seeded_rng(2024);
        let (mut worst_res, mut worst_row, mut worst_iter) = (0.0f64, 0.0f64, 0usize);
        for _ in 0..20 {
            let ns = rng.gen_range(2..=10);
            let na = rng.gen_range(1..=4);
            let mdp = TabularMdp::random(ns, na, 0.9, &mut rng)?;
            let q = random_table(ns * na, ns, &mut rng);
            let b = random_table(ns, na, &mut rng);
            let cfg = RegularizationConfig::new(2.0, 2.0, 0.9)?;
            let res = solve(&mdp, &q, &b, &cfg, 1e-10, DEFAULT_MAX_ITER)?;
            worst_res = worst_res.max(res.residual);
            worst_iter = worst_iter.max(res.iterations);
            worst_row = worst_row
                .max(res.expert_model.max_row_error())
                .max(res.expert_policy.max_row_error());
        }
        let passed = worst_res < 1e-10 && worst_iter <= DEFAULT_MAX_ITER && worst_row < 1e-9;
        Ok((
            passed,
            format!("20 MDPs, max residual {worst_res:.2e} after at most {worst_iter} iterations, max row error {worst_row:.2e}"),
        ))
    });
    within(out, Duration::from_secs(10))
}

/// The induced model row maximizes the one-step regularized objective, and
/// the maximum equals `Q(x, u)`.
pub fn inner_optimality() -> CheckOutcome {
    let out = timed("inner optimality", || {
        let mut rng = seeded_rng(7);
        let s = solved_random(5, 3, 2.0, 2.0, &mut rng)?;
        let p = induced_model(&s.result.values, &s.mdp, &s.q, &s.cfg)?;
        let (ns, na) = (5, 3);
        let (mut worst_gap, mut violations) = (0.0f64, 0usize);
        let mut smallest_margin = f64::INFINITY;
        for x in 0..ns {
            for u in 0..na {
                let row = p.row(x * na + u);
                let at_p = inner_objective(row, x, u, &s.result.values, &s.mdp, &s.q, &s.cfg)?;
                worst_gap = worst_gap.max((at_p - s.result.values.q(x, u)).abs());
                for _ in 0..100 {
                    let scale = rng.gen_range(0.01..1.0);
                    let mut tilted: Vec<f64> = row.iter().map(|v| v * (scale * rng.gen_range(-1.0..1.0f64)).exp()).collect();
                    let z: f64 = tilted.iter().sum();
                    tilted.iter_mut().for_each(|v| *v /= z);
                    let other = inner_objective(&tilted, x, u, &s.result.values, &s.mdp, &s.q, &s.cfg)?;
                    smallest_margin = smallest_margin.min(at_p - other);
                    if other >= at_p {
                        violations += 1;
                    }
                }
            }
        }
        Ok((
            worst_gap < 1e-8 && violations == 0,
            format!("max |objective - Q| {worst_gap:.2e}, {violations} of 1500 perturbations not worse, smallest margin {smallest_margin:.2e}"),
        ))
    });
    within(out, Duration::from_secs(5))
}

/// Oracle `(r, V, Q)` make both discriminators the Bradley-Terry ratios.
pub fn closed_form_discriminators() -> CheckOutcome {
    timed("closed-form discriminators", || {
        let (mut worst_m, mut worst_p) = (0.0f64, 0.0f64);
        for s in test_mdps()? {
            let vf = s.value_fn()?;
            let (qm, bm) = s.models()?;
            let (ns, na) = (s.mdp.n_states(), s.mdp.n_actions());
            for x in 0..ns {
                for u in 0..na {
                    let (pi, b) = (s.result.expert_policy.prob(x, u), s.b.prob(x, u));
                    worst_p = worst_p.max((d_policy(&vf, &bm, &x, &u, &s.cfg)? - pi / (pi + b)).abs());
                    for xn in 0..ns {
                        let row = x * na + u;
                        let (p, q) = (s.result.expert_model.prob(row, xn), s.q.prob(row, xn));
                        let t = Transition::new(x, u, xn);
                        worst_m = worst_m.max((d_model(&vf, &qm, &t, &s.cfg)? - p / (p + q)).abs());
                    }
                }
            }
        }
        Ok((
            worst_m < 1e-8 && worst_p < 1e-8,
            format!("20 MDPs, max |D_model - p/(p+q)| {worst_m:.2e}, max |D_policy - pi/(pi+b)| {worst_p:.2e}"),
        ))
    })
}

fn all_pairs(ns: usize, na: usize) -> Vec<(Transition<usize, usize>, f64)> {
    let w = 1.0 / (ns * na) as f64;
    (0..ns).flat_map(|x| (0..na).map(move |u| (Transition::new(x, u, x), w))).collect()
}

/// The policy-evaluation loss vanishes at the oracle values.
pub fn bellman_residual_zero() -> CheckOutcome {
    timed("Bellman residual zero", || {
        let mut worst = 0.0f64;
        let mut rng = seeded_rng(0);
        for s in test_mdps()? {
            let vf = s.value_fn()?;
            let (qm, bm) = s.models()?;
            let next = NextStates::Model {
                q: &qm,
                mode: Expectation::Exact,
            };
            let batch = all_pairs(s.mdp.n_states(), s.mdp.n_actions());
            let out = loss_policy_eval(&vf, &next, &bm, Expectation::Exact, &batch, &s.cfg, &mut rng)?;
            worst = worst.max(out.value);
        }
        Ok((worst < 1e-12, format!("20 MDPs, max loss {worst:.2e}")))
    })
}

/// All `(x, u, x')` triples weighted by `d(x) pol(u|x) dyn(x'|x,u)`.
pub fn enumerate(d: &[f64], pol: &CategoricalTable, dynamics: &CategoricalTable) -> Vec<(Transition<usize, usize>, f64)> {
    let (ns, na) = (pol.n_rows(), pol.n_outcomes());
    let mut out = Vec::new();
    for x in 0..ns {
        for u in 0..na {
            for xn in 0..ns {
                let w = d[x] * pol.prob(x, u) * dynamics.prob(x * na + u, xn);
                if w > 0.0 {
                    out.push((Transition::new(x, u, xn), w));
                }
            }
        }
    }
    out
}

const GRAD_EPS: f64 = 1e-5;
const GRAD_COORDS: usize = 200;

/// Worst relative error of a [`ValueGrad`] against central differences over
/// the flattened `[r, v, q]` parameters.
fn value_grad_error<B: Backend, F>(vf: &ValueFn<B>, loss: F, rng: &mut Rng) -> Result<f64>
where
    F: Fn(&ValueFn<B>) -> Result<(f64, ValueGrad)>,
{
    let (_, g) = loss(vf)?;
    let (nr, nv) = (vf.r.n_params(), vf.v.n_params());
    let rebuild = |p: &[f64]| {
        let mut w = vf.clone();
        w.r.params_mut().copy_from_slice(&p[..nr]);
        w.v.params_mut().copy_from_slice(&p[nr..nr + nv]);
        w.q.params_mut().copy_from_slice(&p[nr + nv..]);
        w
    };
    let flat: Vec<f64> = vf.r.params().iter().chain(vf.v.params()).chain(vf.q.params()).copied().collect();
    let f = |p: &[f64]| loss(&rebuild(p)).map(|(v, _)| v).unwrap_or(f64::NAN);
    grad_check_subset(&f, &flat, &g.flat(), GRAD_EPS, GRAD_COORDS, rng)
}

/// Worst relative error of a gradient with respect to a map's parameters.
fn map_grad_error<M: Parametric + Clone>(
    map: &M,
    analytic: &[f64],
    loss: impl Fn(&M) -> Result<f64>,
    rng: &mut Rng,
) -> Result<f64> {
    let f = |p: &[f64]| {
        let mut m = map.clone();
        m.params_mut().copy_from_slice(p);
        loss(&m).unwrap_or(f64::NAN)
    };
    grad_check_subset(&f, map.params(), analytic, GRAD_EPS, GRAD_COORDS, rng)
}

/// Per-loss worst gradient errors, named.
type GradErrors = Vec<(&'static str, f64)>;

fn record(errors: &mut GradErrors, name: &'static str, err: f64) {
    match errors.iter_mut().find(|(n, _)| *n == name) {
        Some((_, e)) => *e = e.max(err),
        None => errors.push((name, err)),
    }
}

fn tabular_gradients(errors: &mut GradErrors) -> Result<()> {
    let mut rng = seeded_rng(41);
    let s = solved_random(3, 2, 1.2, 0.9, &mut rng)?;
    let d = [1.0 / 3.0; 3];
    let pairs = CategoricalTable::uniform(3, 2);
    let real = enumerate(&d, &pairs, &s.result.expert_model);
    let sim = enumerate(&d, &pairs, &s.q);
    let expert = enumerate(&d, &s.result.expert_policy, &s.result.expert_model);
    let (frozen_q, frozen_b) = s.models()?;
    let oracle_vf = s.value_fn()?;
    for _ in 0..5 {
        let mut q = TabularModel::uniform(3, 2);
        randomize(q.params_mut(), 1.0, &mut rng);
        let mut b = TabularPolicy::uniform(3, 2);
        randomize(b.params_mut(), 1.0, &mut rng);
        let mut vf = ValueFn::<Tabular>::zeros(3, 2);
        randomize(&mut vf.r.values, 1.0, &mut rng);
        randomize(&mut vf.v.values, 1.0, &mut rng);
        randomize(&mut vf.q.values, 1.0, &mut rng);

        let e = value_grad_error(&vf, |v| loss_model_disc(v, &q, &real, &sim, &s.cfg), &mut rng)?;
        record(errors, "model discriminator (tabular)", e);
        for (name, form) in [
            ("policy discriminator (tabular)", DiscForm::ModelBased),
            ("model-free discriminator (tabular)", DiscForm::ModelFree),
        ] {
            let e = value_grad_error(&vf, |v| loss_policy_disc(v, &b, &expert, &sim, form, &s.cfg), &mut rng)?;
            record(errors, name, e);
        }
        let e = value_grad_error(
            &vf,
            |v| {
                let next = NextStates::Model {
                    q: &q,
                    mode: Expectation::Exact,
                };
                let mut r = seeded_rng(0);
                loss_policy_eval_against(v, &vf, &next, &b, Expectation::Exact, &real, &s.cfg, &mut r).map(|o| (o.value, o.grad))
            },
            &mut rng,
        )?;
        record(errors, "policy evaluation (tabular)", e);

        let (_, g) = loss_improve_model(&q, &oracle_vf, &frozen_q, &real, &s.cfg, 1, &mut seeded_rng(0))?;
        let e = map_grad_error(
            &q,
            &g,
            |m| loss_improve_model(m, &oracle_vf, &frozen_q, &real, &s.cfg, 1, &mut seeded_rng(0)).map(|o| o.0),
            &mut rng,
        )?;
        record(errors, "model improvement (tabular)", e);
        let (_, g) = loss_improve_policy(&b, &oracle_vf, &frozen_b, &real, &s.cfg, 1, &mut seeded_rng(0))?;
        let e = map_grad_error(
            &b,
            &g,
            |m| loss_improve_policy(m, &oracle_vf, &frozen_b, &real, &s.cfg, 1, &mut seeded_rng(0)).map(|o| o.0),
            &mut rng,
        )?;
        record(errors, "policy improvement (tabular)", e);

        let out = loss_ermbc(&vf, &q, &b, &expert, Expectation::Exact, Expectation::Exact, &s.cfg, &mut seeded_rng(0))?;
        let e = map_grad_error(&q, &out.q_grad, |m| loss_model_nll(m, &expert).map(|o| o.0), &mut rng)?;
        record(errors, "ERMBC model cloning (tabular)", e);
        // targets are gradient-blocked, so differences hold them at `vf`
        let e = value_grad_error(
            &vf,
            |v| {
                let grad = loss_ermbc(v, &q, &b, &expert, Expectation::Exact, Expectation::Exact, &s.cfg, &mut seeded_rng(0))?
                    .pe
                    .grad;
                let next = NextStates::Model {
                    q: &q,
                    mode: Expectation::Exact,
                };
                let frozen = loss_policy_eval_against(v, &vf, &next, &b, Expectation::Exact, &expert, &s.cfg, &mut seeded_rng(0))?;
                Ok((frozen.value, grad))
            },
            &mut rng,
        )?;
        record(errors, "ERMBC evaluation (tabular)", e);
        let (_, g) = loss_bc(&b, &expert)?;
        let e = map_grad_error(&b, &g, |m| loss_bc(m, &expert).map(|o| o.0), &mut rng)?;
        record(errors, "behavior cloning (tabular)", e);
    }
    Ok(())
}

fn mlp_gradients(errors: &mut GradErrors) -> Result<()> {
    let mut rng = seeded_rng(50);
    let cfg = RegularizationConfig::new(1.0, 2.0, 0.9)?;
    let items: Vec<Transition<Vec<f64>, Vec<f64>>> = (0..4)
        .map(|_| {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x_next: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + 0.1 * b).collect();
            Transition { x, u, x_next }
        })
        .collect();
    let w = 1.0 / items.len() as f64;
    let batch: Vec<_> = items.into_iter().map(|t| (t, w)).collect();
    for _ in 0..5 {
        let vf = ValueFn::<Continuous>::mlp(2, 2, &mut rng)?;
        let q = GaussianModel::new(2, 2, &mut rng)?;
        let b = GaussianPolicy::new(2, 2, &mut rng)?;

        let e = value_grad_error(&vf, |v| loss_model_disc(v, &q, &batch, &batch, &cfg), &mut rng)?;
        record(errors, "model discriminator (MLP)", e);
        for (name, form) in [
            ("policy discriminator (MLP)", DiscForm::ModelBased),
            ("model-free discriminator (MLP)", DiscForm::ModelFree),
        ] {
            let e = value_grad_error(&vf, |v| loss_policy_disc(v, &b, &batch, &batch, form, &cfg), &mut rng)?;
            record(errors, name, e);
        }
        let e = value_grad_error(
            &vf,
            |v| {
                let next = NextStates::Model {
                    q: &q,
                    mode: Expectation::Samples(4),
                };
                let mut r = seeded_rng(3);
                loss_policy_eval_against(v, &vf, &next, &b, Expectation::Samples(4), &batch, &cfg, &mut r)
                    .map(|o| (o.value, o.grad))
            },
            &mut rng,
        )?;
        record(errors, "policy evaluation (MLP)", e);

        // pathwise gradients with common random numbers
        let (_, g) = loss_improve_model(&q, &vf, &q, &batch, &cfg, 3, &mut seeded_rng(9))?;
        let e = map_grad_error(&q, &g, |m| loss_improve_model(m, &vf, &q, &batch, &cfg, 3, &mut seeded_rng(9)).map(|o| o.0), &mut rng)?;
        record(errors, "model improvement (MLP)", e);
        let (_, g) = loss_improve_policy(&b, &vf, &b, &batch, &cfg, 3, &mut seeded_rng(9))?;
        let e = map_grad_error(&b, &g, |m| loss_improve_policy(m, &vf, &b, &batch, &cfg, 3, &mut seeded_rng(9)).map(|o| o.0), &mut rng)?;
        record(errors, "policy improvement (MLP)", e);

        let (_, g) = loss_model_nll(&q, &batch)?;
        let e = map_grad_error(&q, &g, |m| loss_model_nll(m, &batch).map(|o| o.0), &mut rng)?;
        record(errors, "ERMBC model cloning (MLP)", e);
        let (_, g) = loss_bc(&b, &batch)?;
        let e = map_grad_error(&b, &g, |m| loss_bc(m, &batch).map(|o| o.0), &mut rng)?;
        record(errors, "behavior cloning (MLP)", e);
    }
    Ok(())
}

/// Every analytic loss gradient, tabular and MLP, at 5 random points each.
pub fn gradient_fidelity() -> CheckOutcome {
    let out = timed("gradient fidelity", || {
        let mut errors = GradErrors::new();
        tabular_gradients(&mut errors)?;
        mlp_gradients(&mut errors)?;
        let (name, worst) = errors
            .iter()
            .copied()
            .fold(("none", 0.0f64), |acc, (n, e)| if e.is_nan() || e > acc.1 { (n, e) } else { acc });
        let passed = errors.iter().all(|(_, e)| *e < 1e-4);
        Ok((passed, format!("{} losses, worst relative error {worst:.2e} ({name})", errors.len())))
    });
    within(out, Duration::from_secs(60))
}

fn descend(vf: &mut ValueFn<Tabular>, grad: &ValueGrad, lr: f64) {
    for (p, g) in vf.r.values.iter_mut().zip(&grad.r) {
        *p -= lr * g;
    }
    for (p, g) in vf.v.values.iter_mut().zip(&grad.v) {
        *p -= lr * g;
    }
    for (p, g) in vf.q.values.iter_mut().zip(&grad.q) {
        *p -= lr * g;
    }
}

/// Training both exact discriminators from zero recovers the density ratios.
pub fn ratio_recovery() -> CheckOutcome {
    let out = timed("ratio recovery", || {
        let mut rng = seeded_rng(12);
        let s = solved_random(3, 2, 1.0, 1.0, &mut rng)?;
        let (qm, bm) = s.models()?;
        let d = [1.0 / 3.0; 3];
        let pairs = CategoricalTable::uniform(3, 2);
        let real = enumerate(&d, &pairs, &s.result.expert_model);
        let sim = enumerate(&d, &pairs, &s.q);
        let expert = enumerate(&d, &s.result.expert_policy, &s.result.expert_model);
        let learner = enumerate(&d, &s.b, &s.result.expert_model);

        let mut vf = ValueFn::<Tabular>::zeros(3, 2);
        for _ in 0..20_000 {
            let (_, g) = loss_model_disc(&vf, &qm, &real, &sim, &s.cfg)?;
            descend(&mut vf, &g, 5.0);
        }
        let mut model_err = 0.0;
        for (t, _) in &real {
            let row = t.x * 2 + t.u;
            let (p, q) = (s.result.expert_model.prob(row, t.x_next), s.q.prob(row, t.x_next));
            model_err += (d_model(&vf, &qm, t, &s.cfg)? - p / (p + q)).abs();
        }
        model_err /= real.len() as f64;

        let mut vf = ValueFn::<Tabular>::zeros(3, 2);
        for _ in 0..20_000 {
            let (_, g) = loss_policy_disc(&vf, &bm, &expert, &learner, DiscForm::ModelBased, &s.cfg)?;
            descend(&mut vf, &g, 5.0);
        }
        let mut policy_err = 0.0;
        for x in 0..3 {
            for u in 0..2 {
                let (pi, b) = (s.result.expert_policy.prob(x, u), s.b.prob(x, u));
                policy_err += (d_policy(&vf, &bm, &x, &u, &s.cfg)? - pi / (pi + b)).abs();
            }
        }
        policy_err /= 6.0;
        Ok((
            model_err < 0.05 && policy_err < 0.05,
            format!("mean |D - ratio|: model {model_err:.2e}, policy {policy_err:.2e}"),
        ))
    });
    within(out, Duration::from_secs(60))
}

/// Checks that need no experiment output.
pub fn property_checks() -> Vec<CheckOutcome> {
    vec![
        oracle_fixed_point(),
        inner_optimality(),
        closed_form_discriminators(),
        bellman_residual_zero(),
        gradient_fidelity(),
        ratio_recovery(),
    ]
}

/// Names of the files a comparison run writes.
fn output_names(out: &ExperimentOutput) -> Vec<String> {
    let mut paths: Vec<&Path> = out.run_files.iter().map(|p| p.as_path()).collect();
    paths.push(&out.summary_file);
    if let Some(svg) = &out.svg_file {
        paths.push(svg);
    }
    let mut names: Vec<String> = paths
        .iter()
        .filter_map(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .collect();
    names.push("reference.csv".into());
    names.sort();
    names
}

/// Reruns `cfg` into `rerun_dir` and compares every output file of `first`
/// byte for byte.
pub fn determinism(cfg: &ExperimentConfig, first: &ExperimentOutput, rerun_dir: &Path) -> CheckOutcome {
    timed("determinism", || {
        let mut again = cfg.clone();
        again.out_dir = rerun_dir.to_path_buf();
        let second = run_experiment(&again, first.svg_file.is_some())?;
        let names = output_names(first);
        if names != output_names(&second) {
            return Ok((false, "the reruns wrote different file sets".into()));
        }
        let mut differing = Vec::new();
        for name in &names {
            if std::fs::read(cfg.out_dir.join(name))? != std::fs::read(rerun_dir.join(name))? {
                differing.push(name.as_str());
            }
        }
        Ok((
            differing.is_empty(),
            if differing.is_empty() {
                format!("{} files byte-identical", names.len())
            } else {
                format!("differing files: {differing:?}")
            },
        ))
    })
}

/// Interactions to reach `threshold` for every seed of `variant`; `None`
/// stands for never.
pub fn reach_per_seed(out: &ExperimentOutput, variant: Variant, threshold: f64) -> Vec<(u64, Option<u64>)> {
    out.runs
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| (r.seed, interactions_to_reach(&r.rows, threshold)))
        .collect()
}

fn median_reach(reach: &[(u64, Option<u64>)]) -> f64 {
    let v: Vec<f64> = reach.iter().map(|(_, r)| r.map_or(f64::INFINITY, |r| r as f64)).collect();
    median(&v)
}

fn fmt_reach(reach: &[(u64, Option<u64>)]) -> String {
    reach
        .iter()
        .map(|(s, r)| format!("{s}:{}", r.map_or("never".to_string(), |r| r.to_string())))
        .collect::<Vec<_>>()
        .join(" ")
}

/// MB-ERIL needs at most half the real interactions MF-ERIL needs to reach
/// a normalized return of 0.9, median over seeds.
pub fn sample_efficiency(out: &ExperimentOutput, elapsed: Duration) -> CheckOutcome {
    let mb = reach_per_seed(out, Variant::MbEril, 0.9);
    let mf = reach_per_seed(out, Variant::MfEril, 0.9);
    let (m_mb, m_mf) = (median_reach(&mb), median_reach(&mf));
    let passed = !mb.is_empty() && !mf.is_empty() && m_mb.is_finite() && m_mb <= 0.5 * m_mf;
    within(
        CheckOutcome {
            name: "sample efficiency".into(),
            passed,
            detail: format!(
                "median interactions to 0.9: MB-ERIL {m_mb} [{}], MF-ERIL {m_mf} [{}]",
                fmt_reach(&mb),
                fmt_reach(&mf)
            ),
            elapsed,
        },
        Duration::from_secs(15 * 60),
    )
}

/// Final held-out model NLL per seed.
pub fn final_nll_per_seed(out: &ExperimentOutput, variant: Variant) -> Vec<(u64, f64)> {
    out.runs
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| (r.seed, r.rows.last().and_then(|row| row.nll_model).unwrap_or(f64::NAN)))
        .collect()
}

/// MB-ERIL's model NLL is no worse than the maximum-likelihood Dyna model's.
pub fn nll_ordering(out: &ExperimentOutput, elapsed: Duration) -> CheckOutcome {
    let mb = final_nll_per_seed(out, Variant::MbEril);
    let dyna = final_nll_per_seed(out, Variant::DynaMfEril);
    let med = |v: &[(u64, f64)]| median(&v.iter().map(|(_, x)| *x).collect::<Vec<_>>());
    let (m_mb, m_dyna) = (med(&mb), med(&dyna));
    let show = |v: &[(u64, f64)]| v.iter().map(|(s, x)| format!("{s}:{x:.3}")).collect::<Vec<_>>().join(" ");
    CheckOutcome {
        name: "model NLL ordering".into(),
        passed: !mb.is_empty() && !dyna.is_empty() && m_mb <= m_dyna,
        detail: format!("median model NLL: MB-ERIL {m_mb:.3} [{}], Dyna-MF-ERIL {m_dyna:.3} [{}]", show(&mb), show(&dyna)),
        elapsed,
    }
}

/// Comparison-based checks on `cfg`: runs it once, derives the efficiency and
/// NLL verdicts, then reruns into `rerun_dir` for determinism.
pub fn experiment_checks(cfg: &ExperimentConfig, rerun_dir: &Path) -> Result<Vec<CheckOutcome>> {
    let start = Instant::now();
    let first = run_experiment(cfg, true)?;
    let elapsed = start.elapsed();
    for r in &first.runs {
        if r.rows.is_empty() {
            return Err(crate::Error::Argument(format!("{} produced no rows", run_file_name(r.variant, r.seed))));
        }
    }
    let efficiency = sample_efficiency(&first, elapsed);
    let nll = nll_ordering(&first, elapsed);
    let det = determinism(cfg, &first, rerun_dir);
    Ok(vec![det, efficiency, nll])
}
