//! Exact solver for the tabular Bellman equation regularized by an entropy
//! term (weight `1/kappa`) and a KL anchor to the baselines `q` and `b`
//! (weight `1/eta`).
//!
//! With `beta = kappa * eta / (kappa + eta)`:
//!
//! ```text
//! Q(x,u) = 1/beta ln sum_x' exp[beta (r(x) + gamma V(x') + ln q(x'|x,u) / eta)]
//! V(x)   = 1/beta ln sum_u  exp[beta (Q(x,u) + ln b(u|x) / eta)]
//! ```
//!
//! and the optimal dynamics and policy are the softmax rows these two
//! log-partition functions normalize.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::approx::{log_sum_exp, CategoricalTable};
use crate::error::{arg, Error, Result};
use crate::mdp::TabularMdp;
use crate::regularization::RegularizationConfig;
use crate::space::fmt_f64;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub v: Vec<f64>,
    /// Row-major `[x][u]`.
    pub q: Vec<f64>,
    pub n_actions: usize,
}

impl ValueTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            v: vec![0.0; n_states],
            q: vec![0.0; n_states * n_actions],
            n_actions,
        }
    }

    pub fn n_states(&self) -> usize {
        self.v.len()
    }

    pub fn q(&self, x: usize, u: usize) -> f64 {
        self.q[x * self.n_actions + u]
    }

    fn check_finite(&self) -> Result<()> {
        if self.v.iter().chain(&self.q).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric {
                layer: None,
                what: "value table has a non-finite entry".into(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub values: ValueTable,
    /// `pi(u|x)`, one row per state.
    pub expert_policy: CategoricalTable,
    /// `p(x'|x,u)`, row `x * n_actions + u`.
    pub expert_model: CategoricalTable,
    pub iterations: usize,
    pub residual: f64,
    /// Sup-norm change of `V` at every iteration.
    pub residual_trace: Vec<f64>,
}

fn check_shapes(mdp: &TabularMdp, q: &CategoricalTable, b: &CategoricalTable, cfg: &RegularizationConfig) -> Result<()> {
    cfg.validate()?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    if q.n_rows() != ns * na || q.n_outcomes() != ns {
        return arg(format!("baseline model must be {}x{}", ns * na, ns));
    }
    if b.n_rows() != ns || b.n_outcomes() != na {
        return arg(format!("baseline policy must be {ns}x{na}"));
    }
    if (cfg.gamma - mdp.discount()).abs() > 1e-12 {
        return arg(format!(
            "regularization discount {} differs from the MDP discount {}",
            cfg.gamma,
            mdp.discount()
        ));
    }
    Ok(())
}

fn check_support(mdp: &TabularMdp, q: &CategoricalTable, b: &CategoricalTable) -> Result<()> {
    for (i, (p, qv)) in mdp.transitions().iter().zip(q.probs()).enumerate() {
        if *p > 0.0 && *qv <= 0.0 {
            let ns = mdp.n_states();
            let row = i / ns;
            return Err(Error::Domain(format!(
                "baseline model gives zero probability to reachable transition x={} u={} x'={}",
                row / mdp.n_actions(),
                row % mdp.n_actions(),
                i % ns
            )));
        }
    }
    if let Some(i) = b.probs().iter().position(|p| *p <= 0.0) {
        return Err(Error::Domain(format!(
            "baseline policy gives zero probability to action {} in state {}",
            i % mdp.n_actions(),
            i / mdp.n_actions()
        )));
    }
    Ok(())
}

fn backup_unchecked(v: &[f64], mdp: &TabularMdp, q: &CategoricalTable, b: &CategoricalTable, cfg: &RegularizationConfig) -> ValueTable {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let beta = cfg.beta();
    let anchor = cfg.anchor_weight();
    let gamma = cfg.gamma;
    let r = mdp.rewards();
    let mut q_new = vec![0.0; ns * na];
    let mut v_new = vec![0.0; ns];
    let mut terms = Vec::with_capacity(ns.max(na));
    for x in 0..ns {
        for u in 0..na {
            terms.clear();
            for (xn, qp) in q.row(x * na + u).iter().enumerate() {
                if *qp > 0.0 {
                    terms.push(beta * (r[x] + gamma * v[xn]) + anchor * qp.ln());
                }
            }
            q_new[x * na + u] = log_sum_exp(&terms) / beta;
        }
        terms.clear();
        for (u, bp) in b.row(x).iter().enumerate() {
            terms.push(beta * q_new[x * na + u] + anchor * bp.ln());
        }
        v_new[x] = log_sum_exp(&terms) / beta;
    }
    ValueTable {
        v: v_new,
        q: q_new,
        n_actions: na,
    }
}

/// One application of the regularized Bellman operator to `values.v`.
pub fn soft_backup(
    values: &ValueTable,
    mdp: &TabularMdp,
    q: &CategoricalTable,
    b: &CategoricalTable,
    cfg: &RegularizationConfig,
) -> Result<ValueTable> {
    check_shapes(mdp, q, b, cfg)?;
    check_support(mdp, q, b)?;
    if values.n_states() != mdp.n_states() {
        return arg("value table and MDP disagree on the number of states");
    }
    values.check_finite()?;
    let out = backup_unchecked(&values.v, mdp, q, b, cfg);
    out.check_finite()?;
    Ok(out)
}

/// Iterates [`soft_backup`] from `V = 0` until successive `V` differ by less
/// than `tol` in sup norm, then materializes the optimal policy and dynamics.
pub fn solve(
    mdp: &TabularMdp,
    q: &CategoricalTable,
    b: &CategoricalTable,
    cfg: &RegularizationConfig,
    tol: f64,
    max_iter: usize,
) -> Result<SolveResult> {
    if !(tol > 0.0) {
        return arg(format!("tolerance must be positive, got {tol}"));
    }
    check_shapes(mdp, q, b, cfg)?;
    check_support(mdp, q, b)?;
    let mut v = vec![0.0; mdp.n_states()];
    let mut trace = Vec::new();
    for it in 1..=max_iter {
        let next = backup_unchecked(&v, mdp, q, b, cfg);
        next.check_finite()?;
        let residual = next
            .v
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        trace.push(residual);
        if residual < tol {
            let expert_model = induced_model(&next, mdp, q, cfg)?;
            let expert_policy = induced_policy(&next, b, cfg)?;
            return Ok(SolveResult {
                values: next,
                expert_policy,
                expert_model,
                iterations: it,
                residual,
                residual_trace: trace,
            });
        }
        v = next.v;
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual: trace.last().copied().unwrap_or(f64::INFINITY),
    })
}

/// [`solve`] with the default tolerance and iteration budget.
pub fn solve_default(mdp: &TabularMdp, q: &CategoricalTable, b: &CategoricalTable, cfg: &RegularizationConfig) -> Result<SolveResult> {
    solve(mdp, q, b, cfg, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

/// `exp(logit - ln sum exp(logits))` per row, leaving `-inf` logits at zero.
fn softmax_rows(n_rows: usize, n_outcomes: usize, mut logits: Vec<f64>) -> Result<CategoricalTable> {
    for row in logits.chunks_mut(n_outcomes) {
        let z = log_sum_exp(row);
        row.iter_mut().for_each(|l| *l = (*l - z).exp());
    }
    CategoricalTable::new(n_rows, n_outcomes, logits)
}

/// `p(x'|x,u) = exp[beta (r(x) + gamma V(x') + ln q / eta) - beta Q(x,u)]`.
///
/// The normalizer `beta Q(x,u)` is recomputed from `V` by log-sum-exp rather
/// than read from the table, so rows sum to one even at large `beta` where a
/// `1e-10` value residual would otherwise be amplified.
pub fn induced_model(values: &ValueTable, mdp: &TabularMdp, q: &CategoricalTable, cfg: &RegularizationConfig) -> Result<CategoricalTable> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    if q.n_rows() != ns * na || q.n_outcomes() != ns || values.n_states() != ns {
        return arg("shape mismatch between values, MDP and baseline model");
    }
    let beta = cfg.beta();
    let anchor = cfg.anchor_weight();
    let r = mdp.rewards();
    let mut logits = vec![f64::NEG_INFINITY; ns * na * ns];
    for x in 0..ns {
        for u in 0..na {
            let row = x * na + u;
            for xn in 0..ns {
                let qp = q.prob(row, xn);
                if qp > 0.0 {
                    logits[row * ns + xn] = beta * (r[x] + cfg.gamma * values.v[xn]) + anchor * qp.ln();
                }
            }
        }
    }
    softmax_rows(ns * na, ns, logits)
}

/// `pi(u|x) = exp[beta (Q(x,u) + ln b / eta) - beta V(x)]`, normalized the
/// same way as [`induced_model`].
pub fn induced_policy(values: &ValueTable, b: &CategoricalTable, cfg: &RegularizationConfig) -> Result<CategoricalTable> {
    let (ns, na) = (values.n_states(), values.n_actions);
    if b.n_rows() != ns || b.n_outcomes() != na {
        return arg("shape mismatch between values and baseline policy");
    }
    let beta = cfg.beta();
    let anchor = cfg.anchor_weight();
    let mut logits = vec![f64::NEG_INFINITY; ns * na];
    for x in 0..ns {
        for u in 0..na {
            let bp = b.prob(x, u);
            if bp > 0.0 {
                logits[x * na + u] = beta * values.q(x, u) + anchor * bp.ln();
            }
        }
    }
    softmax_rows(ns, na, logits)
}

/// Regularized one-step objective of a candidate next-state distribution:
/// `sum p~ [r(x) + gamma V(x') - ln p~ / kappa - ln(p~ / q) / eta]`.
/// Its maximum over `p_tilde` is `Q(x, u)`, attained by the induced model row.
#[allow(clippy::too_many_arguments)]
pub fn inner_objective(
    p_tilde: &[f64],
    x: usize,
    u: usize,
    values: &ValueTable,
    mdp: &TabularMdp,
    q: &CategoricalTable,
    cfg: &RegularizationConfig,
) -> Result<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    if x >= ns || u >= na || p_tilde.len() != ns {
        return arg("state, action or distribution size out of range");
    }
    if p_tilde.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (p_tilde.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return arg("p_tilde is not a probability vector");
    }
    let q_row = q.row(x * na + u);
    let mut total = 0.0;
    for (xn, (&pt, &qp)) in p_tilde.iter().zip(q_row).enumerate() {
        if pt == 0.0 {
            continue;
        }
        if qp <= 0.0 {
            return arg(format!("p_tilde puts mass on x'={xn} outside the baseline support"));
        }
        total += pt
            * (mdp.rewards()[x] + cfg.gamma * values.v[xn] - cfg.inv_kappa() * pt.ln() - cfg.inv_eta() * (pt / qp).ln());
    }
    Ok(total)
}

/// `1/beta ln(p/q)` per `(x, u, x')` and `1/beta ln(pi/b)` per `(x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRatioTables {
    /// Row-major `[x][u][x']`; `NaN` where `q` is zero.
    pub model: Vec<f64>,
    /// Row-major `[x][u]`.
    pub policy: Vec<f64>,
}

/// Both scaled log density ratios computed from the values alone:
/// `r + gamma V' - Q - ln q / kappa` and `Q - V - ln b / kappa`.
pub fn log_density_ratios(
    values: &ValueTable,
    mdp: &TabularMdp,
    q: &CategoricalTable,
    b: &CategoricalTable,
    cfg: &RegularizationConfig,
) -> Result<LogRatioTables> {
    check_shapes(mdp, q, b, cfg)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let r = mdp.rewards();
    let mut model = vec![f64::NAN; ns * na * ns];
    let mut policy = vec![0.0; ns * na];
    for x in 0..ns {
        for u in 0..na {
            let row = x * na + u;
            for xn in 0..ns {
                let qp = q.prob(row, xn);
                if qp > 0.0 {
                    model[row * ns + xn] = r[x] + cfg.gamma * values.v[xn] - values.q(x, u) - cfg.inv_kappa() * qp.ln();
                }
            }
            policy[row] = values.q(x, u) - values.v[x] - cfg.inv_kappa() * b.prob(x, u).ln();
        }
    }
    Ok(LogRatioTables { model, policy })
}

/// Writes one row per `(x, u, x')` with `q > 0` or `p > 0`:
/// `x,u,x_next,p,q,pi,b,v,q_value,model_log_ratio,policy_log_ratio`.
pub fn write_csv<W: Write>(
    mut out: W,
    result: &SolveResult,
    mdp: &TabularMdp,
    q: &CategoricalTable,
    b: &CategoricalTable,
    cfg: &RegularizationConfig,
) -> Result<()> {
    let ratios = log_density_ratios(&result.values, mdp, q, b, cfg)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    writeln!(out, "x,u,x_next,p,q,pi,b,v,q_value,model_log_ratio,policy_log_ratio")?;
    for x in 0..ns {
        for u in 0..na {
            let row = x * na + u;
            for xn in 0..ns {
                let (p, qp) = (result.expert_model.prob(row, xn), q.prob(row, xn));
                if p == 0.0 && qp == 0.0 {
                    continue;
                }
                writeln!(
                    out,
                    "{x},{u},{xn},{},{},{},{},{},{},{},{}",
                    fmt_f64(p),
                    fmt_f64(qp),
                    fmt_f64(result.expert_policy.prob(x, u)),
                    fmt_f64(b.prob(x, u)),
                    fmt_f64(result.values.v[x]),
                    fmt_f64(result.values.q(x, u)),
                    fmt_f64(ratios.model[row * ns + xn]),
                    fmt_f64(ratios.policy[row]),
                )?;
            }
        }
    }
    Ok(())
}

pub fn save_csv(
    path: impl AsRef<Path>,
    result: &SolveResult,
    mdp: &TabularMdp,
    q: &CategoricalTable,
    b: &CategoricalTable,
    cfg: &RegularizationConfig,
) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_csv(file, result, mdp, q, b, cfg)
}

/// Baselines that make the oracle reproduce a given MDP: `q` uniform on the
/// support of its transitions and `b` uniform over actions.
pub fn support_baselines(mdp: &TabularMdp) -> Result<(CategoricalTable, CategoricalTable)> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let q = CategoricalTable::uniform_on_support(ns * na, ns, mdp.transitions())?;
    Ok((q, CategoricalTable::uniform(ns, na)))
}

/// Transition matrix of the MDP as a table.
pub fn transition_table(mdp: &TabularMdp) -> Result<CategoricalTable> {
    CategoricalTable::new(mdp.n_states() * mdp.n_actions(), mdp.n_states(), mdp.transitions().to_vec())
}
