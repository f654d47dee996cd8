//! Metrics, experiment configs and the comparison harness.
//!
//! An experiment trains every configured variant from every seed on one
//! tabular task, writes one metrics CSV per run, then reduces the files it
//! wrote into a summary with median and one-standard-deviation bands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::approx::{ModelMap, PolicyMap};
use crate::error::{arg, Error, Result};
use crate::losses::LOG_FLOOR;
use crate::mdp::{rollout, Environment, MdpSpec, Policy, TabularMdp, TransitionBuffer};
use crate::regularization::RegularizationConfig;
use crate::space::{fmt_f64, Space};
use crate::train::{expert_solution, make_expert, train, IterationReport, Schedule, TrainSetup, Variant};
use crate::{stream_rng, Rng};

/// Mean of `(R_i - R_min) / (R_max - R_min)`.
pub fn normalized_return(returns: &[f64], r_max: f64, r_min: f64) -> Result<f64> {
    if !(r_max > r_min) {
        return arg(format!("normalized return needs R_max > R_min, got {r_max} and {r_min}"));
    }
    if returns.is_empty() {
        return arg("no returns to normalize");
    }
    let span = r_max - r_min;
    Ok(returns.iter().map(|r| (r - r_min) / span).sum::<f64>() / returns.len() as f64)
}

/// `-mean ln b(u|x)` over test transitions, each term floored at `LOG_FLOOR`.
pub fn nll_policy<S: Space, A: Space, P: PolicyMap<S, A>>(b: &P, test: &TransitionBuffer<S, A>) -> Result<f64> {
    if test.is_empty() {
        return arg("NLL needs a nonempty test set");
    }
    let total: f64 = test.iter().map(|t| b.log_prob(&t.x, &t.u).max(LOG_FLOOR)).sum();
    finite_nll(-total / test.len() as f64)
}

/// `-mean ln q(x'|x,u)` over test transitions, each term floored at `LOG_FLOOR`.
pub fn nll_model<S: Space, A: Space, M: ModelMap<S, A>>(q: &M, test: &TransitionBuffer<S, A>) -> Result<f64> {
    if test.is_empty() {
        return arg("NLL needs a nonempty test set");
    }
    let total: f64 = test.iter().map(|t| q.log_prob(&t.x, &t.u, &t.x_next).max(LOG_FLOOR)).sum();
    finite_nll(-total / test.len() as f64)
}

fn finite_nll(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric {
            layer: None,
            what: "negative log-likelihood is not finite".into(),
        })
    }
}

/// Undiscounted return `sum_t r(x_t)` of each of `episodes` fresh rollouts.
pub fn episode_returns<E, P>(env: &E, policy: &P, episodes: usize, horizon: usize, rng: &mut Rng) -> Result<Vec<f64>>
where
    E: Environment,
    P: Policy<E::State, E::Action> + ?Sized,
{
    if episodes == 0 {
        return arg("evaluate at least one episode");
    }
    (0..episodes)
        .map(|_| {
            let traj = rollout(env, policy, horizon, rng)?;
            Ok(traj.transitions.iter().map(|t| env.reward(&t.x)).sum())
        })
        .collect()
}

/// Mean of [`episode_returns`].
pub fn evaluate_policy<E, P>(env: &E, policy: &P, episodes: usize, horizon: usize, rng: &mut Rng) -> Result<f64>
where
    E: Environment,
    P: Policy<E::State, E::Action> + ?Sized,
{
    let r = episode_returns(env, policy, episodes, horizon, rng)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// Regularization strengths of an experiment; the discount comes from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizationSection {
    pub kappa: f64,
    pub eta: f64,
    #[serde(default = "one")]
    pub lambda_model: f64,
    #[serde(default = "one")]
    pub lambda_policy: f64,
    #[serde(default = "one")]
    pub lambda_qv: f64,
    #[serde(default = "one")]
    pub lambda_vq: f64,
}

fn one() -> f64 {
    1.0
}

/// Expert-size sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub trajectories: Vec<usize>,
}

/// A full comparison: task, variants, seeds and all sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: MdpSpec,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub regularization: RegularizationSection,
    #[serde(default)]
    pub schedule: Schedule,
    /// Expert trajectories in `D^E`, each `schedule.horizon` long.
    pub expert_trajectories: usize,
    /// Held-out expert trajectories for the NLL columns.
    #[serde(default = "default_test_trajectories")]
    pub test_trajectories: usize,
    /// Seed for the expert datasets and the `R_max` measurement.
    #[serde(default)]
    pub expert_seed: u64,
    /// Episodes of the oracle expert averaged into `R_max`.
    #[serde(default = "default_reference_episodes")]
    pub reference_episodes: usize,
    #[serde(default)]
    pub r_min: f64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

fn default_test_trajectories() -> usize {
    10
}
fn default_reference_episodes() -> usize {
    100
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return arg("config lists no variants");
        }
        if self.seeds.is_empty() {
            return arg("config lists no seeds");
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.variants.iter().all(|v| seen.insert(*v)) {
            return arg("config lists a variant twice");
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.seeds.iter().all(|s| seen.insert(*s)) {
            return arg("config lists a seed twice");
        }
        if self.expert_trajectories == 0 || self.test_trajectories == 0 || self.reference_episodes == 0 {
            return arg("expert_trajectories, test_trajectories and reference_episodes must be positive");
        }
        if let Some(s) = &self.sweep {
            if s.trajectories.is_empty() || s.trajectories.contains(&0) {
                return arg("sweep.trajectories must be a nonempty list of positive counts");
            }
        }
        self.schedule.validate()?;
        self.reg(&self.mdp()?)?;
        Ok(())
    }

    pub fn mdp(&self) -> Result<TabularMdp> {
        TabularMdp::from_spec(&self.env)
    }

    pub fn reg(&self, mdp: &TabularMdp) -> Result<RegularizationConfig> {
        let r = &self.regularization;
        RegularizationConfig::new(r.kappa, r.eta, mdp.discount())?.with_lambdas(
            r.lambda_model,
            r.lambda_policy,
            r.lambda_qv,
            r.lambda_vq,
        )
    }
}

/// Fixed column order of the per-run metrics CSV.
pub const METRIC_COLUMNS: [&str; 11] = [
    "iteration",
    "real_interactions",
    "loss_model_disc",
    "loss_policy_disc",
    "loss_pe",
    "loss_improve_model",
    "loss_improve_policy",
    "eval_return",
    "normalized_return",
    "nll_policy",
    "nll_model",
];

/// One parsed row of a metrics CSV; absent values are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub real_interactions: u64,
    pub loss_model_disc: Option<f64>,
    pub loss_policy_disc: Option<f64>,
    pub loss_pe: Option<f64>,
    pub loss_improve_model: Option<f64>,
    pub loss_improve_policy: Option<f64>,
    pub eval_return: f64,
    pub normalized_return: f64,
    pub nll_policy: Option<f64>,
    pub nll_model: Option<f64>,
}

impl MetricRow {
    pub fn from_report(r: &IterationReport) -> Self {
        let opt = |v: f64| if v.is_finite() { Some(v) } else { None };
        // the cloning loss of the BC baseline and the maximum-likelihood
        // phase of ERMBC land in the nearest matching columns
        Self {
            iteration: r.iteration,
            real_interactions: r.real_interactions,
            loss_model_disc: opt(r.losses.model_disc),
            loss_policy_disc: opt(r.losses.policy_disc).or(opt(r.losses.total_disc)),
            loss_pe: opt(r.loss_pe),
            loss_improve_model: opt(r.losses.improve_model),
            loss_improve_policy: opt(r.losses.improve_policy),
            eval_return: r.eval_return,
            normalized_return: r.normalized_return,
            nll_policy: r.nll_policy,
            nll_model: r.nll_model,
        }
    }
}

fn opt_field(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = METRIC_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.real_interactions,
            opt_field(r.loss_model_disc),
            opt_field(r.loss_policy_disc),
            opt_field(r.loss_pe),
            opt_field(r.loss_improve_model),
            opt_field(r.loss_improve_policy),
            fmt_f64(r.eval_return),
            fmt_f64(r.normalized_return),
            opt_field(r.nll_policy),
            opt_field(r.nll_model),
        );
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty metrics file".into()))?;
    if header != METRIC_COLUMNS.join(",") {
        return Err(Error::Parse(format!("unexpected metrics header {header:?}")));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Parse(format!("bad number {s:?}"))) };
    let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != METRIC_COLUMNS.len() {
                return Err(Error::Parse(format!("metrics row has {} fields", f.len())));
            }
            Ok(MetricRow {
                iteration: f[0].parse().map_err(|_| Error::Parse(format!("bad iteration {:?}", f[0])))?,
                real_interactions: f[1]
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad interaction count {:?}", f[1])))?,
                loss_model_disc: opt(f[2])?,
                loss_policy_disc: opt(f[3])?,
                loss_pe: opt(f[4])?,
                loss_improve_model: opt(f[5])?,
                loss_improve_policy: opt(f[6])?,
                eval_return: num(f[7])?,
                normalized_return: num(f[8])?,
                nll_policy: opt(f[9])?,
                nll_model: opt(f[10])?,
            })
        })
        .collect()
}

/// Real interactions at the first evaluation reaching `threshold`.
pub fn interactions_to_reach(rows: &[MetricRow], threshold: f64) -> Option<u64> {
    rows.iter()
        .find(|r| r.normalized_return >= threshold)
        .map(|r| r.real_interactions)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Task-level quantities shared by every run of an experiment.
pub struct Prepared {
    pub mdp: TabularMdp,
    /// Real environment: the dynamics induced by the oracle solve.
    pub env: TabularMdp,
    pub reg: RegularizationConfig,
    pub expert: TransitionBuffer<usize, usize>,
    pub test: TransitionBuffer<usize, usize>,
    pub r_max: f64,
}

/// Builds the task, both expert datasets and `R_max`.
pub fn prepare(cfg: &ExperimentConfig, expert_trajectories: usize) -> Result<Prepared> {
    let mdp = cfg.mdp()?;
    let reg = cfg.reg(&mdp)?;
    let (sol, env) = expert_solution(&mdp, &reg)?;
    let h = cfg.schedule.horizon;
    let expert = make_expert(&mdp, &reg, expert_trajectories, h, &mut stream_rng(cfg.expert_seed, 0))?;
    let test = make_expert(&mdp, &reg, cfg.test_trajectories, h, &mut stream_rng(cfg.expert_seed, 1))?;
    let r_max = evaluate_policy(
        &env,
        &sol.expert_policy,
        cfg.reference_episodes,
        h,
        &mut stream_rng(cfg.expert_seed, 2),
    )?;
    if !(r_max > cfg.r_min) {
        return arg(format!("expert return {r_max} does not exceed r_min = {}", cfg.r_min));
    }
    Ok(Prepared {
        mdp,
        env,
        reg,
        expert,
        test,
        r_max,
    })
}

/// Result of one (variant, seed) run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    pub divergence: Option<String>,
    pub warnings: Vec<String>,
}

pub fn run_one(cfg: &ExperimentConfig, prep: &Prepared, variant: Variant, seed: u64) -> Result<RunOutcome> {
    let setup = TrainSetup {
        env: &prep.env,
        expert: &prep.expert,
        test: Some(&prep.test),
        cfg: prep.reg,
        schedule: cfg.schedule.clone(),
        return_range: (cfg.r_min, prep.r_max),
    };
    let run = train(variant, &setup, seed)?;
    Ok(RunOutcome {
        variant,
        seed,
        rows: run.reports().iter().map(MetricRow::from_report).collect(),
        divergence: run.divergence.map(|d| d.to_string()),
        warnings: run.warnings,
    })
}

pub fn run_file_name(variant: Variant, seed: u64) -> String {
    format!("{}_seed{}.csv", variant.name(), seed)
}

/// What [`run_experiment`] produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub r_max: f64,
    pub runs: Vec<RunOutcome>,
    pub run_files: Vec<PathBuf>,
    pub summary_file: PathBuf,
    pub svg_file: Option<PathBuf>,
}

/// Trains every (variant, seed) pair in parallel, writes the per-run CSVs,
/// then reduces them into `summary.csv` (and `returns.svg` with `svg`).
pub fn run_experiment(cfg: &ExperimentConfig, svg: bool) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let prep = prepare(cfg, cfg.expert_trajectories)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let jobs: Vec<(Variant, u64)> = cfg
        .variants
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(v, s)| run_one(cfg, &prep, v, s))
        .collect::<Result<Vec<_>>>()?;
    let mut run_files = Vec::new();
    for run in &runs {
        let path = cfg.out_dir.join(run_file_name(run.variant, run.seed));
        std::fs::write(&path, metrics_csv(&run.rows))?;
        run_files.push(path);
    }
    let mut reference = String::from("r_min,r_max,n_expert,n_test\n");
    let _ = writeln!(
        reference,
        "{},{},{},{}",
        fmt_f64(cfg.r_min),
        fmt_f64(prep.r_max),
        prep.expert.len(),
        prep.test.len()
    );
    std::fs::write(cfg.out_dir.join("reference.csv"), reference)?;

    let per_variant = read_runs(&cfg.out_dir, &cfg.variants, &cfg.seeds)?;
    let summary_file = cfg.out_dir.join("summary.csv");
    std::fs::write(&summary_file, summary_csv(&per_variant))?;
    let svg_file = if svg {
        let path = cfg.out_dir.join("returns.svg");
        std::fs::write(&path, learning_curve_svg(&per_variant))?;
        Some(path)
    } else {
        None
    };
    Ok(ExperimentOutput {
        r_max: prep.r_max,
        runs,
        run_files,
        summary_file,
        svg_file,
    })
}

/// Per-run metrics read back from `dir`, keyed by variant in config order.
pub fn read_runs(dir: &Path, variants: &[Variant], seeds: &[u64]) -> Result<Vec<(Variant, Vec<Vec<MetricRow>>)>> {
    variants
        .iter()
        .map(|&v| {
            let runs = seeds
                .iter()
                .map(|&s| parse_metrics_csv(&std::fs::read_to_string(dir.join(run_file_name(v, s)))?))
                .collect::<Result<Vec<_>>>()?;
            Ok((v, runs))
        })
        .collect()
}

pub const SUMMARY_COLUMNS: [&str; 10] = [
    "variant",
    "iteration",
    "n_runs",
    "median_real_interactions",
    "median_normalized_return",
    "mean_normalized_return",
    "sd_normalized_return",
    "median_nll_policy",
    "median_nll_model",
    "median_interactions_to_0.9",
];

/// Per-variant, per-iteration medians and bands. Iterations missing from a
/// diverged run simply contribute fewer values.
pub fn summary_csv(per_variant: &[(Variant, Vec<Vec<MetricRow>>)]) -> String {
    let mut out = SUMMARY_COLUMNS.join(",");
    out.push('\n');
    for (v, runs) in per_variant {
        let reach: Vec<f64> = runs
            .iter()
            .map(|r| interactions_to_reach(r, 0.9).map_or(f64::INFINITY, |n| n as f64))
            .collect();
        let reach_median = median(&reach);
        let mut by_iter: BTreeMap<usize, Vec<&MetricRow>> = BTreeMap::new();
        for run in runs {
            for row in run {
                by_iter.entry(row.iteration).or_default().push(row);
            }
        }
        for (it, rows) in by_iter {
            let ret: Vec<f64> = rows.iter().map(|r| r.normalized_return).collect();
            let inter: Vec<f64> = rows.iter().map(|r| r.real_interactions as f64).collect();
            let np: Vec<f64> = rows.iter().filter_map(|r| r.nll_policy).collect();
            let nm: Vec<f64> = rows.iter().filter_map(|r| r.nll_model).collect();
            let (mean, sd) = mean_sd(&ret);
            let maybe = |xs: &[f64]| if xs.is_empty() { String::new() } else { fmt_f64(median(xs)) };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                v.name(),
                it,
                rows.len(),
                fmt_f64(median(&inter)),
                fmt_f64(median(&ret)),
                fmt_f64(mean),
                fmt_f64(sd),
                maybe(&np),
                maybe(&nm),
                if reach_median.is_finite() { fmt_f64(reach_median) } else { "inf".into() },
            );
        }
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

struct Chart {
    w: f64,
    h: f64,
    margin: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
    log_x: bool,
}

impl Chart {
    fn px(&self, x: f64) -> f64 {
        let (lo, hi) = self.x_range;
        let (x, lo, hi) = if self.log_x { (x.log10(), lo.log10(), hi.log10()) } else { (x, lo, hi) };
        let t = if hi > lo { (x - lo) / (hi - lo) } else { 0.5 };
        self.margin + t * (self.w - 2.0 * self.margin)
    }

    fn py(&self, y: f64) -> f64 {
        let (lo, hi) = self.y_range;
        let t = if hi > lo { (y - lo) / (hi - lo) } else { 0.5 };
        self.h - self.margin - t * (self.h - 2.0 * self.margin)
    }

    fn open(&self, title: &str, x_label: &str, y_label: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">"#,
            self.w, self.h
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let (l, r, t, b) = (self.margin, self.w - self.margin, self.margin, self.h - self.margin);
        let _ = writeln!(
            s,
            r#"<path d="M{l:.1},{t:.1} L{l:.1},{b:.1} L{r:.1},{b:.1}" stroke="black" fill="none"/>"#
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle">{title}</text>"#, self.w / 2.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x_label}</text>"#,
            self.w / 2.0,
            self.h - 10.0
        );
        let _ = writeln!(
            s,
            r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">{y_label}</text>"#,
            self.h / 2.0,
            self.h / 2.0
        );
        for (y, label) in [(self.y_range.0, self.y_range.0), (self.y_range.1, self.y_range.1)] {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{label:.2}</text>"#,
                l - 4.0,
                self.py(y) + 4.0
            );
        }
        for (x, label) in [(self.x_range.0, self.x_range.0), (self.x_range.1, self.x_range.1)] {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#,
                self.px(x),
                b + 16.0
            );
        }
        s
    }

    /// Median polyline with a shaded band; points are `(x, median, lo, hi)`.
    fn series(&self, s: &mut String, name: &str, color: &str, slot: usize, pts: &[(f64, f64, f64, f64)]) {
        if pts.is_empty() {
            return;
        }
        let upper: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", self.px(p.0), self.py(p.3))).collect();
        let lower: Vec<String> = pts
            .iter()
            .rev()
            .map(|p| format!("{:.1},{:.1}", self.px(p.0), self.py(p.2)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", self.px(p.0), self.py(p.1))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = self.margin + 14.0 * slot as f64;
        let lx = self.w - self.margin + 8.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{name}</text>"#,
            ly - 4.0,
            lx + 16.0,
            ly - 4.0,
            lx + 20.0,
            ly
        );
    }
}

/// Median normalized return against median real interactions on a log
/// axis, with a mean plus-minus one standard deviation band. Variants that
/// never touch the environment are drawn at the right edge as a flat line.
pub fn learning_curve_svg(per_variant: &[(Variant, Vec<Vec<MetricRow>>)]) -> String {
    let mut curves = Vec::new();
    for (v, runs) in per_variant {
        let mut by_iter: BTreeMap<usize, Vec<&MetricRow>> = BTreeMap::new();
        for row in runs.iter().flatten() {
            by_iter.entry(row.iteration).or_default().push(row);
        }
        let pts: Vec<(f64, f64, f64, f64)> = by_iter
            .values()
            .map(|rows| {
                let ret: Vec<f64> = rows.iter().map(|r| r.normalized_return).collect();
                let inter: Vec<f64> = rows.iter().map(|r| r.real_interactions as f64).collect();
                let (mean, sd) = mean_sd(&ret);
                (median(&inter), median(&ret), mean - sd, mean + sd)
            })
            .collect();
        curves.push((*v, pts));
    }
    let xs: Vec<f64> = curves.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).filter(|x| *x > 0.0).collect();
    let x_lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x_hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (x_lo, x_hi) = if x_lo.is_finite() { (x_lo, x_hi.max(x_lo * 10.0)) } else { (1.0, 10.0) };
    let ys = curves.iter().flat_map(|(_, p)| p.iter().flat_map(|q| [q.2, q.3]));
    let y_lo = ys.clone().fold(0.0_f64, f64::min);
    let y_hi = ys.fold(1.0_f64, f64::max);
    let chart = Chart {
        w: 720.0,
        h: 420.0,
        margin: 60.0,
        x_range: (x_lo, x_hi),
        y_range: (y_lo, y_hi),
        log_x: true,
    };
    let mut s = chart.open("Normalized return", "real-environment interactions (log scale)", "normalized return");
    for (i, (v, pts)) in curves.iter().enumerate() {
        let pts: Vec<_> = if pts.iter().all(|p| p.0 <= 0.0) {
            // no interactions: show the final value as a flat reference
            pts.last()
                .map(|p| vec![(x_lo, p.1, p.2, p.3), (x_hi, p.1, p.2, p.3)])
                .unwrap_or_default()
        } else {
            pts.iter().copied().filter(|p| p.0 > 0.0).collect()
        };
        chart.series(&mut s, v.name(), PALETTE[i % PALETTE.len()], i, &pts);
    }
    s.push_str("</svg>\n");
    s
}

pub const SWEEP_COLUMNS: [&str; 5] = ["variant", "expert_trajectories", "seed", "final_normalized_return", "final_nll_model"];

/// What [`run_sweep`] produced.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub sweep_file: PathBuf,
    pub svg_file: Option<PathBuf>,
}

/// Final normalized return of every variant and seed for each expert
/// dataset size in `sweep.trajectories`.
pub fn run_sweep(cfg: &ExperimentConfig, svg: bool) -> Result<SweepOutput> {
    cfg.validate()?;
    let sizes = match &cfg.sweep {
        Some(s) => s.trajectories.clone(),
        None => return arg("sweep-expert needs a [sweep] section with trajectories"),
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut out = SWEEP_COLUMNS.join(",");
    out.push('\n');
    let mut finals: Vec<(Variant, usize, f64)> = Vec::new();
    for &n in &sizes {
        let prep = prepare(cfg, n)?;
        let jobs: Vec<(Variant, u64)> = cfg
            .variants
            .iter()
            .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s)))
            .collect();
        let runs = jobs
            .par_iter()
            .map(|&(v, s)| run_one(cfg, &prep, v, s))
            .collect::<Result<Vec<_>>>()?;
        for run in runs {
            let last = run.rows.last();
            let ret = last.map_or(f64::NAN, |r| r.normalized_return);
            let nll = last.and_then(|r| r.nll_model);
            let _ = writeln!(out, "{},{},{},{},{}", run.variant.name(), n, run.seed, fmt_f64(ret), opt_field(nll));
            finals.push((run.variant, n, ret));
        }
    }
    let sweep_file = cfg.out_dir.join("sweep.csv");
    std::fs::write(&sweep_file, out)?;
    let svg_file = if svg {
        let path = cfg.out_dir.join("sweep.svg");
        std::fs::write(&path, sweep_svg(&cfg.variants, &sizes, &finals))?;
        Some(path)
    } else {
        None
    };
    Ok(SweepOutput { sweep_file, svg_file })
}

fn sweep_svg(variants: &[Variant], sizes: &[usize], finals: &[(Variant, usize, f64)]) -> String {
    let x_lo = *sizes.iter().min().unwrap_or(&1) as f64;
    let x_hi = (*sizes.iter().max().unwrap_or(&10) as f64).max(x_lo + 1.0);
    let chart = Chart {
        w: 720.0,
        h: 420.0,
        margin: 60.0,
        x_range: (x_lo, x_hi),
        y_range: (0.0, 1.0_f64.max(finals.iter().map(|f| f.2).fold(0.0, f64::max))),
        log_x: true,
    };
    let mut s = chart.open("Final normalized return", "expert trajectories (log scale)", "normalized return");
    for (i, v) in variants.iter().enumerate() {
        let pts: Vec<_> = sizes
            .iter()
            .map(|&n| {
                let vals: Vec<f64> = finals.iter().filter(|f| f.0 == *v && f.1 == n).map(|f| f.2).collect();
                let (mean, sd) = mean_sd(&vals);
                (n as f64, median(&vals), mean - sd, mean + sd)
            })
            .collect();
        chart.series(&mut s, v.name(), PALETTE[i % PALETTE.len()], i, &pts);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::{CategoricalTable, TabularModel, TabularPolicy};
    use crate::mdp::{BufferRole, GridworldSpec, SlipTo, Transition};
    use crate::seeded_rng;

    #[test]
    fn normalized_return_examples() {
        assert_eq!(normalized_return(&[5.0, 5.0], 5.0, 0.0).unwrap(), 1.0);
        assert_eq!(normalized_return(&[0.0, 0.0, 0.0], 5.0, 0.0).unwrap(), 0.0);
        assert_eq!(normalized_return(&[0.0, 5.0], 5.0, 0.0).unwrap(), 0.5);
        assert!(normalized_return(&[1.0], 2.0, 2.0).is_err());
        assert!(normalized_return(&[], 2.0, 0.0).is_err());
    }

    #[test]
    fn nll_examples() {
        let test = TransitionBuffer::from_transitions(
            BufferRole::Expert,
            [Transition::new(0, 1, 1), Transition::new(1, 2, 0)],
        )
        .unwrap();
        let uniform = TabularPolicy::uniform(2, 3);
        assert!((nll_policy(&uniform, &test).unwrap() - 3f64.ln()).abs() < 1e-12);

        // deterministic and correct: rows put all mass on the observed choice
        let det = CategoricalTable::new(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(nll_policy(&TabularPolicy::from_table(&det), &test).unwrap().abs() < 1e-12);

        // wrong deterministic map hits the floor instead of infinity
        let wrong = CategoricalTable::new(2, 3, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(nll_policy(&TabularPolicy::from_table(&wrong), &test).unwrap(), -LOG_FLOOR);

        let empty = TransitionBuffer::<usize, usize>::new(BufferRole::Expert);
        assert!(nll_policy(&uniform, &empty).is_err());
        assert!(nll_model(&TabularModel::uniform(2, 3), &empty).is_err());
    }

    #[test]
    fn nll_of_the_generating_map_is_its_conditional_entropy() {
        let mut rng = seeded_rng(3);
        let mdp = TabularMdp::random(4, 2, 0.9, &mut rng).unwrap();
        let policy = CategoricalTable::uniform(4, 2);
        let traj = rollout(&mdp, &policy, 20_000, &mut rng).unwrap();
        let test = TransitionBuffer::from_transitions(BufferRole::Expert, traj.transitions).unwrap();
        let q = TabularModel::from_table(&crate::oracle::transition_table(&mdp).unwrap(), 2).unwrap();
        let nll = nll_model(&q, &test).unwrap();
        // oracle: E[-ln p] with (x,u) at their empirical frequencies, plus
        // the sampling sd of the per-transition terms
        let terms: Vec<f64> = test.iter().map(|t| -mdp.row(t.x, t.u)[t.x_next].ln()).collect();
        let mut counts = [0usize; 8];
        for t in test.iter() {
            counts[t.x * 2 + t.u] += 1;
        }
        let entropy: f64 = (0..8)
            .map(|r| {
                let h: f64 = mdp.row(r / 2, r % 2).iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
                counts[r] as f64 * h
            })
            .sum::<f64>()
            / test.len() as f64;
        let (_, sd) = mean_sd(&terms);
        assert!((nll - entropy).abs() < 3.0 * sd / (test.len() as f64).sqrt(), "{nll} vs {entropy}");
    }

    fn zero_spec() -> GridworldSpec {
        GridworldSpec {
            width: 3,
            height: 3,
            goal: [2, 2],
            start: None,
            goal_reward: 0.0,
            step_reward: 0.0,
            slip: 0.1,
            slip_to: SlipTo::Any,
            discount: 0.9,
        }
    }

    #[test]
    fn evaluation_examples() {
        let zero = zero_spec().build().unwrap();
        let b = TabularPolicy::uniform(9, 5);
        assert_eq!(evaluate_policy(&zero, &b, 5, 20, &mut seeded_rng(0)).unwrap(), 0.0);
        assert!(evaluate_policy(&zero, &b, 0, 20, &mut seeded_rng(0)).is_err());

        let grid = GridworldSpec {
            goal_reward: 1.0,
            ..zero_spec()
        }
        .build()
        .unwrap();
        let a = evaluate_policy(&grid, &b, 10, 20, &mut seeded_rng(7)).unwrap();
        let c = evaluate_policy(&grid, &b, 10, 20, &mut seeded_rng(7)).unwrap();
        assert_eq!(a, c);
        assert!(a > 0.0);
    }

    #[test]
    fn median_and_bands() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
        let (m, sd) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((sd - 1.0).abs() < 1e-15);
    }

    #[test]
    fn metrics_csv_round_trips() {
        let rows = vec![
            MetricRow {
                iteration: 1,
                real_interactions: 100,
                loss_model_disc: Some(0.1),
                loss_policy_disc: Some(1.0 / 3.0),
                loss_pe: None,
                loss_improve_model: Some(-2.5e-7),
                loss_improve_policy: Some(0.0),
                eval_return: 12.0,
                normalized_return: 0.4,
                nll_policy: Some(1.2),
                nll_model: None,
            },
            MetricRow {
                iteration: 2,
                real_interactions: 200,
                loss_model_disc: None,
                loss_policy_disc: None,
                loss_pe: Some(3.0),
                loss_improve_model: None,
                loss_improve_policy: None,
                eval_return: 0.0,
                normalized_return: 0.0,
                nll_policy: None,
                nll_model: Some(0.7),
            },
        ];
        let text = metrics_csv(&rows);
        assert!(text.starts_with(
            "iteration,real_interactions,loss_model_disc,loss_policy_disc,loss_pe,loss_improve_model,\
             loss_improve_policy,eval_return,normalized_return,nll_policy,nll_model\n"
        ));
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
        assert_eq!(interactions_to_reach(&rows, 0.3), Some(100));
        assert_eq!(interactions_to_reach(&rows, 0.5), None);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let good = r#"
            variants = ["mb-eril", "bc"]
            seeds = [0, 1]
            expert_trajectories = 3
            [env]
            kind = "gridworld"
            width = 3
            height = 3
            goal = [2, 2]
            discount = 0.9
            [regularization]
            kappa = 2.0
            eta = 2.0
        "#;
        let cfg = ExperimentConfig::from_toml_str(good).unwrap();
        assert_eq!(cfg.variants, vec![Variant::MbEril, Variant::Bc]);
        assert_eq!(cfg.schedule, Schedule::default());
        assert_eq!(cfg.reg(&cfg.mdp().unwrap()).unwrap().gamma, 0.9);

        let typo = good.replace("expert_trajectories", "expert_trajectorys");
        assert!(matches!(ExperimentConfig::from_toml_str(&typo), Err(Error::Parse(_))));
        let bad_sched = format!("{good}\n[schedule]\nbatchsize = 3\n");
        assert!(ExperimentConfig::from_toml_str(&bad_sched).is_err());
        let bad_variant = good.replace("\"bc\"", "\"gail\"");
        assert!(ExperimentConfig::from_toml_str(&bad_variant).is_err());
        let dup = good.replace("[0, 1]", "[1, 1]");
        assert!(ExperimentConfig::from_toml_str(&dup).is_err());
    }
}
