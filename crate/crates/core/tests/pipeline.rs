use std::path::Path;

use proptest::prelude::*;

use eril_core::approx::{randomize, CategoricalTable, Parametric, TabularModel};
use eril_core::eval::{
    nll_model, normalized_return, parse_metrics_csv, read_runs, run_experiment, run_sweep, summary_csv,
    ExperimentConfig, METRIC_COLUMNS, SWEEP_COLUMNS,
};
use eril_core::mdp::{rollout, BufferRole, TabularMdp, TransitionBuffer};
use eril_core::oracle::transition_table;
use eril_core::train::Variant;
use eril_core::seeded_rng;

const TINY: &str = r#"
variants = ["mb-eril", "bc"]
seeds = [0, 1, 2]
expert_trajectories = 4
test_trajectories = 2
expert_seed = 9
reference_episodes = 10
out_dir = "unused"

[env]
kind = "gridworld"
width = 3
height = 3
goal = [2, 2]
slip = 0.1
slip_to = "sideways"
discount = 0.9

[regularization]
kappa = 2.0
eta = 2.0

[schedule]
iterations = 3
disc_steps = 5
pe_steps = 5
improve_steps = 5
model_steps = 5
bc_steps = 5
batch_size = 16
n_real = 20
n_sim = 200
horizon = 15
lr = 0.05
eval_episodes = 4

[sweep]
trajectories = [1, 4]
"#;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(TINY).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

#[test]
fn comparison_writes_one_file_per_run_plus_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = run_experiment(&cfg, true).unwrap();
    assert_eq!(out.run_files.len(), 6);
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "bc_seed0.csv",
            "bc_seed1.csv",
            "bc_seed2.csv",
            "mb-eril_seed0.csv",
            "mb-eril_seed1.csv",
            "mb-eril_seed2.csv",
            "reference.csv",
            "returns.svg",
            "summary.csv"
        ]
    );
    let text = std::fs::read_to_string(&out.run_files[0]).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRIC_COLUMNS.join(","));
    let rows = parse_metrics_csv(&text).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.normalized_return.is_finite()));
}

#[test]
fn summary_recomputes_from_the_run_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = run_experiment(&cfg, false).unwrap();
    let per_variant = read_runs(dir.path(), &cfg.variants, &cfg.seeds).unwrap();
    assert_eq!(std::fs::read_to_string(out.summary_file).unwrap(), summary_csv(&per_variant));
}

#[test]
fn model_columns_are_empty_without_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = run_experiment(&cfg, false).unwrap();
    for run in &out.runs {
        let has_model = run.rows.iter().all(|r| r.nll_model.is_some());
        assert_eq!(has_model, run.variant == Variant::MbEril, "{}", run.variant);
        // BC never touches the environment
        if run.variant == Variant::Bc {
            assert!(run.rows.iter().all(|r| r.real_interactions == 0));
        }
    }
}

#[test]
fn sweep_has_a_row_per_size_variant_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let out = run_sweep(&cfg, true).unwrap();
    let text = std::fs::read_to_string(out.sweep_file).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), SWEEP_COLUMNS.join(","));
    assert_eq!(lines.count(), 2 * 2 * 3);
    assert!(out.svg_file.unwrap().exists());
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let cfg = ExperimentConfig::load(root.join("gridworld.toml")).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.variants.len(), 6);
    assert_eq!(cfg.seeds.len(), 5);
    assert_eq!(cfg.expert_trajectories * cfg.schedule.horizon, 1500);
    let chain = TabularMdp::load(root.join("chain.toml")).unwrap();
    assert_eq!((chain.n_states(), chain.n_actions()), (3, 2));
}

#[test]
fn generating_model_has_the_lowest_nll() {
    for seed in 0..5 {
        let mut rng = seeded_rng(100 + seed);
        let mdp = TabularMdp::random(4, 2, 0.9, &mut rng).unwrap();
        let traj = rollout(&mdp, &CategoricalTable::uniform(4, 2), 5000, &mut rng).unwrap();
        let test = TransitionBuffer::from_transitions(BufferRole::Expert, traj.transitions).unwrap();
        let truth = TabularModel::from_table(&transition_table(&mdp).unwrap(), 2).unwrap();
        let best = nll_model(&truth, &test).unwrap();
        for _ in 0..20 {
            let mut other = TabularModel::from_table(&transition_table(&mdp).unwrap(), 2).unwrap();
            randomize(other.params_mut(), 0.5, &mut rng);
            // Monte-Carlo slack: 3 sd of a 5000-sample mean is well under 0.05
            assert!(nll_model(&other, &test).unwrap() > best - 0.05);
        }
    }
}

proptest! {
    #[test]
    fn normalized_return_maps_the_endpoints_and_is_monotone(
        r_min in -10.0f64..10.0,
        span in 0.1f64..50.0,
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let r_max = r_min + span;
        prop_assert!((normalized_return(&[r_min], r_max, r_min).unwrap()).abs() < 1e-12);
        prop_assert!((normalized_return(&[r_max], r_max, r_min).unwrap() - 1.0).abs() < 1e-12);
        let (lo, hi) = (a.min(b), a.max(b));
        let at = |t: f64| normalized_return(&[r_min + t * span], r_max, r_min).unwrap();
        prop_assert!(at(lo) <= at(hi) + 1e-12);
    }
}
