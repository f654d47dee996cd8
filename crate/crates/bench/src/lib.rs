//! Benchmark suites and the fixtures they share.

use criterion::{black_box, BatchSize, BenchmarkId, Criterion};

use eril_core::approx::{CategoricalTable, Continuous, Expectation, GaussianModel, GaussianPolicy};
use eril_core::check::{enumerate, solved_random, Solved};
use eril_core::eval::{prepare, ExperimentConfig, Prepared};
use eril_core::losses::{
    loss_disc_total, loss_improve_model, loss_improve_policy, loss_policy_eval, DiscBatches, NextStates, ValueFn,
};
use eril_core::mdp::Transition;
use eril_core::oracle::{soft_backup, solve_default, ValueTable};
use eril_core::train::{init_state, Schedule, TrainSetup, Variant};
use eril_core::{seeded_rng, Rng};
use rand::Rng as _;

pub fn random_task(n_states: usize, n_actions: usize, seed: u64) -> Solved {
    solved_random(n_states, n_actions, 2.0, 2.0, &mut seeded_rng(seed)).expect("random task solves")
}

/// The 5x5 gridworld of the comparison config with a shortened schedule.
pub fn gridworld(iterations: usize) -> (ExperimentConfig, Prepared) {
    let text = include_str!("../../../configs/gridworld.toml");
    let mut cfg = ExperimentConfig::from_toml_str(text).expect("gridworld config parses");
    cfg.schedule.iterations = iterations;
    let prep = prepare(&cfg, cfg.expert_trajectories).expect("gridworld prepares");
    (cfg, prep)
}

pub fn continuous_batch(n: usize, rng: &mut Rng) -> Vec<(Transition<Vec<f64>, Vec<f64>>, f64)> {
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x_next = x.iter().zip(&u).map(|(a, b)| a + 0.1 * b).collect();
            (Transition { x, u, x_next }, 1.0 / n as f64)
        })
        .collect()
}

pub fn oracle(c: &mut Criterion) {
    let mut group = c.benchmark_group("oracle");
    for ns in [10, 50, 100] {
        let s = random_task(ns, 4, ns as u64);
        group.bench_with_input(BenchmarkId::new("solve", ns), &s, |b, s| {
            b.iter(|| solve_default(black_box(&s.mdp), &s.q, &s.b, &s.cfg).unwrap())
        });
        let v = ValueTable::zeros(ns, 4);
        group.bench_with_input(BenchmarkId::new("backup", ns), &s, |b, s| {
            b.iter(|| soft_backup(black_box(&v), &s.mdp, &s.q, &s.b, &s.cfg).unwrap())
        });
    }
    group.finish();
}

pub fn losses(c: &mut Criterion) {
    let mut group = c.benchmark_group("losses");
    let s = random_task(25, 5, 1);
    let vf = s.value_fn().unwrap();
    let (q, b) = s.models().unwrap();
    let d = vec![1.0 / 25.0; 25];
    let pairs = CategoricalTable::uniform(25, 5);
    let real = enumerate(&d, &pairs, &s.result.expert_model);
    let sim = enumerate(&d, &pairs, &s.q);
    let batches = DiscBatches { real: &real, sim: &sim, expert: &real, learner: &sim };
    group.bench_function("disc/tabular", |bn| {
        bn.iter(|| loss_disc_total(black_box(&vf), &q, &b, &batches, &s.cfg).unwrap())
    });
    let next = NextStates::Model { q: &q, mode: Expectation::Exact };
    group.bench_function("policy_eval/tabular", |bn| {
        let mut rng = seeded_rng(0);
        bn.iter(|| loss_policy_eval(black_box(&vf), &next, &b, Expectation::Exact, &real, &s.cfg, &mut rng).unwrap())
    });
    group.bench_function("improve_model/tabular", |bn| {
        let mut rng = seeded_rng(0);
        bn.iter(|| loss_improve_model(black_box(&q), &vf, &q, &real, &s.cfg, 1, &mut rng).unwrap())
    });

    let mut rng = seeded_rng(2);
    let batch = continuous_batch(128, &mut rng);
    let vf = ValueFn::<Continuous>::mlp(2, 2, &mut rng).unwrap();
    let q = GaussianModel::new(2, 2, &mut rng).unwrap();
    let b = GaussianPolicy::new(2, 2, &mut rng).unwrap();
    let batches = DiscBatches { real: &batch, sim: &batch, expert: &batch, learner: &batch };
    group.bench_function("disc/mlp", |bn| {
        bn.iter(|| loss_disc_total(black_box(&vf), &q, &b, &batches, &s.cfg).unwrap())
    });
    group.bench_function("improve_policy/mlp", |bn| {
        let mut rng = seeded_rng(0);
        bn.iter(|| loss_improve_policy(black_box(&b), &vf, &b, &batch, &s.cfg, 4, &mut rng).unwrap())
    });
    group.finish();
}

pub fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    let (cfg, prep) = gridworld(1);
    let setup = TrainSetup {
        env: &prep.env,
        expert: &prep.expert,
        test: Some(&prep.test),
        cfg: prep.reg,
        schedule: Schedule { iterations: 1, ..cfg.schedule.clone() },
        return_range: (cfg.r_min, prep.r_max),
    };
    for variant in Variant::ALL {
        group.bench_function(BenchmarkId::new("iteration", variant.name()), |bn| {
            bn.iter_batched(
                || init_state(variant, &setup, 0).unwrap(),
                |mut state| {
                    state.iterate(&setup).unwrap();
                    state
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}
