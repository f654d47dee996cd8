//! Environments, trajectories, replay buffers and the sampling routines
//! every algorithm shares.

mod continuous;
mod data;
mod tabular;

pub use continuous::PointMass;
pub use data::{sample_union, BufferRole, Trajectory, Transition, TransitionBuffer};
pub use tabular::{
    sample_categorical, ExplicitMdp, GridworldSpec, MdpSpec, RandomMdp, SlipTo, TabularMdp, GRID_ACTIONS,
};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::space::Space;
use crate::Rng;

/// Something that can be started and stepped. Rewards depend on the state only.
pub trait Environment {
    type State: Space;
    type Action: Space;

    fn sample_initial(&self, rng: &mut Rng) -> Self::State;

    fn step(&self, x: &Self::State, u: &Self::Action, rng: &mut Rng) -> Result<Self::State>;

    fn reward(&self, x: &Self::State) -> f64;
}

/// Anything that picks actions.
pub trait Policy<S, A> {
    fn sample_action(&self, x: &S, rng: &mut Rng) -> A;
}

/// Runs `policy` for exactly `horizon` steps from a fresh initial state.
pub fn rollout<E, P>(env: &E, policy: &P, horizon: usize, rng: &mut Rng) -> Result<Trajectory<E::State, E::Action>>
where
    E: Environment,
    P: Policy<E::State, E::Action> + ?Sized,
{
    if horizon == 0 {
        return arg("rollout horizon must be at least 1");
    }
    let mut x = env.sample_initial(rng);
    let mut transitions = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let u = policy.sample_action(&x, rng);
        let x_next = env.step(&x, &u, rng)?;
        transitions.push(Transition::new(x, u, x_next.clone()));
        x = x_next;
    }
    Ok(Trajectory { transitions })
}

/// Draws a state from the discounted visitation distribution of `policy`.
///
/// Starts fresh and stops with probability `1 - gamma` before each step, so
/// the returned state is at time `t` with probability `(1 - gamma) gamma^t`.
pub fn sample_discounted_state<E, P>(env: &E, policy: &P, gamma: f64, rng: &mut Rng) -> Result<E::State>
where
    E: Environment,
    P: Policy<E::State, E::Action> + ?Sized,
{
    if !(gamma > 0.0 && gamma < 1.0) {
        return arg(format!("gamma must lie in (0, 1), got {gamma}"));
    }
    let mut x = env.sample_initial(rng);
    while rng.gen::<f64>() < gamma {
        let u = policy.sample_action(&x, rng);
        x = env.step(&x, &u, rng)?;
    }
    Ok(x)
}

/// Discounted-visitation transition: `x` from [`sample_discounted_state`],
/// then one step of `policy`.
pub fn sample_discounted_transition<E, P>(
    env: &E,
    policy: &P,
    gamma: f64,
    rng: &mut Rng,
) -> Result<Transition<E::State, E::Action>>
where
    E: Environment,
    P: Policy<E::State, E::Action> + ?Sized,
{
    let x = sample_discounted_state(env, policy, gamma, rng)?;
    let u = policy.sample_action(&x, rng);
    let x_next = env.step(&x, &u, rng)?;
    Ok(Transition::new(x, u, x_next))
}

/// An episode in progress, carried across collection calls so that data is
/// gathered in fixed-length episodes regardless of the batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EpisodeCursor<S: Space> {
    state: Option<S>,
    t: usize,
    horizon: usize,
}

impl<S: Space> EpisodeCursor<S> {
    pub fn new(horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return arg("episode horizon must be at least 1");
        }
        Ok(Self {
            state: None,
            t: 0,
            horizon,
        })
    }

    /// Takes `n` steps, restarting every `horizon` steps, and hands each
    /// transition to `sink`.
    pub fn advance<E, P>(
        &mut self,
        env: &E,
        policy: &P,
        n: usize,
        rng: &mut Rng,
        mut sink: impl FnMut(Transition<S, E::Action>) -> Result<()>,
    ) -> Result<()>
    where
        E: Environment<State = S>,
        P: Policy<S, E::Action> + ?Sized,
    {
        for _ in 0..n {
            let x = match self.state.take() {
                Some(x) if self.t < self.horizon => x,
                _ => {
                    self.t = 0;
                    env.sample_initial(rng)
                }
            };
            let u = policy.sample_action(&x, rng);
            let x_next = env.step(&x, &u, rng)?;
            self.state = Some(x_next.clone());
            self.t += 1;
            sink(Transition::new(x, u, x_next))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    struct Fixed(usize);
    impl Policy<usize, usize> for Fixed {
        fn sample_action(&self, _: &usize, _: &mut Rng) -> usize {
            self.0
        }
    }

    /// State 0 moves to absorbing state 1.
    fn absorbing_chain() -> TabularMdp {
        TabularMdp::new(2, 1, vec![0.0, 1.0, 0.0, 1.0], vec![0.0, 1.0], 0.5, vec![1.0, 0.0]).unwrap()
    }

    fn grid() -> TabularMdp {
        GridworldSpec {
            width: 3,
            height: 3,
            goal: [2, 2],
            start: None,
            goal_reward: 1.0,
            step_reward: 0.0,
            slip: 0.2,
            slip_to: SlipTo::Any,
            discount: 0.9,
        }
        .build()
        .unwrap()
    }

    #[test]
    fn rollout_length_and_chaining() {
        let env = grid();
        let traj = rollout(&env, &Fixed(4), 50, &mut seeded_rng(0)).unwrap();
        assert_eq!(traj.horizon(), 50);
        assert!(traj.is_chained());
        let one = rollout(&env, &Fixed(4), 1, &mut seeded_rng(0)).unwrap();
        assert_eq!(one.horizon(), 1);
        assert!(env.initial_dist()[one.transitions[0].x] > 0.0);
        assert!(rollout(&env, &Fixed(4), 0, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn rollout_is_deterministic_per_seed() {
        let env = grid();
        let a = rollout(&env, &Fixed(2), 30, &mut seeded_rng(9)).unwrap();
        let b = rollout(&env, &Fixed(2), 30, &mut seeded_rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn discounted_state_tiny_gamma_is_initial() {
        let env = grid();
        let mut rng = seeded_rng(3);
        for _ in 0..1000 {
            let x = sample_discounted_state(&env, &Fixed(4), 1e-9, &mut rng).unwrap();
            assert!(env.initial_dist()[x] > 0.0);
        }
    }

    #[test]
    fn discounted_state_geometric() {
        let env = absorbing_chain();
        let mut rng = seeded_rng(5);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| sample_discounted_state(&env, &Fixed(0), 0.5, &mut rng).unwrap() == 0)
            .count();
        let freq = zeros as f64 / n as f64;
        // 3 sigma of a Bernoulli(0.5) mean over 1e5 draws is ~0.0047
        assert!((freq - 0.5).abs() < 0.01, "{freq}");
    }

    #[test]
    fn discounted_state_self_loop() {
        let env = TabularMdp::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.0; 2], 0.9, vec![1.0, 0.0]).unwrap();
        let mut rng = seeded_rng(1);
        for _ in 0..500 {
            assert_eq!(sample_discounted_state(&env, &Fixed(0), 0.9, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn cursor_restarts_every_horizon() {
        let env = grid();
        let mut cursor = EpisodeCursor::new(5).unwrap();
        let mut seen = Vec::new();
        let mut rng = seeded_rng(2);
        cursor.advance(&env, &Fixed(4), 7, &mut rng, |t| {
            seen.push(t);
            Ok(())
        }).unwrap();
        cursor.advance(&env, &Fixed(4), 6, &mut rng, |t| {
            seen.push(t);
            Ok(())
        }).unwrap();
        assert_eq!(seen.len(), 13);
        for (i, w) in seen.windows(2).enumerate() {
            if (i + 1) % 5 != 0 {
                assert_eq!(w[0].x_next, w[1].x, "broken chain at {i}");
            }
        }
    }
}
