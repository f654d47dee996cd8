use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Environment;
use crate::error::{arg, Result};
use crate::Rng;

/// Planar point mass pushed by a bounded velocity command.
///
/// `x' = clip(x + dt * clamp(u) + noise)` with isotropic Gaussian noise, and
/// reward `-|x - goal|`. Positions are confined to `[-arena, arena]^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointMass {
    pub goal: [f64; 2],
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_bound")]
    pub action_bound: f64,
    #[serde(default = "default_arena")]
    pub arena: f64,
}

fn default_noise() -> f64 {
    0.05
}
fn default_dt() -> f64 {
    0.1
}
fn default_bound() -> f64 {
    1.0
}
fn default_arena() -> f64 {
    2.0
}

impl Default for PointMass {
    fn default() -> Self {
        Self {
            goal: [0.5, 0.5],
            noise_std: default_noise(),
            dt: default_dt(),
            action_bound: default_bound(),
            arena: default_arena(),
        }
    }
}

impl PointMass {
    pub const STATE_DIM: usize = 2;
    pub const ACTION_DIM: usize = 2;

    pub fn action_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-self.action_bound, self.action_bound); Self::ACTION_DIM]
    }

    pub fn clamp_action(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .map(|a| a.clamp(-self.action_bound, self.action_bound))
            .collect()
    }
}

impl Environment for PointMass {
    type State = Vec<f64>;
    type Action = Vec<f64>;

    fn sample_initial(&self, rng: &mut Rng) -> Vec<f64> {
        (0..Self::STATE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn step(&self, x: &Vec<f64>, u: &Vec<f64>, rng: &mut Rng) -> Result<Vec<f64>> {
        if x.len() != Self::STATE_DIM || u.len() != Self::ACTION_DIM {
            return arg(format!(
                "point mass expects a {}-d state and {}-d action",
                Self::STATE_DIM,
                Self::ACTION_DIM
            ));
        }
        if !x.iter().chain(u.iter()).all(|v| v.is_finite()) {
            return arg("state and action must be finite");
        }
        let u = self.clamp_action(u);
        Ok(x.iter()
            .zip(&u)
            .map(|(p, a)| {
                let noise: f64 = StandardNormal.sample(rng);
                (p + self.dt * a + self.noise_std * noise).clamp(-self.arena, self.arena)
            })
            .collect())
    }

    fn reward(&self, x: &Vec<f64>) -> f64 {
        -x.iter()
            .zip(&self.goal)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}
