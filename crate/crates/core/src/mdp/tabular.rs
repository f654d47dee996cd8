use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Environment;
use crate::error::{arg, Error, Result};
use crate::Rng;

const ROW_TOL: f64 = 1e-9;

/// A finite MDP with a state-only reward.
///
/// `transition` is stored flat in `[x][u][x']` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    discount: f64,
    initial_dist: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let mdp = Self {
            n_states,
            n_actions,
            transition,
            reward,
            discount,
            initial_dist,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    /// Checks shapes, row-stochasticity, the initial distribution and the discount.
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return arg("an MDP needs at least one state and one action");
        }
        if self.transition.len() != ns * na * ns {
            return arg(format!(
                "transition has {} entries, expected {}",
                self.transition.len(),
                ns * na * ns
            ));
        }
        if self.reward.len() != ns || self.initial_dist.len() != ns {
            return arg("reward and initial_dist must have one entry per state");
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return arg(format!("discount must lie in (0, 1), got {}", self.discount));
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return arg("reward entries must be finite");
        }
        for x in 0..ns {
            for u in 0..na {
                check_distribution(self.row(x, u), &format!("transition row ({x}, {u})"))?;
            }
        }
        check_distribution(&self.initial_dist, "initial_dist")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transition
    }

    /// `P[x][u][.]`.
    pub fn row(&self, x: usize, u: usize) -> &[f64] {
        let start = (x * self.n_actions + u) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// Replaces the dynamics, keeping reward, discount and start distribution.
    pub fn with_transition(&self, transition: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            transition,
            self.reward.clone(),
            self.discount,
            self.initial_dist.clone(),
        )
    }

    pub fn with_reward(&self, reward: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            reward,
            self.discount,
            self.initial_dist.clone(),
        )
    }

    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.clone(),
            discount,
            self.initial_dist.clone(),
        )
    }

    fn check_state(&self, x: usize) -> Result<()> {
        if x >= self.n_states {
            return arg(format!("state {x} out of range (n_states = {})", self.n_states));
        }
        Ok(())
    }

    fn check_action(&self, u: usize) -> Result<()> {
        if u >= self.n_actions {
            return arg(format!("action {u} out of range (n_actions = {})", self.n_actions));
        }
        Ok(())
    }

    /// Random MDP with dense transition rows, rewards in `[-1, 1]` and a
    /// uniform start distribution.
    pub fn random(n_states: usize, n_actions: usize, discount: f64, rng: &mut Rng) -> Result<Self> {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            // exponential weights give a flat Dirichlet row
            let row: Vec<f64> = (0..n_states)
                .map(|_| -(1.0 - rng.gen::<f64>()).ln() + 1e-3)
                .collect();
            let total: f64 = row.iter().sum();
            transition.extend(row.iter().map(|w| w / total));
        }
        let reward = (0..n_states).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let initial = vec![1.0 / n_states as f64; n_states];
        Self::new(n_states, n_actions, transition, reward, discount, initial)
    }

    pub fn from_spec(spec: &MdpSpec) -> Result<Self> {
        match spec {
            MdpSpec::Explicit(e) => {
                let mut transition = Vec::new();
                if e.transition.len() != e.n_states {
                    return arg("transition must have one block per state");
                }
                for block in &e.transition {
                    if block.len() != e.n_actions {
                        return arg("each transition block must have one row per action");
                    }
                    for row in block {
                        transition.extend_from_slice(row);
                    }
                }
                Self::new(
                    e.n_states,
                    e.n_actions,
                    transition,
                    e.reward.clone(),
                    e.discount,
                    e.initial_dist.clone(),
                )
            }
            MdpSpec::Gridworld(g) => g.build(),
            MdpSpec::Random(r) => {
                let mut rng = crate::seeded_rng(r.seed);
                Self::random(r.n_states, r.n_actions, r.discount, &mut rng)
            }
        }
    }

    /// Parses a TOML MDP description (see [`MdpSpec`]).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: MdpSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_spec(&spec)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return arg(format!("{what} has a negative or non-finite entry"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return arg(format!("{what} sums to {total}, not 1"));
    }
    Ok(())
}

/// Draws an index from a probability vector with a single uniform variate.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let mut draw: f64 = rng.gen();
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        if draw < p {
            return i;
        }
        draw -= p;
        last = i;
    }
    // rounding left a sliver of mass past the end
    last
}

impl Environment for TabularMdp {
    type State = usize;
    type Action = usize;

    fn sample_initial(&self, rng: &mut Rng) -> usize {
        sample_categorical(&self.initial_dist, rng)
    }

    fn step(&self, x: &usize, u: &usize, rng: &mut Rng) -> Result<usize> {
        self.check_state(*x)?;
        self.check_action(*u)?;
        Ok(sample_categorical(self.row(*x, *u), rng))
    }

    fn reward(&self, x: &usize) -> f64 {
        self.reward[*x]
    }
}

/// On-disk MDP description, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MdpSpec {
    Explicit(ExplicitMdp),
    Gridworld(GridworldSpec),
    Random(RandomMdp),
}

/// Fully tabulated MDP. `transition[x][u]` is the next-state row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub reward: Vec<f64>,
    pub initial_dist: Vec<f64>,
    pub transition: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub seed: u64,
}

/// Where a slipping move ends up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlipTo {
    /// A uniformly random action is executed instead.
    #[default]
    Any,
    /// One of the two perpendicular moves, with equal probability. Staying
    /// never slips.
    Sideways,
}

/// Grid of `width x height` cells with actions stay/up/down/left/right.
///
/// Moves into a wall leave the agent in place. With probability `slip` the
/// chosen move is replaced according to `slip_to`. The goal cell pays
/// `goal_reward`, every other cell pays `step_reward`. Episodes start at
/// `start` when given, otherwise uniformly on the non-goal cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridworldSpec {
    pub width: usize,
    pub height: usize,
    pub goal: [usize; 2],
    #[serde(default)]
    pub start: Option<[usize; 2]>,
    #[serde(default = "default_goal_reward")]
    pub goal_reward: f64,
    #[serde(default)]
    pub step_reward: f64,
    #[serde(default)]
    pub slip: f64,
    #[serde(default)]
    pub slip_to: SlipTo,
    pub discount: f64,
}

fn default_goal_reward() -> f64 {
    1.0
}

pub const GRID_ACTIONS: usize = 5;

impl GridworldSpec {
    pub fn cell(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    /// Cell reached from `state` by action `u`, ignoring slip.
    pub fn moved(&self, state: usize, u: usize) -> usize {
        let (col, row) = (state % self.width, state / self.width);
        let (c, r) = match u {
            1 if row > 0 => (col, row - 1),
            2 if row + 1 < self.height => (col, row + 1),
            3 if col > 0 => (col - 1, row),
            4 if col + 1 < self.width => (col + 1, row),
            _ => (col, row),
        };
        self.cell(c, r)
    }

    pub fn build(&self) -> Result<TabularMdp> {
        if self.width == 0 || self.height == 0 {
            return arg("gridworld needs positive width and height");
        }
        if self.goal[0] >= self.width || self.goal[1] >= self.height {
            return arg("goal lies outside the grid");
        }
        if !(0.0..=1.0).contains(&self.slip) {
            return arg("slip must lie in [0, 1]");
        }
        let ns = self.width * self.height;
        let goal = self.cell(self.goal[0], self.goal[1]);
        let mut transition = vec![0.0; ns * GRID_ACTIONS * ns];
        for x in 0..ns {
            for u in 0..GRID_ACTIONS {
                let row = &mut transition[(x * GRID_ACTIONS + u) * ns..][..ns];
                match (self.slip_to, u) {
                    (SlipTo::Any, _) => {
                        row[self.moved(x, u)] += 1.0 - self.slip;
                        for w in 0..GRID_ACTIONS {
                            row[self.moved(x, w)] += self.slip / GRID_ACTIONS as f64;
                        }
                    }
                    (SlipTo::Sideways, 0) => row[x] = 1.0,
                    (SlipTo::Sideways, _) => {
                        row[self.moved(x, u)] += 1.0 - self.slip;
                        let sides = if u <= 2 { [3, 4] } else { [1, 2] };
                        for w in sides {
                            row[self.moved(x, w)] += 0.5 * self.slip;
                        }
                    }
                }
            }
        }
        let reward = (0..ns)
            .map(|x| if x == goal { self.goal_reward } else { self.step_reward })
            .collect();
        let initial_dist = match self.start {
            Some([c, r]) => {
                if c >= self.width || r >= self.height {
                    return arg("start lies outside the grid");
                }
                let mut d = vec![0.0; ns];
                d[self.cell(c, r)] = 1.0;
                d
            }
            None if ns == 1 => vec![1.0],
            None => (0..ns)
                .map(|x| if x == goal { 0.0 } else { 1.0 / (ns - 1) as f64 })
                .collect(),
        };
        TabularMdp::new(ns, GRID_ACTIONS, transition, reward, self.discount, initial_dist)
    }
}
