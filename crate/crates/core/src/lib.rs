//! Model-based entropy-regularized imitation learning.
//!
//! The crate is organized bottom-up:
//!
//! * [`mdp`]: environments, trajectories, replay buffers and samplers.
//! * [`oracle`]: exact tabular solver for the entropy/KL-regularized Bellman
//!   equation, used to build experts and as ground truth in tests.
//! * [`approx`]: tabular and small-MLP function families with analytic gradients.
//! * [`losses`]: the structured model/policy discriminators and every training loss.
//! * [`train`]: the training loop and its ablations and baselines.
//! * [`eval`]: metrics, experiment configs and the comparison harness.

pub mod approx;
pub mod check;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mdp;
pub mod oracle;
pub mod regularization;
pub mod space;
pub mod train;

pub use error::{Error, Result};
pub use regularization::RegularizationConfig;
pub use space::Space;

use rand::SeedableRng;

/// Random generator used everywhere; seedable and serializable for checkpoints.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream `stream` for the same seed.
pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
