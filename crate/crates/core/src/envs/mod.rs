//! Finite-horizon episodic environments.
//!
//! Both environments expose a discrete latent state to the harness (oracle
//! access used for collection policies, rewards and validation) and a real
//! vector observation to learners.

pub mod comblock;
pub mod tabular;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use comblock::{generate_comblock_family, ComblockTask, TaskFamily};
pub use tabular::{
    alpha_max_tabular, exact_transition_tv, generate_tabular_family, TabularFamily,
    TabularFamilySpec, TabularLowRankMDP, TabularPolicy,
};

/// Common interface for episode simulation. Steps run `h = 1..=H`; `observe`
/// may also be called with `h = H + 1` for the terminal observation.
pub trait Environment: Sync {
    fn horizon(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn reset(&self, rng: &mut ChaCha8Rng) -> usize;
    fn observe(&self, latent: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<f64>;
    /// Returns the next latent and the emitted (possibly stochastic) reward.
    fn step(&self, latent: usize, action: usize, h: usize, rng: &mut ChaCha8Rng) -> (usize, f64);
    /// The known mean reward `r_h(s, a)` handed to planners.
    fn expected_reward(&self, latent: usize, action: usize, h: usize) -> f64;
    /// Oracle decoding of an observation back to its latent state.
    fn latent_of(&self, obs: &[f64]) -> usize;
}

/// Independent, reproducible stream `stream` of the generator seeded by `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last index with positive mass
    probs
        .iter()
        .rposition(|p| *p > 0.0)
        .unwrap_or(probs.len() - 1)
}
