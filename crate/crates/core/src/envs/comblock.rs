//! Rich-observation combination lock.
//!
//! Three latents per step: `z0`, `z1` (good) and `z2` (absorbing bad). Each
//! good latent has one optimal action per step; playing it moves uniformly to
//! a good latent, anything else drops into `z2`. Observations are the one-hot
//! latent concatenated with the one-hot step, plus Gaussian noise, zero-padded
//! to a power of two and rotated by an orthonormal Hadamard matrix.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{dot, hadamard, Matrix};

use super::tabular::{alpha_max_tabular, TabularLowRankMDP, TabularPolicy};
use super::{seeded_rng, Environment};

pub const NUM_LATENTS: usize = 3;
pub const NUM_ACTIONS: usize = 5;
pub const BAD: usize = 2;
pub const TERMINAL_REWARD: f64 = 1.0;
pub const ANTI_SHAPED_REWARD: f64 = 0.1;
pub const ANTI_SHAPED_PROB: f64 = 0.5;
pub const DEFAULT_NOISE_STD: f64 = 0.1;

pub fn is_good(latent: usize) -> bool {
    latent < BAD
}

/// Smallest power of two holding the latent and step one-hots.
pub fn comblock_obs_dim(horizon: usize) -> usize {
    (NUM_LATENTS + horizon).next_power_of_two()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComblockTask {
    horizon: usize,
    optimal_actions: Vec<[usize; 2]>,
    obs_dim: usize,
    noise_std: f64,
    transform: Matrix,
}

impl ComblockTask {
    pub fn new(optimal_actions: Vec<[usize; 2]>, noise_std: f64) -> Result<Self> {
        let horizon = optimal_actions.len();
        if horizon == 0 {
            return Err(contract("comblock horizon must be at least 1"));
        }
        if optimal_actions.iter().flatten().any(|a| *a >= NUM_ACTIONS) {
            return Err(contract("optimal action out of range"));
        }
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(contract("noise std must be a nonnegative finite number"));
        }
        let obs_dim = comblock_obs_dim(horizon);
        Ok(Self {
            horizon,
            optimal_actions,
            obs_dim,
            noise_std,
            transform: hadamard(obs_dim)?,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn optimal_actions(&self) -> &[[usize; 2]] {
        &self.optimal_actions
    }

    pub fn optimal_action(&self, latent: usize, h: usize) -> Option<usize> {
        is_good(latent).then(|| self.optimal_actions[h - 1][latent])
    }

    pub fn transform(&self) -> &Matrix {
        &self.transform
    }

    /// Pre-rotation observation: latent one-hot, step one-hot (empty for the
    /// terminal step `H + 1`), optional noise on those entries, zero padding.
    fn raw_observation(&self, latent: usize, h: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<f64> {
        let mut raw = vec![0.0; self.obs_dim];
        raw[latent] = 1.0;
        if (1..=self.horizon).contains(&h) {
            raw[NUM_LATENTS + h - 1] = 1.0;
        }
        if let Some(rng) = rng {
            if self.noise_std > 0.0 {
                let normal = Normal::new(0.0, self.noise_std).expect("validated std");
                for x in raw.iter_mut().take(NUM_LATENTS + self.horizon) {
                    *x += normal.sample(rng);
                }
            }
        }
        raw
    }

    pub fn emit_observation(&self, latent: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let raw = self.raw_observation(latent, h, Some(rng));
        self.transform.matvec(&raw).expect("square transform")
    }

    /// Observation with the noise switched off.
    pub fn noiseless_observation(&self, latent: usize, h: usize) -> Vec<f64> {
        let raw = self.raw_observation(latent, h, None);
        self.transform.matvec(&raw).expect("square transform")
    }

    /// Inverse rotation followed by argmax over the latent block.
    pub fn decode_latent(&self, obs: &[f64]) -> usize {
        // the Sylvester–Hadamard matrix is symmetric, so it is its own inverse
        let scores: Vec<f64> = (0..NUM_LATENTS)
            .map(|i| dot(self.transform.row(i), obs))
            .collect();
        argmax(&scores)
    }

    pub fn step(
        &self,
        latent: usize,
        action: usize,
        h: usize,
        rng: &mut ChaCha8Rng,
    ) -> (usize, f64) {
        if !is_good(latent) {
            return (BAD, 0.0);
        }
        let correct = action == self.optimal_actions[h - 1][latent];
        let mut reward = 0.0;
        if h == self.horizon {
            reward = TERMINAL_REWARD;
        } else if !correct && rng.random::<f64>() < ANTI_SHAPED_PROB {
            reward = ANTI_SHAPED_REWARD;
        }
        let next = if correct { rng.random_range(0..2) } else { BAD };
        (next, reward)
    }

    pub fn expected_reward(&self, latent: usize, action: usize, h: usize) -> f64 {
        if !is_good(latent) {
            0.0
        } else if h == self.horizon {
            TERMINAL_REWARD
        } else if action != self.optimal_actions[h - 1][latent] {
            ANTI_SHAPED_REWARD * ANTI_SHAPED_PROB
        } else {
            0.0
        }
    }

    pub fn transition_probs(&self, latent: usize, action: usize, h: usize) -> [f64; NUM_LATENTS] {
        match self.optimal_action(latent, h) {
            Some(opt) if opt == action => [0.5, 0.5, 0.0],
            _ => [0.0, 0.0, 1.0],
        }
    }

    /// The latent chain as an exact block-MDP factorization:
    /// `φ(z,a) = e_{z·5+a}` in `R^15`, `μ_h(z')[z·5+a] = P(z'|z,a)`.
    pub fn latent_mdp(&self) -> TabularLowRankMDP {
        let d = NUM_LATENTS * NUM_ACTIONS;
        let pairs: Vec<(usize, usize)> = (0..NUM_LATENTS)
            .flat_map(|z| (0..NUM_ACTIONS).map(move |a| (z, a)))
            .collect();
        let phi_step: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let mut v = vec![0.0; d];
                v[i] = 1.0;
                v
            })
            .collect();
        let mut phi = Vec::with_capacity(self.horizon);
        let mut mu = Vec::with_capacity(self.horizon);
        let mut reward = Vec::with_capacity(self.horizon);
        for h in 1..=self.horizon {
            phi.push(phi_step.clone());
            mu.push(
                (0..NUM_LATENTS)
                    .map(|zp| {
                        pairs
                            .iter()
                            .map(|&(z, a)| self.transition_probs(z, a, h)[zp])
                            .collect()
                    })
                    .collect(),
            );
            reward.push(
                pairs
                    .iter()
                    .map(|&(z, a)| self.expected_reward(z, a, h))
                    .collect(),
            );
        }
        TabularLowRankMDP {
            horizon: self.horizon,
            num_states: NUM_LATENTS,
            num_actions: NUM_ACTIONS,
            dim: d,
            phi,
            mu,
            reward,
            init_dist: vec![0.5, 0.5, 0.0],
        }
    }

    /// Exact optimal policy on the latent chain, `π[h-1][z]`.
    pub fn latent_optimal_policy(&self) -> TabularPolicy {
        self.latent_mdp().optimal_values().1
    }
}

impl Environment for ComblockTask {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.random_range(0..2)
    }

    fn observe(&self, latent: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.emit_observation(latent, h, rng)
    }

    fn step(&self, latent: usize, action: usize, h: usize, rng: &mut ChaCha8Rng) -> (usize, f64) {
        ComblockTask::step(self, latent, action, h, rng)
    }

    fn expected_reward(&self, latent: usize, action: usize, h: usize) -> f64 {
        ComblockTask::expected_reward(self, latent, action, h)
    }

    fn latent_of(&self, obs: &[f64]) -> usize {
        self.decode_latent(obs)
    }
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `K` source comblocks sharing the emission plus a target assembled
/// step-by-step from source dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskFamily {
    pub sources: Vec<ComblockTask>,
    pub target: ComblockTask,
    /// Source whose optimal-action pair the target copies at each step.
    pub target_origin: Vec<usize>,
    pub seed: u64,
}

/// On-disk form of a [`TaskFamily`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFamilyFile {
    pub horizon: usize,
    #[serde(rename = "K")]
    pub num_sources: usize,
    pub sources: Vec<Vec<[usize; 2]>>,
    pub target: Vec<[usize; 2]>,
    pub target_origin: Vec<usize>,
    pub obs_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

pub fn generate_comblock_family(
    horizon: usize,
    num_sources: usize,
    seed: u64,
) -> Result<TaskFamily> {
    generate_comblock_family_with_noise(horizon, num_sources, seed, DEFAULT_NOISE_STD)
}

pub fn generate_comblock_family_with_noise(
    horizon: usize,
    num_sources: usize,
    seed: u64,
    noise_std: f64,
) -> Result<TaskFamily> {
    if horizon == 0 || num_sources == 0 {
        return Err(contract("comblock family needs H ≥ 1 and K ≥ 1"));
    }
    let mut rng = seeded_rng(seed, 0);
    let draw_pair = |rng: &mut ChaCha8Rng| {
        [
            rng.random_range(0..NUM_ACTIONS),
            rng.random_range(0..NUM_ACTIONS),
        ]
    };
    let mut pairs: Vec<Vec<[usize; 2]>> = (0..num_sources)
        .map(|_| (0..horizon).map(|_| draw_pair(&mut rng)).collect())
        .collect();
    let mut target = Vec::with_capacity(horizon);
    let mut origin = Vec::with_capacity(horizon);
    for h in 0..horizon {
        // the copy-and-reject loop only terminates if some source has distinct
        // actions at this step; otherwise redraw that step for every source
        while pairs.iter().all(|p| p[h][0] == p[h][1]) {
            for p in pairs.iter_mut() {
                p[h] = draw_pair(&mut rng);
            }
        }
        loop {
            let j = rng.random_range(0..num_sources);
            let pair = pairs[j][h];
            if pair[0] != pair[1] {
                target.push(pair);
                origin.push(j);
                break;
            }
        }
    }
    Ok(TaskFamily {
        sources: pairs
            .into_iter()
            .map(|p| ComblockTask::new(p, noise_std))
            .collect::<Result<_>>()?,
        target: ComblockTask::new(target, noise_std)?,
        target_origin: origin,
        seed,
    })
}

impl TaskFamily {
    pub fn horizon(&self) -> usize {
        self.target.horizon()
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.target.obs_dim()
    }

    pub fn noise_std(&self) -> f64 {
        self.target.noise_std()
    }

    /// Tasks `0..K` are sources; `K` is the target.
    pub fn task(&self, id: usize) -> &ComblockTask {
        self.sources.get(id).unwrap_or(&self.target)
    }

    /// Pointwise span coefficient bound on the latent block-MDP factorization.
    pub fn alpha_max(&self) -> Result<f64> {
        let sources: Vec<TabularLowRankMDP> =
            self.sources.iter().map(ComblockTask::latent_mdp).collect();
        alpha_max_tabular(&self.target.latent_mdp(), &sources)
    }

    pub fn to_file(&self) -> TaskFamilyFile {
        TaskFamilyFile {
            horizon: self.horizon(),
            num_sources: self.num_sources(),
            sources: self
                .sources
                .iter()
                .map(|t| t.optimal_actions.clone())
                .collect(),
            target: self.target.optimal_actions.clone(),
            target_origin: self.target_origin.clone(),
            obs_dim: self.obs_dim(),
            noise_std: self.noise_std(),
            seed: self.seed,
        }
    }

    pub fn from_file(file: TaskFamilyFile) -> Result<Self> {
        if file.sources.len() != file.num_sources
            || file.target.len() != file.horizon
            || file.target_origin.len() != file.horizon
            || file.sources.iter().any(|s| s.len() != file.horizon)
        {
            return Err(Error::Format(
                "family file shape does not match its header".into(),
            ));
        }
        let fam = Self {
            sources: file
                .sources
                .into_iter()
                .map(|p| ComblockTask::new(p, file.noise_std))
                .collect::<Result<_>>()?,
            target: ComblockTask::new(file.target, file.noise_std)?,
            target_origin: file.target_origin,
            seed: file.seed,
        };
        if fam.obs_dim() != file.obs_dim {
            return Err(Error::Format(format!(
                "obs_dim {} does not match horizon {}",
                file.obs_dim,
                fam.horizon()
            )));
        }
        Ok(fam)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }
}
