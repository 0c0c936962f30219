//! Exact finite low-rank MDPs used as oracles.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{dot, min_norm_least_squares, Matrix};

use super::{sample_categorical, seeded_rng, Environment};

/// Residual above which the pointwise linear-span assumption counts as violated.
pub const SPAN_RESIDUAL_TOL: f64 = 1e-8;

/// Finite-horizon MDP with `P_h(s'|s,a) = φ_h(s,a)ᵀ μ_h(s')`. Steps are 1-indexed
/// in the public API and stored 0-indexed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularLowRankMDP {
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub dim: usize,
    /// `phi[h][s * A + a]`
    pub phi: Vec<Vec<Vec<f64>>>,
    /// `mu[h][s']`
    pub mu: Vec<Vec<Vec<f64>>>,
    /// `reward[h][s * A + a]`
    pub reward: Vec<Vec<f64>>,
    pub init_dist: Vec<f64>,
}

/// Deterministic per-step state → action table.
pub type TabularPolicy = Vec<Vec<usize>>;

impl TabularLowRankMDP {
    fn idx(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    pub fn features(&self, s: usize, a: usize, h: usize) -> &[f64] {
        &self.phi[h - 1][self.idx(s, a)]
    }

    pub fn reward(&self, s: usize, a: usize, h: usize) -> f64 {
        self.reward[h - 1][self.idx(s, a)]
    }

    pub fn transition(&self, s: usize, a: usize, h: usize) -> Vec<f64> {
        let phi = self.features(s, a, h);
        self.mu[h - 1].iter().map(|m| dot(m, phi)).collect()
    }

    /// Checks the kernel, normalisation and reward invariants.
    pub fn validate(&self) -> Result<()> {
        let (s_n, a_n) = (self.num_states, self.num_actions);
        if self.horizon == 0 || s_n == 0 || a_n == 0 || self.dim == 0 {
            return Err(contract("empty MDP dimensions"));
        }
        if self.phi.len() != self.horizon
            || self.mu.len() != self.horizon
            || self.reward.len() != self.horizon
        {
            return Err(contract("per-step tables must have horizon entries"));
        }
        let total: f64 = self.init_dist.iter().sum();
        if self.init_dist.len() != s_n
            || (total - 1.0).abs() > 1e-12
            || self.init_dist.iter().any(|p| *p < 0.0)
        {
            return Err(contract("initial distribution is not a probability vector"));
        }
        for h in 1..=self.horizon {
            for s in 0..s_n {
                for a in 0..a_n {
                    let phi = self.features(s, a, h);
                    if phi.len() != self.dim || dot(phi, phi) > 1.0 + 1e-12 {
                        return Err(contract(format!("‖φ({s},{a})‖ > 1 at step {h}")));
                    }
                    let row = self.transition(s, a, h);
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-12 || row.iter().any(|p| *p < -1e-15) {
                        return Err(contract(format!(
                            "invalid kernel row ({s},{a}) at step {h}"
                        )));
                    }
                    let r = self.reward(s, a, h);
                    if !(0.0..=1.0).contains(&r) {
                        return Err(contract("reward outside [0,1]"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Backward induction. Returns `(V, π)` with `V[h-1][s]` for `h = 1..=H+1`.
    pub fn optimal_values(&self) -> (Vec<Vec<f64>>, TabularPolicy) {
        let mut v = vec![vec![0.0; self.num_states]; self.horizon + 1];
        let mut pi = vec![vec![0; self.num_states]; self.horizon];
        for h in (1..=self.horizon).rev() {
            for s in 0..self.num_states {
                let mut best = f64::NEG_INFINITY;
                for a in 0..self.num_actions {
                    let q = self.reward(s, a, h) + dot(&self.transition(s, a, h), &v[h]);
                    if q > best {
                        best = q;
                        pi[h - 1][s] = a;
                    }
                }
                v[h - 1][s] = best;
            }
        }
        (v, pi)
    }

    /// Exact value of a deterministic policy, `V[h-1][s]` for `h = 1..=H+1`.
    pub fn policy_values(&self, policy: &TabularPolicy) -> Vec<Vec<f64>> {
        let mut v = vec![vec![0.0; self.num_states]; self.horizon + 1];
        for h in (1..=self.horizon).rev() {
            for s in 0..self.num_states {
                let a = policy[h - 1][s];
                v[h - 1][s] = self.reward(s, a, h) + dot(&self.transition(s, a, h), &v[h]);
            }
        }
        v
    }

    /// Exact value of a stochastic policy `probs[h-1][s][a]`.
    pub fn stochastic_policy_values(&self, probs: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
        let mut v = vec![vec![0.0; self.num_states]; self.horizon + 1];
        for h in (1..=self.horizon).rev() {
            for s in 0..self.num_states {
                v[h - 1][s] = (0..self.num_actions)
                    .map(|a| {
                        probs[h - 1][s][a]
                            * (self.reward(s, a, h) + dot(&self.transition(s, a, h), &v[h]))
                    })
                    .sum();
            }
        }
        v
    }

    pub fn initial_value(&self, values: &[Vec<f64>]) -> f64 {
        dot(&self.init_dist, &values[0])
    }

    /// State occupancy `d_h(s)` for `h = 1..=H` under a stochastic policy.
    pub fn occupancy(&self, probs: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
        let mut occ = vec![self.init_dist.clone()];
        for h in 1..self.horizon {
            let mut next = vec![0.0; self.num_states];
            for s in 0..self.num_states {
                for a in 0..self.num_actions {
                    let w = occ[h - 1][s] * probs[h - 1][s][a];
                    if w == 0.0 {
                        continue;
                    }
                    for (sp, p) in self.transition(s, a, h).into_iter().enumerate() {
                        next[sp] += w * p;
                    }
                }
            }
            occ.push(next);
        }
        occ
    }
}

/// `(1/2) Σ_{s'} |est_mu(s')ᵀ est_phi − P*_h(s'|s,a)|`.
pub fn exact_transition_tv(
    mdp: &TabularLowRankMDP,
    est_phi: &[f64],
    est_mu: &[Vec<f64>],
    s: usize,
    a: usize,
    h: usize,
) -> Result<f64> {
    if est_mu.len() != mdp.num_states {
        return Err(contract("estimated μ must cover every next state"));
    }
    let truth = mdp.transition(s, a, h);
    Ok(0.5
        * est_mu
            .iter()
            .zip(&truth)
            .map(|(m, p)| (dot(m, est_phi) - p).abs())
            .sum::<f64>())
}

/// TV distance between two distributions given as vectors.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Per-(h, s') minimum-norm coefficients expressing the target embedding in
/// the span of the source embeddings. `alpha[h-1][s'][i]`.
pub fn span_coefficients(
    target: &TabularLowRankMDP,
    sources: &[TabularLowRankMDP],
) -> Result<Vec<Vec<Vec<f64>>>> {
    if sources.is_empty() {
        return Err(contract("need at least one source task"));
    }
    for src in sources {
        if src.horizon != target.horizon
            || src.num_states != target.num_states
            || src.dim != target.dim
        {
            return Err(contract("source and target shapes differ"));
        }
    }
    let mut out = Vec::with_capacity(target.horizon);
    for h in 0..target.horizon {
        let mut per_state = Vec::with_capacity(target.num_states);
        for sp in 0..target.num_states {
            let cols: Vec<Vec<f64>> = (0..target.dim)
                .map(|j| sources.iter().map(|src| src.mu[h][sp][j]).collect())
                .collect();
            let m = Matrix::from_rows(&cols)?;
            let (alpha, residual) = min_norm_least_squares(&m, &target.mu[h][sp])?;
            if residual > SPAN_RESIDUAL_TOL {
                return Err(Error::SpanViolated {
                    step: h + 1,
                    state: sp,
                    residual,
                });
            }
            per_state.push(alpha);
        }
        out.push(per_state);
    }
    Ok(out)
}

/// Largest pointwise span coefficient over steps, next states and sources.
pub fn alpha_max_tabular(target: &TabularLowRankMDP, sources: &[TabularLowRankMDP]) -> Result<f64> {
    let alpha = span_coefficients(target, sources)?;
    Ok(alpha
        .iter()
        .flatten()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// A family of tabular low-rank MDPs sharing `φ*`: `K` sources plus a target
/// whose embedding is a fixed convex mixture of the source embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularFamily {
    pub sources: Vec<TabularLowRankMDP>,
    pub target: TabularLowRankMDP,
    /// `assignment[h-1][s * A + a]`: the cluster whose one-hot is `φ*_h(s,a)`.
    pub assignment: Vec<Vec<usize>>,
    /// Mixture weights used to build the target.
    pub mixture: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TabularFamilySpec {
    pub horizon: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub dim: usize,
    pub num_sources: usize,
}

impl Default for TabularFamilySpec {
    fn default() -> Self {
        Self {
            horizon: 3,
            num_states: 5,
            num_actions: 3,
            dim: 3,
            num_sources: 3,
        }
    }
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Random realizable block-structured family: `φ*_h(s,a)` is the one-hot of
/// a random cluster assignment (every cluster used at every step), each
/// source has its own per-cluster next-state laws, and the target mixes them.
pub fn generate_tabular_family(spec: TabularFamilySpec, seed: u64) -> Result<TabularFamily> {
    let TabularFamilySpec {
        horizon,
        num_states,
        num_actions,
        dim,
        num_sources,
    } = spec;
    if horizon == 0 || num_sources == 0 || dim == 0 || num_states * num_actions < dim {
        return Err(contract("tabular family needs H, K ≥ 1 and S·A ≥ d"));
    }
    let mut rng = seeded_rng(seed, 0);
    let pairs = num_states * num_actions;
    let mut assignment = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        // first d pairs (after a shuffle) cover every cluster
        let mut order: Vec<usize> = (0..pairs).collect();
        for i in (1..pairs).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut row = vec![0; pairs];
        for (rank, &p) in order.iter().enumerate() {
            row[p] = if rank < dim {
                rank
            } else {
                rng.random_range(0..dim)
            };
        }
        assignment.push(row);
    }
    let phi: Vec<Vec<Vec<f64>>> = assignment
        .iter()
        .map(|row| {
            row.iter()
                .map(|&c| {
                    let mut v = vec![0.0; dim];
                    v[c] = 1.0;
                    v
                })
                .collect()
        })
        .collect();
    let reward: Vec<Vec<f64>> = (0..horizon)
        .map(|_| (0..pairs).map(|_| rng.random::<f64>()).collect())
        .collect();
    let init_dist = random_simplex(&mut rng, num_states);

    let mut sources = Vec::with_capacity(num_sources);
    for _ in 0..num_sources {
        // per step, per cluster: a law over next states; stored transposed as μ[h][s'][c]
        let mut mu = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let laws: Vec<Vec<f64>> = (0..dim)
                .map(|_| random_simplex(&mut rng, num_states))
                .collect();
            mu.push(
                (0..num_states)
                    .map(|sp| (0..dim).map(|c| laws[c][sp]).collect())
                    .collect(),
            );
        }
        sources.push(TabularLowRankMDP {
            horizon,
            num_states,
            num_actions,
            dim,
            phi: phi.clone(),
            mu,
            reward: reward.clone(),
            init_dist: init_dist.clone(),
        });
    }
    let mixture = random_simplex(&mut rng, num_sources);
    let target_mu = (0..horizon)
        .map(|h| {
            (0..num_states)
                .map(|sp| {
                    (0..dim)
                        .map(|c| {
                            sources
                                .iter()
                                .zip(&mixture)
                                .map(|(src, w)| w * src.mu[h][sp][c])
                                .sum()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let target = TabularLowRankMDP {
        mu: target_mu,
        ..sources[0].clone()
    };
    Ok(TabularFamily {
        sources,
        target,
        assignment,
        mixture,
        seed,
    })
}

impl TabularFamily {
    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn horizon(&self) -> usize {
        self.target.horizon
    }

    /// Task 0..K are sources, task K is the target.
    pub fn task(&self, id: usize) -> &TabularLowRankMDP {
        if id < self.sources.len() {
            &self.sources[id]
        } else {
            &self.target
        }
    }

    pub fn alpha_max(&self) -> Result<f64> {
        alpha_max_tabular(&self.target, &self.sources)
    }
}

/// Tabular states are observed as one-hot vectors.
pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

impl Environment for TabularLowRankMDP {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn obs_dim(&self) -> usize {
        self.num_states
    }

    fn reset(&self, rng: &mut ChaCha8Rng) -> usize {
        sample_categorical(&self.init_dist, rng)
    }

    fn observe(&self, latent: usize, _h: usize, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        one_hot(latent, self.num_states)
    }

    fn step(&self, latent: usize, action: usize, h: usize, rng: &mut ChaCha8Rng) -> (usize, f64) {
        let next = sample_categorical(&self.transition(latent, action, h), rng);
        (next, self.reward(latent, action, h))
    }

    fn expected_reward(&self, latent: usize, action: usize, h: usize) -> f64 {
        self.reward(latent, action, h)
    }

    fn latent_of(&self, obs: &[f64]) -> usize {
        obs.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
                if x > best.1 {
                    (i, x)
                } else {
                    best
                }
            })
            .0
    }
}
