//! Linear value iteration over a learned representation: the pessimistic
//! transfer planner, its LSVI / LCB / UCB baselines, rollouts and the
//! suboptimality diagnostic.
//!
//! Observations enter planning only through a [`StateKey`]: the oracle latent
//! (for the known reward) and the decoded state under every feature map of
//! the class. Transitions are aggregated by key, so a backward pass costs the
//! same no matter how many trajectories back it.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::OfflineDataset;
use crate::envs::{seeded_rng, Environment, TabularPolicy};
use crate::error::{contract, Result};
use crate::numerics::{dot, weighted_ridge_covariance, Cholesky, Matrix, MIN_RIDGE};
use crate::representation::{one_hot, FeatureMap, LearnedRep};
use crate::uncertainty::EpsilonModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// `Γ = H(β + ε_h)‖φ‖_Λ + H ε(s, a)`, subtracted.
    Prt,
    /// `Γ = β‖φ‖_Λ`, subtracted.
    Lcb,
    /// No penalty.
    Lsvi,
    /// `Γ = β‖φ‖_Λ`, added.
    Ucb,
}

impl PenaltyMode {
    pub fn name(self) -> &'static str {
        match self {
            PenaltyMode::Prt => "prt",
            PenaltyMode::Lcb => "lcb",
            PenaltyMode::Lsvi => "lsvi",
            PenaltyMode::Ucb => "ucb",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub lambda: f64,
    pub c: f64,
    pub delta: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            c: 1.0,
            delta: 0.01,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= MIN_RIDGE) || !self.lambda.is_finite() {
            return Err(contract(format!("lambda must be at least {MIN_RIDGE}")));
        }
        if !(self.c >= 1.0) || !self.c.is_finite() {
            return Err(contract("c must be a finite number ≥ 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(contract("delta must lie in (0,1)"));
        }
        Ok(())
    }

    /// `ζ = log(4dHn/δ)/n`, with `n` floored at 1.
    pub fn zeta(&self, dim: usize, horizon: usize, n: usize) -> f64 {
        let n = n.max(1) as f64;
        (4.0 * dim as f64 * horizon as f64 * n / self.delta).ln() / n
    }

    /// `β = c·d·√ζ`.
    pub fn beta(&self, dim: usize, horizon: usize, n: usize) -> f64 {
        self.c * dim as f64 * self.zeta(dim, horizon, n).sqrt()
    }
}

/// `[oracle latent, decoded state under map 0, map 1, ...]`.
pub type StateKey = Vec<usize>;

/// Pointwise transfer error fed to the PRT penalty.
#[derive(Debug, Clone, Copy)]
pub enum EpsilonFn<'a> {
    Constant(f64),
    Model(&'a EpsilonModel),
    Scaled(&'a EpsilonModel, f64),
}

/// How observations become features, rewards and ε for one run.
#[derive(Clone)]
pub struct PlanContext<'a> {
    env: &'a dyn Environment,
    class: &'a [FeatureMap],
    chosen: Vec<usize>,
    epsilon: EpsilonFn<'a>,
}

impl<'a> PlanContext<'a> {
    /// `chosen[h-1]` indexes the map used as `φ̂_h`. An ε model must be built
    /// over the same class so that keys translate into its labels.
    pub fn new(
        env: &'a dyn Environment,
        class: &'a [FeatureMap],
        chosen: Vec<usize>,
        epsilon: EpsilonFn<'a>,
    ) -> Result<Self> {
        if chosen.len() != env.horizon() {
            return Err(contract("one chosen feature map per step is required"));
        }
        if chosen.iter().any(|&j| j >= class.len()) {
            return Err(contract("chosen feature map index out of range"));
        }
        let dim = class[chosen[0]].dim();
        if chosen.iter().any(|&j| class[j].dim() != dim) {
            return Err(contract("chosen feature maps disagree on dimension"));
        }
        if chosen
            .iter()
            .any(|&j| class[j].num_actions() != env.num_actions())
        {
            return Err(contract(
                "feature map action count does not match the environment",
            ));
        }
        match epsilon {
            EpsilonFn::Model(m) | EpsilonFn::Scaled(m, _)
                if m.horizon() != env.horizon() || m.class_size() != class.len() =>
            {
                return Err(contract(
                    "epsilon model does not match the environment or class",
                ));
            }
            _ => {}
        }
        Ok(Self {
            env,
            class,
            chosen,
            epsilon,
        })
    }

    /// Context for a learned representation over a full class.
    pub fn learned(
        env: &'a dyn Environment,
        class: &'a [FeatureMap],
        rep: &'a LearnedRep,
        epsilon: EpsilonFn<'a>,
    ) -> Result<Self> {
        let chosen = rep.steps.iter().map(|s| s.phi_index).collect();
        Self::new(env, class, chosen, epsilon)
    }

    pub fn env(&self) -> &'a dyn Environment {
        self.env
    }

    pub fn horizon(&self) -> usize {
        self.env.horizon()
    }

    pub fn num_actions(&self) -> usize {
        self.env.num_actions()
    }

    pub fn dim(&self) -> usize {
        self.class[self.chosen[0]].dim()
    }

    pub fn key(&self, obs: &[f64]) -> StateKey {
        let mut key = Vec::with_capacity(1 + self.class.len());
        key.push(self.env.latent_of(obs));
        key.extend(self.class.iter().map(|m| m.decode(obs)));
        key
    }

    fn label(&self, key: &StateKey, a: usize, h: usize) -> usize {
        let j = self.chosen[h - 1];
        self.class[j].label_of_state(key[1 + j], a, h)
    }

    pub fn features(&self, key: &StateKey, a: usize, h: usize) -> Vec<f64> {
        one_hot(self.label(key, a, h), self.dim())
    }

    pub fn reward(&self, key: &StateKey, a: usize, h: usize) -> f64 {
        self.env.expected_reward(key[0], a, h)
    }

    pub fn epsilon(&self, key: &StateKey, a: usize, h: usize) -> Result<f64> {
        let labels = || -> Vec<usize> {
            self.class
                .iter()
                .enumerate()
                .map(|(j, map)| map.label_of_state(key[1 + j], a, h))
                .collect()
        };
        match self.epsilon {
            EpsilonFn::Constant(e) => Ok(e),
            EpsilonFn::Model(m) => Ok(m.query_labels(h, &labels())?.epsilon.value),
            EpsilonFn::Scaled(m, s) => Ok(s * m.query_labels(h, &labels())?.epsilon.value),
        }
    }
}

/// Target transitions aggregated by key: `counts[h-1][(key, a, next_key)]`.
#[derive(Debug, Clone, Default)]
pub struct TransitionCounts {
    pub num_trajectories: usize,
    counts: Vec<BTreeMap<(StateKey, usize, StateKey), u64>>,
}

impl TransitionCounts {
    pub fn new(horizon: usize) -> Self {
        Self {
            num_trajectories: 0,
            counts: vec![BTreeMap::new(); horizon],
        }
    }

    pub fn from_dataset(ctx: &PlanContext, ds: &OfflineDataset) -> Result<Self> {
        if ds.horizon() != ctx.horizon() {
            return Err(contract("dataset horizon does not match the environment"));
        }
        let mut out = Self::new(ctx.horizon());
        for traj in &ds.trajectories {
            for r in traj {
                out.add(r.h, ctx.key(&r.obs), r.a, ctx.key(&r.next_obs));
            }
        }
        out.num_trajectories = ds.trajectories.len();
        Ok(out)
    }

    pub fn add(&mut self, h: usize, key: StateKey, a: usize, next: StateKey) {
        *self.counts[h - 1].entry((key, a, next)).or_default() += 1;
    }

    pub fn step(&self, h: usize) -> &BTreeMap<(StateKey, usize, StateKey), u64> {
        &self.counts[h - 1]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyStep {
    pub step: usize,
    pub phi_index: usize,
    pub weights: Vec<f64>,
    pub covariance: Matrix,
    pub beta: f64,
    pub epsilon_h: f64,
    #[serde(skip)]
    factor: OnceLock<Cholesky>,
}

impl PolicyStep {
    fn factor(&self) -> &Cholesky {
        self.factor.get_or_init(|| {
            Cholesky::new(&self.covariance).expect("ridge covariance is positive definite")
        })
    }
}

/// Q-value of one action before and after truncation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionValue {
    pub q_bar: f64,
    pub q_hat: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearQPolicy {
    pub mode: PenaltyMode,
    pub horizon: usize,
    pub num_actions: usize,
    pub dim: usize,
    pub num_trajectories: usize,
    pub steps: Vec<PolicyStep>,
}

impl LinearQPolicy {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        if p.steps.len() != p.horizon {
            return Err(contract("policy needs one entry per step"));
        }
        for s in &p.steps {
            if s.weights.len() != p.dim
                || s.covariance.rows() != p.dim
                || s.covariance.cols() != p.dim
            {
                return Err(contract("policy step has mismatched dimensions"));
            }
            Cholesky::new(&s.covariance)?;
        }
        Ok(p)
    }

    pub fn action_value(
        &self,
        ctx: &PlanContext,
        key: &StateKey,
        a: usize,
        h: usize,
    ) -> Result<ActionValue> {
        step_action_value(&self.steps[h - 1], self.mode, self.horizon, ctx, key, a)
    }

    /// Greedy action and its value. Among actions maximising `Q̂` the one with
    /// the larger untruncated `Q̄` wins, then the lowest index.
    pub fn greedy(
        &self,
        ctx: &PlanContext,
        key: &StateKey,
        h: usize,
    ) -> Result<(usize, ActionValue)> {
        step_greedy(&self.steps[h - 1], self.mode, self.horizon, ctx, key)
    }

    pub fn act(&self, ctx: &PlanContext, obs: &[f64], h: usize) -> Result<usize> {
        Ok(self.greedy(ctx, &ctx.key(obs), h)?.0)
    }

    /// `V̂_h(obs)`.
    pub fn value(&self, ctx: &PlanContext, obs: &[f64], h: usize) -> Result<f64> {
        Ok(self.greedy(ctx, &ctx.key(obs), h)?.1.q_hat)
    }

    /// Greedy actions on the states of a tabular environment (one-hot
    /// observations), `π[h-1][s]`.
    pub fn tabular_policy(&self, ctx: &PlanContext, num_states: usize) -> Result<TabularPolicy> {
        (1..=self.horizon)
            .map(|h| {
                (0..num_states)
                    .map(|s| self.act(ctx, &one_hot(s, num_states), h))
                    .collect()
            })
            .collect()
    }

    pub fn tabular_values(&self, ctx: &PlanContext, num_states: usize) -> Result<Vec<Vec<f64>>> {
        (1..=self.horizon)
            .map(|h| {
                (0..num_states)
                    .map(|s| self.value(ctx, &one_hot(s, num_states), h))
                    .collect()
            })
            .collect()
    }
}

fn step_action_value(
    step: &PolicyStep,
    mode: PenaltyMode,
    horizon: usize,
    ctx: &PlanContext,
    key: &StateKey,
    a: usize,
) -> Result<ActionValue> {
    let h = step.step;
    let phi = ctx.features(key, a, h);
    let mean = ctx.reward(key, a, h) + dot(&phi, &step.weights);
    let big_h = horizon as f64;
    let penalty = match mode {
        PenaltyMode::Lsvi => 0.0,
        PenaltyMode::Lcb | PenaltyMode::Ucb => step.beta * step.factor().inverse_norm(&phi)?,
        PenaltyMode::Prt => {
            big_h * (step.beta + step.epsilon_h) * step.factor().inverse_norm(&phi)?
                + big_h * ctx.epsilon(key, a, h)?
        }
    };
    let q_bar = if mode == PenaltyMode::Ucb {
        mean + penalty
    } else {
        mean - penalty
    };
    let cap = (horizon - h + 1) as f64;
    Ok(ActionValue {
        q_bar,
        q_hat: q_bar.clamp(0.0, cap),
        penalty,
    })
}

fn step_greedy(
    step: &PolicyStep,
    mode: PenaltyMode,
    horizon: usize,
    ctx: &PlanContext,
    key: &StateKey,
) -> Result<(usize, ActionValue)> {
    let mut best: Option<(usize, ActionValue)> = None;
    for a in 0..ctx.num_actions() {
        let v = step_action_value(step, mode, horizon, ctx, key, a)?;
        let better = match &best {
            None => true,
            Some((_, b)) => v.q_hat > b.q_hat || (v.q_hat == b.q_hat && v.q_bar > b.q_bar),
        };
        if better {
            best = Some((a, v));
        }
    }
    Ok(best.expect("at least one action"))
}

/// Backward pass with `β` from the config.
pub fn plan(
    ctx: &PlanContext,
    data: &TransitionCounts,
    config: &PlannerConfig,
    mode: PenaltyMode,
) -> Result<LinearQPolicy> {
    config.validate()?;
    let beta = config.beta(ctx.dim(), ctx.horizon(), data.num_trajectories);
    plan_with_beta(ctx, data, config.lambda, beta, mode)
}

/// Backward pass shared by every planner, for an explicit `β ≥ 0`.
pub fn plan_with_beta(
    ctx: &PlanContext,
    data: &TransitionCounts,
    lambda: f64,
    beta: f64,
    mode: PenaltyMode,
) -> Result<LinearQPolicy> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(contract("beta must be a nonnegative finite number"));
    }
    let horizon = ctx.horizon();
    let dim = ctx.dim();
    let n = data.num_trajectories;
    let n_norm = n.max(1) as f64;
    let mut built: Vec<PolicyStep> = Vec::with_capacity(horizon);
    for h in (1..=horizon).rev() {
        let entries = data.step(h);
        let feats: Vec<(Vec<f64>, f64)> = entries
            .iter()
            .map(|((key, a, _), c)| (ctx.features(key, *a, h), *c as f64))
            .collect();
        let weighted: Vec<(&[f64], f64)> = feats.iter().map(|(f, c)| (f.as_slice(), *c)).collect();
        let covariance = weighted_ridge_covariance(&weighted, dim, lambda, n_norm)?;
        let factor = Cholesky::new(&covariance)?;

        let mut rhs = vec![0.0; dim];
        if let Some(next_step) = built.last() {
            let mut next_values: BTreeMap<&StateKey, f64> = BTreeMap::new();
            for (_, _, next) in entries.keys() {
                if !next_values.contains_key(next) {
                    let v = step_greedy(next_step, mode, horizon, ctx, next)?.1.q_hat;
                    next_values.insert(next, v);
                }
            }
            for (((_, _, next), _), (f, c)) in entries.iter().zip(&feats) {
                let v = next_values[next] * c / n_norm;
                for (r, x) in rhs.iter_mut().zip(f) {
                    *r += x * v;
                }
            }
        }
        let weights = factor.solve(&rhs)?;

        let epsilon_h = if mode == PenaltyMode::Prt {
            let mut sq = 0.0;
            let mut total = 0.0;
            for ((key, a, _), c) in entries {
                let e = ctx.epsilon(key, *a, h)?;
                sq += e * e * *c as f64;
                total += *c as f64;
            }
            if total > 0.0 {
                (sq / total).sqrt()
            } else {
                0.0
            }
        } else {
            0.0
        };

        let step = PolicyStep {
            step: h,
            phi_index: ctx.chosen[h - 1],
            weights,
            covariance,
            beta,
            epsilon_h,
            factor: OnceLock::new(),
        };
        let _ = step.factor.set(factor);
        built.push(step);
    }
    built.reverse();
    Ok(LinearQPolicy {
        mode,
        horizon,
        num_actions: ctx.num_actions(),
        dim,
        num_trajectories: n,
        steps: built,
    })
}

pub fn prt_plan(
    ctx: &PlanContext,
    target: &OfflineDataset,
    config: &PlannerConfig,
) -> Result<LinearQPolicy> {
    plan(
        ctx,
        &TransitionCounts::from_dataset(ctx, target)?,
        config,
        PenaltyMode::Prt,
    )
}

pub fn lsvi_plan(
    ctx: &PlanContext,
    target: &OfflineDataset,
    config: &PlannerConfig,
) -> Result<LinearQPolicy> {
    plan(
        ctx,
        &TransitionCounts::from_dataset(ctx, target)?,
        config,
        PenaltyMode::Lsvi,
    )
}

pub fn lsvi_lcb_plan(
    ctx: &PlanContext,
    target: &OfflineDataset,
    config: &PlannerConfig,
) -> Result<LinearQPolicy> {
    plan(
        ctx,
        &TransitionCounts::from_dataset(ctx, target)?,
        config,
        PenaltyMode::Lcb,
    )
}

/// Mean episode return with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean: f64,
    pub stderr: f64,
    pub num_episodes: usize,
}

impl Evaluation {
    pub fn from_returns(returns: &[f64]) -> Self {
        let n = returns.len();
        let mean = returns.iter().sum::<f64>() / n.max(1) as f64;
        let stderr = if n > 1 {
            let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            num_episodes: n,
        }
    }
}

/// Return of one episode on substream `(seed, episode)`. `act` sees the
/// observation and the step.
pub fn run_episode<F>(env: &dyn Environment, seed: u64, episode: u64, act: &F) -> Result<f64>
where
    F: Fn(&[f64], usize) -> Result<usize> + Sync,
{
    let mut rng = seeded_rng(seed, episode);
    let mut latent = env.reset(&mut rng);
    let mut total = 0.0;
    for h in 1..=env.horizon() {
        let obs = env.observe(latent, h, &mut rng);
        let a = act(&obs, h)?;
        let (next, r) = env.step(latent, a, h, &mut rng);
        total += r;
        latent = next;
    }
    Ok(total)
}

/// Monte-Carlo evaluation of an arbitrary observation-level policy.
pub fn evaluate_with<F>(
    env: &dyn Environment,
    num_episodes: usize,
    seed: u64,
    act: F,
) -> Result<Evaluation>
where
    F: Fn(&[f64], usize) -> Result<usize> + Sync,
{
    if num_episodes == 0 {
        return Err(contract("evaluation needs at least one episode"));
    }
    let returns = (0..num_episodes as u64)
        .into_par_iter()
        .map(|e| run_episode(env, seed, e, &act))
        .collect::<Result<Vec<f64>>>()?;
    Ok(Evaluation::from_returns(&returns))
}

pub fn evaluate_policy(
    env: &dyn Environment,
    policy: &LinearQPolicy,
    ctx: &PlanContext,
    num_episodes: usize,
    seed: u64,
) -> Result<Evaluation> {
    evaluate_with(env, num_episodes, seed, |obs, h| policy.act(ctx, obs, h))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UcbOptions {
    pub window: usize,
    pub threshold: f64,
    pub episode_cap: usize,
}

impl Default for UcbOptions {
    fn default() -> Self {
        Self {
            window: 50,
            threshold: 0.99,
            episode_cap: 50_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UcbOutcome {
    pub policy: LinearQPolicy,
    pub episodes_used: usize,
    pub converged: bool,
    /// Average return of the last `window` episodes played.
    pub trailing_mean: f64,
}

/// Online optimistic LSVI: play greedily w.r.t. the optimistic `Q̂`, add the
/// episode to the data, replan. Stops once the trailing-window average
/// return reaches the threshold or at the episode cap. Episode `t` runs on
/// substream `(seed, t)` of the environment generator.
pub fn lsvi_ucb_online(
    ctx: &PlanContext,
    config: &PlannerConfig,
    options: &UcbOptions,
    seed: u64,
) -> Result<UcbOutcome> {
    if options.window == 0 || options.episode_cap < options.window {
        return Err(contract("UCB needs 1 ≤ window ≤ episode cap"));
    }
    let env = ctx.env();
    let mut data = TransitionCounts::new(ctx.horizon());
    let mut policy = plan(ctx, &data, config, PenaltyMode::Ucb)?;
    let mut returns: Vec<f64> = Vec::new();
    let mut window_sum = 0.0;
    for t in 0..options.episode_cap {
        let mut rng = seeded_rng(seed, t as u64);
        let mut latent = env.reset(&mut rng);
        let mut key = ctx.key(&env.observe(latent, 1, &mut rng));
        let mut total = 0.0;
        for h in 1..=ctx.horizon() {
            let (a, _) = policy.greedy(ctx, &key, h)?;
            let (next, r) = env.step(latent, a, h, &mut rng);
            let next_key = ctx.key(&env.observe(next, h + 1, &mut rng));
            data.add(h, key, a, next_key.clone());
            total += r;
            latent = next;
            key = next_key;
        }
        data.num_trajectories += 1;
        returns.push(total);
        window_sum += total;
        if returns.len() > options.window {
            window_sum -= returns[returns.len() - 1 - options.window];
        }
        policy = plan(ctx, &data, config, PenaltyMode::Ucb)?;
        if returns.len() >= options.window {
            let trailing = window_sum / options.window as f64;
            if trailing >= options.threshold {
                return Ok(UcbOutcome {
                    policy,
                    episodes_used: t + 1,
                    converged: true,
                    trailing_mean: trailing,
                });
            }
        }
    }
    let w = options.window.min(returns.len());
    let trailing = returns[returns.len() - w..].iter().sum::<f64>() / w as f64;
    Ok(UcbOutcome {
        policy,
        episodes_used: options.episode_cap,
        converged: false,
        trailing_mean: trailing,
    })
}

/// Monte-Carlo estimates, under the optimal policy and the true dynamics, of
/// the three penalty terms that bound the suboptimality gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuboptimalityTerms {
    /// `2H Σ_h E[ε(s_h, a_h)]`.
    pub source_coverage_on_optimal: f64,
    /// `2H Σ_h E[ε_h ‖φ̂_h‖_Λ]`.
    pub source_coverage_on_target: f64,
    /// `2H Σ_h E[β ‖φ̂_h‖_Λ]`.
    pub target_coverage_on_optimal: f64,
    /// Standard error of the total.
    pub stderr: f64,
}

impl SuboptimalityTerms {
    pub fn total(&self) -> f64 {
        self.source_coverage_on_optimal
            + self.source_coverage_on_target
            + self.target_coverage_on_optimal
    }
}

/// `optimal[h-1][latent]` is the oracle policy the expectations follow.
pub fn suboptimality_decomposition(
    ctx: &PlanContext,
    policy: &LinearQPolicy,
    optimal: &TabularPolicy,
    num_rollouts: usize,
    seed: u64,
) -> Result<SuboptimalityTerms> {
    if num_rollouts == 0 {
        return Err(contract("decomposition needs at least one rollout"));
    }
    let env = ctx.env();
    let scale = 2.0 * ctx.horizon() as f64;
    let per_rollout = (0..num_rollouts as u64)
        .into_par_iter()
        .map(|e| -> Result<[f64; 3]> {
            let mut rng = seeded_rng(seed, e);
            let mut latent = env.reset(&mut rng);
            let mut terms = [0.0; 3];
            for h in 1..=ctx.horizon() {
                let obs = env.observe(latent, h, &mut rng);
                let key = ctx.key(&obs);
                let a = optimal[h - 1][latent];
                let step = &policy.steps[h - 1];
                let norm = step.factor().inverse_norm(&ctx.features(&key, a, h))?;
                terms[0] += scale * ctx.epsilon(&key, a, h)?;
                terms[1] += scale * step.epsilon_h * norm;
                terms[2] += scale * step.beta * norm;
                latent = env.step(latent, a, h, &mut rng).0;
            }
            Ok(terms)
        })
        .collect::<Result<Vec<[f64; 3]>>>()?;
    let mean = |i: usize| per_rollout.iter().map(|t| t[i]).sum::<f64>() / num_rollouts as f64;
    let totals: Vec<f64> = per_rollout.iter().map(|t| t.iter().sum()).collect();
    Ok(SuboptimalityTerms {
        source_coverage_on_optimal: mean(0),
        source_coverage_on_target: mean(1),
        target_coverage_on_optimal: mean(2),
        stderr: Evaluation::from_returns(&totals).stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{collect, LatentTablePolicy};
    use crate::envs::{
        generate_comblock_family, generate_tabular_family, TabularFamily, TabularFamilySpec,
    };
    use crate::representation::build_tabular_hypothesis_class;

    fn tabular_fixture(horizon: usize, seed: u64) -> (TabularFamily, Vec<FeatureMap>) {
        let spec = TabularFamilySpec {
            horizon,
            ..TabularFamilySpec::default()
        };
        let family = generate_tabular_family(spec, seed).unwrap();
        let classes = build_tabular_hypothesis_class(&family, 0, seed).unwrap();
        (family, vec![classes.phi[0].clone()])
    }

    fn uniform_data(family: &TabularFamily, n: usize, seed: u64) -> OfflineDataset {
        let t = &family.target;
        collect(
            t,
            &LatentTablePolicy::uniform(t.horizon, t.num_states, t.num_actions),
            n,
            seed,
            0,
        )
    }

    #[test]
    fn beta_formula() {
        let cfg = PlannerConfig::default();
        let expected = 15.0 * ((4.0f64 * 15.0 * 5.0 * 150.0 / 0.01).ln() / 150.0).sqrt();
        assert!((cfg.beta(15, 5, 150) - expected).abs() < 1e-12);
        assert!(PlannerConfig { c: 0.5, ..cfg }.validate().is_err());
        assert!(PlannerConfig { delta: 1.0, ..cfg }.validate().is_err());
        assert!(PlannerConfig { lambda: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn lsvi_matches_textbook_one_hot_regression() {
        let (family, class) = tabular_fixture(3, 4);
        let env = &family.target;
        let ctx = PlanContext::new(env, &class, vec![0; 3], EpsilonFn::Constant(0.0)).unwrap();
        let ds = uniform_data(&family, 80, 9);
        let policy = lsvi_plan(&ctx, &ds, &PlannerConfig::default()).unwrap();
        let (s_count, a_count) = (env.num_states, env.num_actions);
        // V̂_{h+1} from the hand recursion, per state
        let mut v_next = vec![0.0; s_count];
        for h in (1..=3).rev() {
            let mut sums = [0.0; 3];
            let mut counts = [0.0; 3];
            for r in ds.slice(h) {
                let s = r.obs.iter().position(|&x| x == 1.0).unwrap();
                let sp = r.next_obs.iter().position(|&x| x == 1.0).unwrap();
                let l = family.assignment[h - 1][s * a_count + r.a];
                sums[l] += if h < 3 { v_next[sp] } else { 0.0 };
                counts[l] += 1.0;
            }
            let w: Vec<f64> = (0..3).map(|l| sums[l] / (counts[l] + 1.0)).collect();
            for (x, y) in w.iter().zip(&policy.steps[h - 1].weights) {
                assert!((x - y).abs() < 1e-12, "step {h}: {x} vs {y}");
            }
            v_next = (0..s_count)
                .map(|s| {
                    (0..a_count)
                        .map(|a| {
                            (env.reward(s, a, h) + w[family.assignment[h - 1][s * a_count + a]])
                                .clamp(0.0, (4 - h) as f64)
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
        }
    }

    #[test]
    fn one_step_unrolling() {
        let (family, class) = tabular_fixture(1, 2);
        let env = &family.target;
        let ctx = PlanContext::new(env, &class, vec![0], EpsilonFn::Constant(0.05)).unwrap();
        let ds = uniform_data(&family, 30, 1);
        let policy = prt_plan(&ctx, &ds, &PlannerConfig::default()).unwrap();
        assert!(policy.steps[0].weights.iter().all(|w| *w == 0.0));
        let step = &policy.steps[0];
        for s in 0..env.num_states {
            let key = ctx.key(&one_hot(s, env.num_states));
            let scores: Vec<f64> = (0..env.num_actions)
                .map(|a| {
                    let phi = ctx.features(&key, a, 1);
                    let norm = crate::numerics::elliptical_norm(&phi, &step.covariance).unwrap();
                    env.reward(s, a, 1) - (step.beta + step.epsilon_h) * norm - 0.05
                })
                .collect();
            let (a, v) = policy.greedy(&ctx, &key, 1).unwrap();
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((v.q_bar - best).abs() < 1e-12);
            assert_eq!(scores[a], best);
        }
        let lsvi = lsvi_plan(&ctx, &ds, &PlannerConfig::default()).unwrap();
        for s in 0..env.num_states {
            let a = lsvi.act(&ctx, &one_hot(s, env.num_states), 1).unwrap();
            let best = (0..env.num_actions)
                .map(|b| env.reward(s, b, 1))
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(env.reward(s, a, 1), best);
        }
    }

    #[test]
    fn penalties_vanish_in_large_data_limit() {
        let (family, class) = tabular_fixture(3, 7);
        let env = &family.target;
        let ctx = PlanContext::new(env, &class, vec![0; 3], EpsilonFn::Constant(0.0)).unwrap();
        let ds = uniform_data(&family, 40_000, 3);
        let data = TransitionCounts::from_dataset(&ctx, &ds).unwrap();
        let prt = plan_with_beta(&ctx, &data, 1.0, 0.0, PenaltyMode::Prt).unwrap();
        let lsvi = plan_with_beta(&ctx, &data, 1.0, 0.0, PenaltyMode::Lsvi).unwrap();
        assert_eq!(
            serde_json::to_string(&prt.steps).unwrap(),
            serde_json::to_string(&lsvi.steps).unwrap()
        );
        let table = prt.tabular_policy(&ctx, env.num_states).unwrap();
        let (v_star, _) = env.optimal_values();
        let v_hat = env.policy_values(&table);
        assert!((env.initial_value(&v_star) - env.initial_value(&v_hat)).abs() < 1e-2);
        // β = 0 LCB is LSVI
        let lcb = plan_with_beta(&ctx, &data, 1.0, 0.0, PenaltyMode::Lcb).unwrap();
        assert_eq!(
            serde_json::to_string(&lcb.steps).unwrap(),
            serde_json::to_string(&lsvi.steps).unwrap()
        );
    }

    #[test]
    fn penalty_and_value_ordering() {
        let (family, class) = tabular_fixture(3, 5);
        let env = &family.target;
        let ctx = PlanContext::new(env, &class, vec![0; 3], EpsilonFn::Constant(0.02)).unwrap();
        let ds = uniform_data(&family, 200, 2);
        let data = TransitionCounts::from_dataset(&ctx, &ds).unwrap();
        let beta = 0.3;
        let prt = plan_with_beta(&ctx, &data, 1.0, beta, PenaltyMode::Prt).unwrap();
        let lcb = plan_with_beta(&ctx, &data, 1.0, beta, PenaltyMode::Lcb).unwrap();
        let lsvi = plan_with_beta(&ctx, &data, 1.0, beta, PenaltyMode::Lsvi).unwrap();
        let n = env.num_states;
        let (vp, vl, vs) = (
            prt.tabular_values(&ctx, n).unwrap(),
            lcb.tabular_values(&ctx, n).unwrap(),
            lsvi.tabular_values(&ctx, n).unwrap(),
        );
        for h in 1..=3 {
            for s in 0..n {
                assert!(vp[h - 1][s] <= vl[h - 1][s] + 1e-12);
                assert!(vl[h - 1][s] <= vs[h - 1][s] + 1e-12);
                let key = ctx.key(&one_hot(s, n));
                for a in 0..env.num_actions {
                    // same regression target isolates the penalty
                    let gp =
                        step_action_value(&lcb.steps[h - 1], PenaltyMode::Prt, 3, &ctx, &key, a)
                            .unwrap();
                    let gl = lcb.action_value(&ctx, &key, a, h).unwrap();
                    assert!(gp.penalty >= gl.penalty && gl.penalty >= 0.0);
                    assert_eq!(lsvi.action_value(&ctx, &key, a, h).unwrap().penalty, 0.0);
                }
            }
        }
    }

    #[test]
    fn truncation_keeps_values_in_range() {
        let (family, class) = tabular_fixture(3, 8);
        let env = &family.target;
        let ctx = PlanContext::new(env, &class, vec![0; 3], EpsilonFn::Constant(0.3)).unwrap();
        for n in [1, 5, 50] {
            let ds = uniform_data(&family, n, n as u64);
            for mode in [
                PenaltyMode::Prt,
                PenaltyMode::Lcb,
                PenaltyMode::Lsvi,
                PenaltyMode::Ucb,
            ] {
                let data = TransitionCounts::from_dataset(&ctx, &ds).unwrap();
                let p = plan(&ctx, &data, &PlannerConfig::default(), mode).unwrap();
                for h in 1..=3 {
                    for s in 0..env.num_states {
                        let key = ctx.key(&one_hot(s, env.num_states));
                        for a in 0..env.num_actions {
                            let q = p.action_value(&ctx, &key, a, h).unwrap().q_hat;
                            assert!((0.0..=(4 - h) as f64).contains(&q));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn lcb_saturates_far_from_data() {
        let (family, class) = tabular_fixture(1, 3);
        let env = &family.target;
        let ctx = PlanContext::new(env, &class, vec![0], EpsilonFn::Constant(0.0)).unwrap();
        let ds = uniform_data(&family, 1, 0);
        let policy = lsvi_lcb_plan(&ctx, &ds, &PlannerConfig::default()).unwrap();
        let seen = ctx.features(
            &ctx.key(&ds.trajectories[0][0].obs),
            ds.trajectories[0][0].a,
            1,
        );
        for s in 0..env.num_states {
            let key = ctx.key(&one_hot(s, env.num_states));
            for a in 0..env.num_actions {
                if ctx.features(&key, a, 1) != seen {
                    let v = policy.action_value(&ctx, &key, a, 1).unwrap();
                    assert!(v.penalty > 1.0);
                    assert_eq!(v.q_hat, 0.0);
                }
            }
        }
    }

    #[test]
    fn policy_json_round_trip() {
        let (family, class) = tabular_fixture(3, 1);
        let env = &family.target;
        let ctx = PlanContext::new(env, &class, vec![0; 3], EpsilonFn::Constant(0.1)).unwrap();
        let ds = uniform_data(&family, 25, 6);
        let p = prt_plan(&ctx, &ds, &PlannerConfig::default()).unwrap();
        let text = p.to_json().unwrap();
        let back = LinearQPolicy::from_json(&text).unwrap();
        assert_eq!(back.to_json().unwrap(), text);
        for s in 0..env.num_states {
            let o = one_hot(s, env.num_states);
            assert_eq!(back.act(&ctx, &o, 2).unwrap(), p.act(&ctx, &o, 2).unwrap());
        }
        let mut broken: serde_json::Value = serde_json::from_str(&text).unwrap();
        broken["steps"].as_array_mut().unwrap().pop();
        assert!(LinearQPolicy::from_json(&broken.to_string()).is_err());
    }

    #[test]
    fn evaluation_examples() {
        let family = generate_comblock_family(5, 2, 3).unwrap();
        let env = &family.target;
        let opt = env.latent_optimal_policy();
        let e = evaluate_with(env, 64, 1, |obs, h| Ok(opt[h - 1][env.latent_of(obs)])).unwrap();
        assert_eq!(e.mean, 1.0);
        assert_eq!(e.stderr, 0.0);
        let wrong = |obs: &[f64], h: usize| -> Result<usize> {
            let z = env.latent_of(obs);
            Ok(env
                .optimal_action(z, h)
                .map_or(0, |a| (a + 1) % crate::envs::comblock::NUM_ACTIONS))
        };
        let e = evaluate_with(env, 20_000, 2, wrong).unwrap();
        // exact: one anti-shaped draw at h = 1, then the absorbing bad latent
        assert!((e.mean - 0.05).abs() < 4.0 * e.stderr, "{e:?}");
        let again = evaluate_with(env, 20_000, 2, wrong).unwrap();
        assert_eq!(e, again);
        assert!(evaluate_with(env, 0, 2, wrong).is_err());
    }

    #[test]
    fn ucb_vacuous_threshold_stops_after_window() {
        let family = generate_comblock_family(3, 2, 5).unwrap();
        let env = &family.target;
        let map = crate::pipeline::true_feature(&family);
        let class = std::slice::from_ref(&map);
        let ctx = PlanContext::new(env, class, vec![0; 3], EpsilonFn::Constant(0.0)).unwrap();
        let opts = UcbOptions {
            window: 7,
            threshold: 0.0,
            episode_cap: 100,
        };
        let out = lsvi_ucb_online(&ctx, &PlannerConfig::default(), &opts, 1).unwrap();
        assert!(out.converged);
        assert_eq!(out.episodes_used, 7);
        assert_eq!(out.policy.num_trajectories, 7);
        let bad = UcbOptions {
            window: 10,
            threshold: 0.0,
            episode_cap: 5,
        };
        assert!(lsvi_ucb_online(&ctx, &PlannerConfig::default(), &bad, 1).is_err());
    }

    #[test]
    fn ucb_is_optimistic() {
        let (family, class) = tabular_fixture(3, 2);
        let env = &family.target;
        let ctx = PlanContext::new(env, &class, vec![0; 3], EpsilonFn::Constant(0.0)).unwrap();
        let ds = uniform_data(&family, 20, 4);
        let data = TransitionCounts::from_dataset(&ctx, &ds).unwrap();
        let ucb = plan(&ctx, &data, &PlannerConfig::default(), PenaltyMode::Ucb).unwrap();
        let lsvi = plan(&ctx, &data, &PlannerConfig::default(), PenaltyMode::Lsvi).unwrap();
        let vu = ucb.tabular_values(&ctx, env.num_states).unwrap();
        let vl = lsvi.tabular_values(&ctx, env.num_states).unwrap();
        for (a, b) in vu.iter().flatten().zip(vl.iter().flatten()) {
            assert!(a >= b);
        }
    }

    #[test]
    fn decomposition_terms() {
        let (family, class) = tabular_fixture(3, 9);
        let env = &family.target;
        let (v_star, pi_star) = env.optimal_values();
        let zero = PlanContext::new(env, &class, vec![0; 3], EpsilonFn::Constant(0.0)).unwrap();
        let ds = uniform_data(&family, 20_000, 5);
        let data = TransitionCounts::from_dataset(&zero, &ds).unwrap();
        let exact = plan_with_beta(&zero, &data, 1.0, 0.0, PenaltyMode::Prt).unwrap();
        let terms = suboptimality_decomposition(&zero, &exact, &pi_star, 200, 1).unwrap();
        assert_eq!(terms.total(), 0.0);

        let small = PlanContext::new(env, &class, vec![0; 3], EpsilonFn::Constant(0.1)).unwrap();
        let double = PlanContext::new(env, &class, vec![0; 3], EpsilonFn::Constant(0.2)).unwrap();
        let ds = uniform_data(&family, 60, 5);
        let p = prt_plan(&small, &ds, &PlannerConfig::default()).unwrap();
        let t1 = suboptimality_decomposition(&small, &p, &pi_star, 300, 2).unwrap();
        let t2 = suboptimality_decomposition(&double, &p, &pi_star, 300, 2).unwrap();
        assert!(
            (t2.source_coverage_on_optimal - 2.0 * t1.source_coverage_on_optimal).abs() < 1e-12
        );
        assert_eq!(t1.target_coverage_on_optimal, t2.target_coverage_on_optimal);

        // exact suboptimality never exceeds the estimated bound
        let table = p.tabular_policy(&small, env.num_states).unwrap();
        let gap = env.initial_value(&v_star) - env.initial_value(&env.policy_values(&table));
        assert!(gap <= t1.total() + 3.0 * t1.stderr);
    }

    #[test]
    fn planning_is_deterministic_across_pools() {
        let (family, class) = tabular_fixture(3, 10);
        let env = &family.target;
        let ctx = PlanContext::new(env, &class, vec![0; 3], EpsilonFn::Constant(0.1)).unwrap();
        let ds = uniform_data(&family, 100, 8);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    let p = prt_plan(&ctx, &ds, &PlannerConfig::default()).unwrap();
                    let e = evaluate_policy(env, &p, &ctx, 500, 3).unwrap();
                    (p.to_json().unwrap(), e.mean.to_bits(), e.stderr.to_bits())
                })
        };
        assert_eq!(run(1), run(4));
    }
}
