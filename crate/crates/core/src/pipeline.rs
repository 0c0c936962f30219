//! End-to-end runs: one comblock grid cell, the UCB sensitivity runs, and the
//! tabular seed sweeps that check the high-probability bounds empirically.

use serde::{Deserialize, Serialize};

use crate::datasets::{
    collect, exploratory_policy, LatentTablePolicy, OfflineDataset, DEFAULT_EPSILON_EXPLORE,
};
use crate::envs::comblock::{DEFAULT_NOISE_STD, NUM_ACTIONS};
use crate::envs::tabular::{one_hot, span_coefficients, tv_distance};
use crate::envs::{
    generate_tabular_family, ComblockTask, TabularFamily, TabularFamilySpec, TaskFamily,
};
use crate::error::Result;
use crate::planning::{
    evaluate_policy, lsvi_lcb_plan, lsvi_plan, lsvi_ucb_online, prt_plan, EpsilonFn, Evaluation,
    PlanContext, PlannerConfig, UcbOptions,
};
use crate::representation::{
    average_error_bound, build_comblock_hypothesis_class, build_tabular_hypothesis_class,
    collapsed_comblock_feature, learn_representation, source_mle_errors, FeatureMap,
    HypothesisClasses, LearnedRep, PERMUTATIONS_3,
};
use crate::uncertainty::{local_error_rhs, EpsilonModel, StepIndex};

/// Stream offsets so that every dataset of a cell draws from its own
/// generator.
pub const SOURCE_STREAM: u64 = 1_000;
pub const TARGET_STREAM: u64 = 2_000;
pub const EVAL_STREAM: u64 = 3_000;
pub const UCB_STREAM: u64 = 4_000;

/// Parameters shared by every comblock cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComblockSettings {
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "K")]
    pub num_sources: usize,
    pub noise_std: f64,
    pub epsilon_explore: f64,
    pub num_decoys: usize,
    pub eval_episodes: usize,
    pub planner: PlannerConfig,
    pub ucb: UcbOptions,
}

impl Default for ComblockSettings {
    fn default() -> Self {
        Self {
            horizon: 5,
            num_sources: 5,
            noise_std: DEFAULT_NOISE_STD,
            epsilon_explore: DEFAULT_EPSILON_EXPLORE,
            num_decoys: 4,
            eval_episodes: 50,
            planner: PlannerConfig::default(),
            ucb: UcbOptions::default(),
        }
    }
}

/// Seed of the dataset generator for a given stream of a run.
pub fn derived_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream)
}

pub fn comblock_family(settings: &ComblockSettings, seed: u64) -> Result<TaskFamily> {
    crate::envs::comblock::generate_comblock_family_with_noise(
        settings.horizon,
        settings.num_sources,
        seed,
        settings.noise_std,
    )
}

pub fn source_datasets(
    family: &TaskFamily,
    settings: &ComblockSettings,
    n_source: usize,
    seed: u64,
) -> Result<Vec<OfflineDataset>> {
    family
        .sources
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let policy = exploratory_policy(task, settings.epsilon_explore)?;
            Ok(collect(
                task,
                &policy,
                n_source,
                derived_seed(seed, SOURCE_STREAM + i as u64),
                i,
            ))
        })
        .collect()
}

pub fn target_dataset(
    family: &TaskFamily,
    settings: &ComblockSettings,
    n: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    let policy = exploratory_policy(&family.target, settings.epsilon_explore)?;
    Ok(collect(
        &family.target,
        &policy,
        n,
        derived_seed(seed, TARGET_STREAM),
        family.num_sources(),
    ))
}

/// Shared stages of a cell that do not depend on the target data size.
pub struct SourceStage {
    pub family: TaskFamily,
    pub classes: HypothesisClasses,
    pub sources: Vec<OfflineDataset>,
    pub rep: LearnedRep,
    pub epsilon: EpsilonModel,
}

impl SourceStage {
    pub fn build(settings: &ComblockSettings, n_source: usize, seed: u64) -> Result<Self> {
        let family = comblock_family(settings, seed)?;
        let classes = build_comblock_hypothesis_class(&family, settings.num_decoys, seed);
        let sources = source_datasets(&family, settings, n_source, seed)?;
        let rep = learn_representation(&sources, &classes)?;
        let epsilon = EpsilonModel::new(
            &sources,
            &classes,
            family.alpha_max()?,
            settings.planner.delta,
        )?;
        Ok(Self {
            family,
            classes,
            sources,
            rep,
            epsilon,
        })
    }

    /// Whether every step picked a relabelling of the exact decoder.
    pub fn recovered_decoder(&self) -> bool {
        self.rep
            .steps
            .iter()
            .all(|s| s.phi_index < PERMUTATIONS_3.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfflineCellResult {
    pub prt: Evaluation,
    pub lcb: Evaluation,
    pub lsvi: Evaluation,
}

pub fn run_offline_cell(
    stage: &SourceStage,
    settings: &ComblockSettings,
    n: usize,
    seed: u64,
) -> Result<OfflineCellResult> {
    let target = target_dataset(&stage.family, settings, n, seed)?;
    let env: &ComblockTask = &stage.family.target;
    let eval_seed = derived_seed(seed, EVAL_STREAM);
    let prt_ctx = PlanContext::learned(
        env,
        &stage.classes.phi,
        &stage.rep,
        EpsilonFn::Model(&stage.epsilon),
    )?;
    let prt = prt_plan(&prt_ctx, &target, &settings.planner)?;
    let base_ctx = PlanContext::learned(
        env,
        &stage.classes.phi,
        &stage.rep,
        EpsilonFn::Constant(0.0),
    )?;
    let lcb = lsvi_lcb_plan(&base_ctx, &target, &settings.planner)?;
    let lsvi = lsvi_plan(&base_ctx, &target, &settings.planner)?;
    Ok(OfflineCellResult {
        prt: evaluate_policy(env, &prt, &prt_ctx, settings.eval_episodes, eval_seed)?,
        lcb: evaluate_policy(env, &lcb, &base_ctx, settings.eval_episodes, eval_seed)?,
        lsvi: evaluate_policy(env, &lsvi, &base_ctx, settings.eval_episodes, eval_seed)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UcbCellResult {
    pub evaluation: Evaluation,
    pub episodes_used: usize,
    pub converged: bool,
    pub trailing_mean: f64,
}

/// Online UCB on the target with a fixed representation `map`.
pub fn run_ucb(
    family: &TaskFamily,
    map: &FeatureMap,
    settings: &ComblockSettings,
    options: &UcbOptions,
    seed: u64,
) -> Result<UcbCellResult> {
    let env: &ComblockTask = &family.target;
    let class = std::slice::from_ref(map);
    let ctx = PlanContext::new(env, class, vec![0; env.horizon()], EpsilonFn::Constant(0.0))?;
    let out = lsvi_ucb_online(
        &ctx,
        &settings.planner,
        options,
        derived_seed(seed, UCB_STREAM),
    )?;
    let evaluation = evaluate_policy(
        env,
        &out.policy,
        &ctx,
        settings.eval_episodes,
        derived_seed(seed, EVAL_STREAM),
    )?;
    Ok(UcbCellResult {
        evaluation,
        episodes_used: out.episodes_used,
        converged: out.converged,
        trailing_mean: out.trailing_mean,
    })
}

/// The exact decoder with identity labels.
pub fn true_feature(family: &TaskFamily) -> FeatureMap {
    FeatureMap::Latent {
        name: "decoder-perm-012".into(),
        scores: crate::representation::true_decoder_scores(family),
        label_map: [0, 1, 2],
        num_actions: NUM_ACTIONS,
    }
}

/// The corrupted representation handed to the UCB sensitivity run.
pub fn corrupted_feature(family: &TaskFamily) -> FeatureMap {
    collapsed_comblock_feature(family)
}

/// Setting of the tabular seed sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularSweepSettings {
    pub family: TabularFamilySpec,
    pub n_source: usize,
    pub n_target: usize,
    pub num_decoys: usize,
    pub planner: PlannerConfig,
}

impl Default for TabularSweepSettings {
    fn default() -> Self {
        Self {
            family: TabularFamilySpec::default(),
            n_source: 500,
            n_target: 200,
            num_decoys: 4,
            planner: PlannerConfig {
                delta: 0.1,
                ..PlannerConfig::default()
            },
        }
    }
}

/// Everything one tabular seed contributes to the coverage checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSeedReport {
    pub seed: u64,
    /// Average source error per step.
    pub average_errors: Vec<f64>,
    pub average_error_bound: f64,
    /// `(squared TV of the best-linear target model, ε²)` per `(h, s, a)`.
    pub target_errors: Vec<(f64, f64)>,
    /// Per `(h, source, s, a)`: whether the source's squared TV stays below
    /// the bias/variance bound at every breakpoint radius.
    pub local_errors_bounded: Vec<bool>,
    /// `V̂₁` and the exact value of the greedy policy, both under the initial law.
    pub pessimistic_value: f64,
    pub true_value: f64,
}

impl TabularSeedReport {
    pub fn average_error_holds(&self) -> bool {
        self.average_errors
            .iter()
            .all(|&e| e <= self.average_error_bound)
    }

    pub fn target_error_covered(&self) -> usize {
        self.target_errors
            .iter()
            .filter(|(tv2, eps2)| tv2 <= eps2)
            .count()
    }

    pub fn local_error_covered(&self) -> usize {
        self.local_errors_bounded.iter().filter(|&&ok| ok).count()
    }

    pub fn pessimism_holds(&self) -> bool {
        self.pessimistic_value <= self.true_value + 1e-9
    }
}

pub fn tabular_sources(family: &TabularFamily, n: usize, seed: u64) -> Vec<OfflineDataset> {
    let t = &family.target;
    let policy = LatentTablePolicy::uniform(t.horizon, t.num_states, t.num_actions);
    family
        .sources
        .iter()
        .enumerate()
        .map(|(i, src)| {
            collect(
                src,
                &policy,
                n,
                derived_seed(seed, SOURCE_STREAM + i as u64),
                i,
            )
        })
        .collect()
}

pub fn tabular_target(family: &TabularFamily, n: usize, seed: u64) -> OfflineDataset {
    let t = &family.target;
    let policy = LatentTablePolicy::uniform(t.horizon, t.num_states, t.num_actions);
    collect(
        t,
        &policy,
        n,
        derived_seed(seed, TARGET_STREAM),
        family.num_sources(),
    )
}

pub fn tabular_seed_report(
    settings: &TabularSweepSettings,
    seed: u64,
) -> Result<TabularSeedReport> {
    let delta = settings.planner.delta;
    let family = generate_tabular_family(settings.family, seed)?;
    let classes = build_tabular_hypothesis_class(&family, settings.num_decoys, seed)?;
    let sources = tabular_sources(&family, settings.n_source, seed);
    let rep = learn_representation(&sources, &classes)?;

    let per_source = rep
        .steps
        .iter()
        .map(|step| source_mle_errors(step, &classes, &family, &sources))
        .collect::<Result<Vec<_>>>()?;
    let average_errors = per_source.iter().map(|e| e.iter().sum()).collect();
    let bound = average_error_bound(
        rep.log_phi,
        rep.log_upsilon,
        rep.num_sources,
        rep.n_source,
        delta,
    );

    let target = &family.target;
    let epsilon = EpsilonModel::new(&sources, &classes, family.alpha_max()?, delta)?;
    let alpha = span_coefficients(target, &family.sources)?;
    let mut target_errors = Vec::new();
    for step in &rep.steps {
        let h = step.step;
        let phi = &classes.phi[step.phi_index];
        for s in 0..target.num_states {
            let obs = one_hot(s, target.num_states);
            for a in 0..target.num_actions {
                let label = phi.label_of_state(s, a, h);
                let mixed: Vec<f64> = (0..target.num_states)
                    .map(|sp| {
                        step.tables
                            .iter()
                            .zip(&alpha[h - 1][sp])
                            .map(|(table, w)| w * table.rows[label][sp])
                            .sum()
                    })
                    .collect();
                let tv = tv_distance(&mixed, &target.transition(s, a, h));
                let eps = epsilon.epsilon(&obs, a, h)?;
                target_errors.push((tv * tv, eps * eps));
            }
        }
    }

    let mut local_errors_bounded = Vec::new();
    for (step, errors) in rep.steps.iter().zip(&per_source) {
        let h = step.step;
        let phi = &classes.phi[step.phi_index];
        let index = StepIndex::build(&sources, &classes.phi, h)?;
        for (i, src) in family.sources.iter().enumerate() {
            for s in 0..src.num_states {
                let obs = one_hot(s, src.num_states);
                for a in 0..src.num_actions {
                    let labels = epsilon.labels(&obs, a, h);
                    let est = &step.tables[i].rows[phi.label_of_state(s, a, h)];
                    let tv = tv_distance(est, &src.transition(s, a, h));
                    let ok =
                        index
                            .profile(i, &labels)
                            .breakpoints()
                            .iter()
                            .all(|&(nu, density)| {
                                tv * tv <= local_error_rhs(errors[i], density, nu, rep.dim) + 1e-12
                            });
                    local_errors_bounded.push(ok);
                }
            }
        }
    }

    let data = tabular_target(&family, settings.n_target, seed);
    let ctx = PlanContext::learned(target, &classes.phi, &rep, EpsilonFn::Model(&epsilon))?;
    let policy = prt_plan(&ctx, &data, &settings.planner)?;
    let estimated = policy.tabular_values(&ctx, target.num_states)?;
    let exact = target.policy_values(&policy.tabular_policy(&ctx, target.num_states)?);

    Ok(TabularSeedReport {
        seed,
        average_errors,
        average_error_bound: bound,
        target_errors,
        local_errors_bounded,
        pessimistic_value: target.initial_value(&estimated),
        true_value: target.initial_value(&exact),
    })
}

/// Reports for every seed, computed in parallel and returned in seed order.
pub fn tabular_sweep(
    settings: &TabularSweepSettings,
    seeds: &[u64],
) -> Result<Vec<TabularSeedReport>> {
    use rayon::prelude::*;
    seeds
        .par_iter()
        .map(|&seed| tabular_seed_report(settings, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tabular_report_is_reproducible() {
        let settings = TabularSweepSettings::default();
        let a = tabular_seed_report(&settings, 7).unwrap();
        let b = tabular_seed_report(&settings, 7).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.average_errors.len(), 3);
        assert_eq!(a.target_errors.len(), 3 * 5 * 3);
    }

    #[test]
    fn sweep_keeps_seed_order() {
        let settings = TabularSweepSettings::default();
        let seeds = [5, 1, 3];
        let reports = tabular_sweep(&settings, &seeds).unwrap();
        assert_eq!(reports.iter().map(|r| r.seed).collect::<Vec<_>>(), seeds);
    }

    #[test]
    fn small_tabular_sweep_covers() {
        let settings = TabularSweepSettings::default();
        let reports = tabular_sweep(&settings, &(0..10).collect::<Vec<_>>()).unwrap();
        for r in &reports {
            assert!(r.average_error_holds(), "seed {}", r.seed);
            assert!(r.pessimism_holds(), "seed {}", r.seed);
        }
    }

    #[test]
    fn comblock_cell_recovers_decoder() {
        let settings = ComblockSettings::default();
        let stage = SourceStage::build(&settings, 500, 0).unwrap();
        assert!(stage.recovered_decoder());
        let cell = run_offline_cell(&stage, &settings, 150, 0).unwrap();
        assert!(cell.prt.mean >= 0.95);
    }

    #[test]
    fn derived_seeds_separate_streams() {
        assert_ne!(
            derived_seed(1, SOURCE_STREAM),
            derived_seed(1, TARGET_STREAM)
        );
        assert_ne!(
            derived_seed(1, SOURCE_STREAM),
            derived_seed(2, SOURCE_STREAM)
        );
    }
}
