//! Joint maximum-likelihood representation learning over finite classes.
//!
//! Every feature map in this crate is a one-hot over a finite label set: a
//! decoder assigns each `(observation, action)` a label, and the
//! next-state side of a hypothesis is a table `P(next token | label)`. For
//! comblock the next token is the decoded (relabelled) latent, for tabular
//! families it is the next state itself. The emission density is shared by
//! all hypotheses and drops out of the likelihood comparison.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{OfflineDataset, TransitionRecord};
use crate::envs::comblock::{argmax, NUM_ACTIONS, NUM_LATENTS};
use crate::envs::tabular::{tv_distance, TabularFamily};
use crate::envs::{seeded_rng, TaskFamily};
use crate::error::{contract, Error, Result};
use crate::numerics::{dot, Matrix};

/// Relative tolerance under which two log-likelihoods count as tied.
const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    /// `φ(o, a) = e_{σ(argmax(W o))·A + a}` where `W` holds one score row per latent.
    Latent {
        name: String,
        scores: Matrix,
        label_map: [usize; NUM_LATENTS],
        num_actions: usize,
    },
    /// Observations are one-hot states; `φ_h(s, a) = e_{assignment[h-1][s·A + a]}`.
    Cluster {
        name: String,
        assignment: Vec<Vec<usize>>,
        num_states: usize,
        num_actions: usize,
        dim: usize,
    },
}

impl FeatureMap {
    pub fn name(&self) -> &str {
        match self {
            FeatureMap::Latent { name, .. } | FeatureMap::Cluster { name, .. } => name,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureMap::Latent { num_actions, .. } => NUM_LATENTS * num_actions,
            FeatureMap::Cluster { dim, .. } => *dim,
        }
    }

    pub fn num_actions(&self) -> usize {
        match self {
            FeatureMap::Latent { num_actions, .. } | FeatureMap::Cluster { num_actions, .. } => {
                *num_actions
            }
        }
    }

    /// Number of distinct next-state tokens.
    pub fn num_tokens(&self) -> usize {
        match self {
            FeatureMap::Latent { .. } => NUM_LATENTS,
            FeatureMap::Cluster { num_states, .. } => *num_states,
        }
    }

    /// The observation's decoded state before any relabelling.
    pub fn decode(&self, obs: &[f64]) -> usize {
        match self {
            FeatureMap::Latent { scores, .. } => {
                let s: Vec<f64> = (0..scores.rows())
                    .map(|i| dot(scores.row(i), obs))
                    .collect();
                argmax(&s)
            }
            FeatureMap::Cluster { .. } => argmax(obs),
        }
    }

    /// Index of the active one-hot coordinate for a decoded state.
    pub fn label_of_state(&self, state: usize, action: usize, h: usize) -> usize {
        match self {
            FeatureMap::Latent {
                label_map,
                num_actions,
                ..
            } => label_map[state] * num_actions + action,
            FeatureMap::Cluster {
                assignment,
                num_actions,
                ..
            } => assignment[h - 1][state * num_actions + action],
        }
    }

    pub fn label(&self, obs: &[f64], action: usize, h: usize) -> usize {
        self.label_of_state(self.decode(obs), action, h)
    }

    pub fn features(&self, obs: &[f64], action: usize, h: usize) -> Vec<f64> {
        one_hot(self.label(obs, action, h), self.dim())
    }

    pub fn token_of_state(&self, state: usize) -> usize {
        match self {
            FeatureMap::Latent { label_map, .. } => label_map[state],
            FeatureMap::Cluster { .. } => state,
        }
    }

    pub fn next_token(&self, next_obs: &[f64]) -> usize {
        self.token_of_state(self.decode(next_obs))
    }
}

pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// `P(next token | feature label)`; one row per label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionTable {
    pub rows: Vec<Vec<f64>>,
}

impl TransitionTable {
    pub fn prob(&self, label: usize, token: usize) -> f64 {
        self.rows[label][token]
    }

    pub fn log_likelihood(&self, phi: &FeatureMap, slice: &[&TransitionRecord]) -> f64 {
        slice
            .iter()
            .map(|r| {
                self.prob(phi.label(&r.obs, r.a, r.h), phi.next_token(&r.next_obs))
                    .ln()
            })
            .sum()
    }
}

/// How `log|Υ|` is declared for the uncertainty formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum LogUpsilon {
    /// `d · ln(N_S + 1)`.
    CountingSurrogate,
    Declared(f64),
}

impl LogUpsilon {
    pub fn value(&self, dim: usize, n_source: usize) -> f64 {
        match *self {
            LogUpsilon::CountingSurrogate => dim as f64 * ((n_source + 1) as f64).ln(),
            LogUpsilon::Declared(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisClasses {
    pub phi: Vec<FeatureMap>,
    /// Explicit next-state class. `None` means the inner maximisation uses the
    /// closed-form tabular MLE for every candidate feature map.
    pub upsilon: Option<Vec<TransitionTable>>,
    pub log_upsilon: LogUpsilon,
}

impl HypothesisClasses {
    pub fn dim(&self) -> usize {
        self.phi[0].dim()
    }

    pub fn log_phi(&self) -> f64 {
        (self.phi.len() as f64).ln()
    }

    pub fn log_upsilon(&self, n_source: usize) -> f64 {
        self.log_upsilon.value(self.dim(), n_source)
    }

    fn validate(&self) -> Result<()> {
        if self.phi.is_empty() {
            return Err(contract("feature class Φ is empty"));
        }
        let d = self.dim();
        if self.phi.iter().any(|p| p.dim() != d) {
            return Err(contract("feature maps in Φ disagree on dimension"));
        }
        if let Some(ups) = &self.upsilon {
            if ups.is_empty() {
                return Err(contract("explicit Υ is empty"));
            }
            if ups.iter().any(|t| t.rows.len() != d) {
                return Err(contract("Υ table row count differs from feature dimension"));
            }
        }
        Ok(())
    }
}

/// Empirical `P(token | label)` from one step's records; unvisited labels get
/// the uniform row.
pub fn mle_tabular_closed_form(slice: &[&TransitionRecord], phi: &FeatureMap) -> TransitionTable {
    closed_form_table(label_token_counts(slice, phi), phi.num_tokens())
}

fn label_token_counts(slice: &[&TransitionRecord], phi: &FeatureMap) -> Vec<Vec<usize>> {
    let tokens: Vec<usize> = slice.iter().map(|r| phi.next_token(&r.next_obs)).collect();
    shared_token_counts(slice, &tokens, phi.num_tokens(), phi)
}

fn shared_token_counts(
    slice: &[&TransitionRecord],
    tokens: &[usize],
    num_tokens: usize,
    phi: &FeatureMap,
) -> Vec<Vec<usize>> {
    let mut counts = vec![vec![0usize; num_tokens]; phi.dim()];
    for (r, &t) in slice.iter().zip(tokens) {
        counts[phi.label(&r.obs, r.a, r.h)][t] += 1;
    }
    counts
}

fn closed_form_table(counts: Vec<Vec<usize>>, num_tokens: usize) -> TransitionTable {
    TransitionTable {
        rows: counts
            .into_iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                if total == 0 {
                    vec![1.0 / num_tokens as f64; num_tokens]
                } else {
                    row.into_iter().map(|c| c as f64 / total as f64).collect()
                }
            })
            .collect(),
    }
}

/// Next-state tokens every candidate is scored on, so that likelihoods are
/// comparable across `Φ`: the joint decoding of the next observation under
/// all maps, interned in sorted order. For tabular classes this is just the
/// next state.
fn shared_next_tokens(
    phi: &[FeatureMap],
    slices: &[Vec<&TransitionRecord>],
) -> (Vec<Vec<usize>>, usize) {
    if let Some(FeatureMap::Cluster { num_states, .. }) = phi.first() {
        if phi.iter().all(|m| matches!(m, FeatureMap::Cluster { .. })) {
            let tokens = slices
                .iter()
                .map(|s| s.iter().map(|r| phi[0].decode(&r.next_obs)).collect())
                .collect();
            return (tokens, *num_states);
        }
    }
    let joint: Vec<Vec<Vec<usize>>> = slices
        .iter()
        .map(|s| {
            s.iter()
                .map(|r| phi.iter().map(|m| m.decode(&r.next_obs)).collect())
                .collect()
        })
        .collect();
    let dictionary: std::collections::BTreeSet<&Vec<usize>> = joint.iter().flatten().collect();
    let index: std::collections::BTreeMap<&Vec<usize>, usize> = dictionary
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t, i))
        .collect();
    let tokens = joint
        .iter()
        .map(|s| s.iter().map(|t| index[t]).collect())
        .collect();
    (tokens, index.len())
}

/// Maximised log-likelihood `Σ c·ln(c / n_label)` of the closed-form table.
fn closed_form_log_likelihood(counts: &[Vec<usize>]) -> f64 {
    counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .filter(|&&c| c > 0)
                .map(|&c| c as f64 * (c as f64 / total as f64).ln())
                .sum::<f64>()
        })
        .sum()
}

/// The chosen hypothesis at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRep {
    pub step: usize,
    pub phi_index: usize,
    /// Per-source next-state tables `μ̂_{i;h}`.
    pub tables: Vec<TransitionTable>,
    /// Index into the explicit Υ per source, when one was given.
    pub upsilon_index: Option<Vec<usize>>,
    pub log_likelihood: f64,
    /// Objective value of every candidate in Φ, for audit.
    pub candidate_scores: Vec<f64>,
}

struct Candidate {
    score: f64,
    tables: Vec<TransitionTable>,
    upsilon_index: Option<Vec<usize>>,
}

fn score_candidate(
    phi: &FeatureMap,
    slices: &[Vec<&TransitionRecord>],
    shared: &(Vec<Vec<usize>>, usize),
    upsilon: Option<&[TransitionTable]>,
) -> Candidate {
    let mut score = 0.0;
    let mut tables = Vec::with_capacity(slices.len());
    let mut picks = Vec::new();
    for (slice, tokens) in slices.iter().zip(&shared.0) {
        match upsilon {
            None => {
                let counts = shared_token_counts(slice, tokens, shared.1, phi);
                score += closed_form_log_likelihood(&counts);
                tables.push(closed_form_table(counts, shared.1));
            }
            Some(ups) => {
                let (best, ll) = ups
                    .iter()
                    .map(|t| t.log_likelihood(phi, slice))
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (j, ll)| {
                        if ll > acc.1 {
                            (j, ll)
                        } else {
                            acc
                        }
                    });
                score += ll;
                picks.push(best);
                tables.push(ups[best].clone());
            }
        }
    }
    Candidate {
        score,
        tables,
        upsilon_index: upsilon.map(|_| picks),
    }
}

/// Exhaustive joint MLE at step `h`: every `φ ∈ Φ` is scored by the sum over
/// sources of the best per-source likelihood; ties go to the lowest index.
pub fn mle_joint(
    sources: &[OfflineDataset],
    classes: &HypothesisClasses,
    h: usize,
) -> Result<StepRep> {
    classes.validate()?;
    if sources.is_empty() {
        return Err(contract("no source datasets"));
    }
    let n = sources[0].len();
    for (i, ds) in sources.iter().enumerate() {
        if ds.is_empty() {
            return Err(Error::EmptyDataset { task: i, step: h });
        }
        if ds.len() != n {
            return Err(contract("source datasets must share N_S"));
        }
    }
    let slices: Vec<Vec<&TransitionRecord>> = sources.iter().map(|ds| ds.slice(h)).collect();
    let upsilon = classes.upsilon.as_deref();
    let shared = shared_next_tokens(&classes.phi, &slices);
    let candidates: Vec<Candidate> = classes
        .phi
        .par_iter()
        .map(|phi| score_candidate(phi, &slices, &shared, upsilon))
        .collect();
    // full scan after parallel scoring keeps the tie-break order-independent
    let mut best: Option<usize> = None;
    for (j, c) in candidates.iter().enumerate() {
        if c.score == f64::NEG_INFINITY || c.score.is_nan() {
            continue;
        }
        match best {
            None => best = Some(j),
            Some(b) => {
                let incumbent = candidates[b].score;
                if c.score > incumbent + TIE_TOLERANCE * incumbent.abs().max(1.0) {
                    best = Some(j);
                }
            }
        }
    }
    let best = best.ok_or(Error::DegenerateClass { step: h })?;
    let candidate_scores = candidates.iter().map(|c| c.score).collect();
    let chosen = candidates.into_iter().nth(best).expect("index in range");
    Ok(StepRep {
        step: h,
        phi_index: best,
        tables: chosen.tables,
        upsilon_index: chosen.upsilon_index,
        log_likelihood: chosen.score,
        candidate_scores,
    })
}

/// Learned representation for every step plus the declared class sizes the
/// uncertainty formulas need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedRep {
    pub steps: Vec<StepRep>,
    pub num_phi: usize,
    pub log_phi: f64,
    pub log_upsilon: f64,
    pub dim: usize,
    pub n_source: usize,
    pub num_sources: usize,
}

impl LearnedRep {
    pub fn phi_index(&self, h: usize) -> usize {
        self.steps[h - 1].phi_index
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Wraps hand-picked feature indices (e.g. the ground truth) as a
    /// representation without fitting anything.
    pub fn fixed(
        classes: &HypothesisClasses,
        phi_index: usize,
        horizon: usize,
        n_source: usize,
        num_sources: usize,
    ) -> Self {
        LearnedRep {
            steps: (1..=horizon)
                .map(|h| StepRep {
                    step: h,
                    phi_index,
                    tables: Vec::new(),
                    upsilon_index: None,
                    log_likelihood: 0.0,
                    candidate_scores: Vec::new(),
                })
                .collect(),
            num_phi: classes.phi.len(),
            log_phi: classes.log_phi(),
            log_upsilon: classes.log_upsilon(n_source),
            dim: classes.dim(),
            n_source,
            num_sources,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn learn_representation(
    sources: &[OfflineDataset],
    classes: &HypothesisClasses,
) -> Result<LearnedRep> {
    if sources.is_empty() {
        return Err(contract("no source datasets"));
    }
    let horizon = sources[0].horizon();
    let steps = (1..=horizon)
        .map(|h| mle_joint(sources, classes, h))
        .collect::<Result<Vec<_>>>()?;
    let n_source = sources[0].len();
    Ok(LearnedRep {
        steps,
        num_phi: classes.phi.len(),
        log_phi: classes.log_phi(),
        log_upsilon: classes.log_upsilon(n_source),
        dim: classes.dim(),
        n_source,
        num_sources: sources.len(),
    })
}

/// `Σ_i (1/N_S) Σ_τ ‖P̂_i(·|s,a) − P*_i(·|s,a)‖²_TV` at the dataset points of
/// step `h`, for tabular families where the truth is known exactly.
pub fn average_mle_error(
    step: &StepRep,
    classes: &HypothesisClasses,
    family: &TabularFamily,
    sources: &[OfflineDataset],
) -> Result<f64> {
    Ok(source_mle_errors(step, classes, family, sources)?
        .iter()
        .sum())
}

/// The per-source terms of [`average_mle_error`].
pub fn source_mle_errors(
    step: &StepRep,
    classes: &HypothesisClasses,
    family: &TabularFamily,
    sources: &[OfflineDataset],
) -> Result<Vec<f64>> {
    let phi = &classes.phi[step.phi_index];
    if !matches!(phi, FeatureMap::Cluster { .. }) {
        return Err(contract("average_mle_error needs a tabular feature map"));
    }
    let h = step.step;
    Ok(sources
        .iter()
        .enumerate()
        .map(|(i, ds)| {
            let truth = &family.sources[i];
            let slice = ds.slice(h);
            let n = slice.len().max(1) as f64;
            let err: f64 = slice
                .iter()
                .map(|r| {
                    let s = r.z.unwrap_or_else(|| argmax(&r.obs));
                    let est = &step.tables[i].rows[phi.label_of_state(s, r.a, h)];
                    tv_distance(est, &truth.transition(s, r.a, h)).powi(2)
                })
                .sum();
            err / n
        })
        .collect())
}

/// Right-hand side of the average-error bound: `2(log(|Φ|/δ) + K log|Υ|)/N_S`.
pub fn average_error_bound(
    log_phi: f64,
    log_upsilon: f64,
    num_sources: usize,
    n_source: usize,
    delta: f64,
) -> f64 {
    2.0 * (log_phi - delta.ln() + num_sources as f64 * log_upsilon) / n_source as f64
}

/// The six relabellings of three latent labels, identity first.
pub const PERMUTATIONS_3: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Score rows of the exact decoder: the first three rows of the inverse
/// (= transpose = itself) Hadamard rotation.
pub fn true_decoder_scores(family: &TaskFamily) -> Matrix {
    let t = family.target.transform();
    Matrix::from_rows(
        &(0..NUM_LATENTS)
            .map(|i| t.row(i).to_vec())
            .collect::<Vec<_>>(),
    )
    .expect("nonempty rows")
}

/// `Φ` = the exact decoder under each label permutation, followed by
/// `num_decoys` random-projection decoders. Next-state tables are fitted in
/// closed form; `log|Υ|` uses the counting surrogate.
pub fn build_comblock_hypothesis_class(
    family: &TaskFamily,
    num_decoys: usize,
    seed: u64,
) -> HypothesisClasses {
    let scores = true_decoder_scores(family);
    let mut phi: Vec<FeatureMap> = PERMUTATIONS_3
        .iter()
        .map(|&label_map| FeatureMap::Latent {
            name: format!(
                "decoder-perm-{}{}{}",
                label_map[0], label_map[1], label_map[2]
            ),
            scores: scores.clone(),
            label_map,
            num_actions: NUM_ACTIONS,
        })
        .collect();
    let mut rng = seeded_rng(seed, 0xdec0);
    let obs_dim = family.obs_dim();
    for j in 0..num_decoys {
        let rows: Vec<Vec<f64>> = (0..NUM_LATENTS)
            .map(|_| {
                (0..obs_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        phi.push(FeatureMap::Latent {
            name: format!("decoy-{j}"),
            scores: Matrix::from_rows(&rows).expect("finite"),
            label_map: [0, 1, 2],
            num_actions: NUM_ACTIONS,
        });
    }
    HypothesisClasses {
        phi,
        upsilon: None,
        log_upsilon: LogUpsilon::CountingSurrogate,
    }
}

/// Decoder that merges the two good latents into one label. Linear value
/// functions over it cannot tell `z0` from `z1`.
pub fn collapsed_comblock_feature(family: &TaskFamily) -> FeatureMap {
    FeatureMap::Latent {
        name: "decoder-collapsed-002".into(),
        scores: true_decoder_scores(family),
        label_map: [0, 0, 2],
        num_actions: NUM_ACTIONS,
    }
}

/// `Φ` for tabular families: the true cluster assignment under every label
/// permutation (realizable), then `num_decoys` uniformly random assignments.
pub fn build_tabular_hypothesis_class(
    family: &TabularFamily,
    num_decoys: usize,
    seed: u64,
) -> Result<HypothesisClasses> {
    let t = &family.target;
    if t.dim != 3 {
        return Err(contract("tabular hypothesis class is built for d = 3"));
    }
    let mut phi: Vec<FeatureMap> = PERMUTATIONS_3
        .iter()
        .map(|perm| FeatureMap::Cluster {
            name: format!("assignment-perm-{}{}{}", perm[0], perm[1], perm[2]),
            assignment: family
                .assignment
                .iter()
                .map(|row| row.iter().map(|&c| perm[c]).collect())
                .collect(),
            num_states: t.num_states,
            num_actions: t.num_actions,
            dim: t.dim,
        })
        .collect();
    let mut rng = seeded_rng(seed, 0xdec0);
    for j in 0..num_decoys {
        phi.push(FeatureMap::Cluster {
            name: format!("decoy-{j}"),
            assignment: family
                .assignment
                .iter()
                .map(|row| row.iter().map(|_| rng.random_range(0..t.dim)).collect())
                .collect(),
            num_states: t.num_states,
            num_actions: t.num_actions,
            dim: t.dim,
        });
    }
    Ok(HypothesisClasses {
        phi,
        upsilon: None,
        log_upsilon: LogUpsilon::CountingSurrogate,
    })
}

/// The true per-source next-state tables of a tabular family at step `h`,
/// in the label space of the unpermuted assignment.
pub fn true_tabular_tables(family: &TabularFamily, h: usize) -> Vec<TransitionTable> {
    family
        .sources
        .iter()
        .map(|src| TransitionTable {
            rows: (0..src.dim)
                .map(|c| (0..src.num_states).map(|sp| src.mu[h - 1][sp][c]).collect())
                .collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{collect, exploratory_policy, LatentTablePolicy};
    use crate::envs::comblock::generate_comblock_family_with_noise;
    use crate::envs::{generate_comblock_family, generate_tabular_family, TabularFamilySpec};

    fn tabular_sources(fam: &TabularFamily, n: usize, seed: u64) -> Vec<OfflineDataset> {
        let t = &fam.target;
        let pol = LatentTablePolicy::uniform(t.horizon, t.num_states, t.num_actions);
        fam.sources
            .iter()
            .enumerate()
            .map(|(i, src)| collect(src, &pol, n, seed + i as u64 * 7919, i))
            .collect()
    }

    fn comblock_sources(fam: &TaskFamily, n: usize, seed: u64) -> Vec<OfflineDataset> {
        fam.sources
            .iter()
            .enumerate()
            .map(|(i, t)| {
                collect(
                    t,
                    &exploratory_policy(t, 0.5).unwrap(),
                    n,
                    seed + i as u64,
                    i,
                )
            })
            .collect()
    }

    #[test]
    fn closed_form_examples() {
        let fam = generate_comblock_family_with_noise(2, 1, 0, 0.0).unwrap();
        let t = &fam.sources[0];
        let classes = build_comblock_hypothesis_class(&fam, 0, 0);
        let phi = &classes.phi[0];
        let rec = |z: usize, a: usize, zn: usize| TransitionRecord {
            h: 1,
            obs: t.noiseless_observation(z, 1),
            a,
            next_obs: t.noiseless_observation(zn, 2),
            r: 0.0,
            z: None,
            z_next: None,
        };
        let records = [rec(0, 1, 0), rec(0, 1, 0), rec(0, 1, 0), rec(0, 1, 1)];
        let slice: Vec<&TransitionRecord> = records.iter().collect();
        let table = mle_tabular_closed_form(&slice, phi);
        assert_eq!(table.rows[1], vec![0.75, 0.25, 0.0]);
        // (z2, a3) never visited
        assert_eq!(table.rows[2 * 5 + 3], vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn decoys_lose_to_exact_decoder() {
        let fam = generate_comblock_family(5, 5, 3).unwrap();
        let classes = build_comblock_hypothesis_class(&fam, 4, 3);
        let sources = comblock_sources(&fam, 500, 3);
        let rep = learn_representation(&sources, &classes).unwrap();
        for step in &rep.steps {
            assert!(
                step.phi_index < PERMUTATIONS_3.len(),
                "step {} picked {}",
                step.step,
                step.phi_index
            );
        }
    }

    #[test]
    fn closed_form_concentrates_on_true_kernel() {
        let fam = generate_tabular_family(TabularFamilySpec::default(), 4).unwrap();
        let classes = build_tabular_hypothesis_class(&fam, 0, 0).unwrap();
        let ds = tabular_sources(&fam, 10_000, 1);
        let truth = true_tabular_tables(&fam, 1);
        for (i, d) in ds.iter().enumerate() {
            let table = mle_tabular_closed_form(&d.slice(1), &classes.phi[0]);
            for c in 0..3 {
                let l1: f64 = table.rows[c]
                    .iter()
                    .zip(&truth[i].rows[c])
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(l1 < 0.05, "task {i} cluster {c}: {l1}");
            }
        }
    }

    #[test]
    fn singleton_class_returns_itself() {
        let fam = generate_tabular_family(TabularFamilySpec::default(), 2).unwrap();
        let mut classes = build_tabular_hypothesis_class(&fam, 0, 0).unwrap();
        classes.phi.truncate(1);
        classes.upsilon = Some(true_tabular_tables(&fam, 1));
        let ds = tabular_sources(&fam, 50, 3);
        let rep = mle_joint(&ds, &classes, 1).unwrap();
        assert_eq!(rep.phi_index, 0);
        assert_eq!(rep.upsilon_index, Some(vec![0, 1, 2]));
    }

    #[test]
    fn true_assignment_beats_permuted_under_true_tables() {
        let fam = generate_tabular_family(TabularFamilySpec::default(), 8).unwrap();
        let mut classes = build_tabular_hypothesis_class(&fam, 0, 0).unwrap();
        // put the permuted hypothesis first so a tie would pick it
        classes.phi.swap(0, 1);
        classes.phi.truncate(2);
        classes.upsilon = Some(true_tabular_tables(&fam, 1));
        let ds = tabular_sources(&fam, 500, 11);
        let rep = mle_joint(&ds, &classes, 1).unwrap();
        assert_eq!(classes.phi[rep.phi_index].name(), "assignment-perm-012");
        assert!(rep.candidate_scores[1] > rep.candidate_scores[0]);
    }

    #[test]
    fn permutation_tie_returns_lowest_index() {
        let fam = generate_comblock_family(3, 2, 1).unwrap();
        let classes = build_comblock_hypothesis_class(&fam, 0, 0);
        let ds = comblock_sources(&fam, 200, 5);
        for h in 1..=3 {
            let rep = mle_joint(&ds, &classes, h).unwrap();
            assert_eq!(rep.phi_index, 0);
        }
    }

    #[test]
    fn all_zero_likelihood_is_degenerate() {
        let fam = generate_tabular_family(TabularFamilySpec::default(), 2).unwrap();
        let mut classes = build_tabular_hypothesis_class(&fam, 0, 0).unwrap();
        let t = &fam.target;
        // a table putting all mass on a state that the data will contradict
        let mut rows = vec![vec![0.0; t.num_states]; 3];
        for r in rows.iter_mut() {
            r[0] = 1.0;
        }
        classes.upsilon = Some(vec![TransitionTable { rows }]);
        let ds = tabular_sources(&fam, 200, 3);
        assert!(matches!(
            mle_joint(&ds, &classes, 1),
            Err(Error::DegenerateClass { step: 1 })
        ));
    }

    #[test]
    fn returned_hypothesis_is_the_maximiser() {
        for seed in 0..5 {
            let fam = generate_tabular_family(TabularFamilySpec::default(), seed).unwrap();
            let classes = build_tabular_hypothesis_class(&fam, 20, seed).unwrap();
            let ds = tabular_sources(&fam, 100, seed * 31);
            let slices: Vec<Vec<&TransitionRecord>> = ds.iter().map(|d| d.slice(2)).collect();
            let rep = mle_joint(&ds, &classes, 2).unwrap();
            // brute-force objective: per-source closed-form tables evaluated explicitly
            for phi in &classes.phi {
                let value: f64 = slices
                    .iter()
                    .map(|s| mle_tabular_closed_form(s, phi).log_likelihood(phi, s))
                    .sum();
                assert!(rep.log_likelihood >= value - 1e-9);
            }
        }
    }

    #[test]
    fn closed_form_matches_enumerated_upsilon() {
        for seed in 0..5 {
            let fam = generate_tabular_family(TabularFamilySpec::default(), seed).unwrap();
            let classes = build_tabular_hypothesis_class(&fam, 6, seed).unwrap();
            let ds = tabular_sources(&fam, 60, seed + 100);
            let slices: Vec<Vec<&TransitionRecord>> = ds.iter().map(|d| d.slice(1)).collect();
            let enumerated: Vec<TransitionTable> = classes
                .phi
                .iter()
                .flat_map(|phi| slices.iter().map(move |s| mle_tabular_closed_form(s, phi)))
                .collect();
            let explicit = HypothesisClasses {
                upsilon: Some(enumerated),
                ..classes.clone()
            };
            let a = mle_joint(&ds, &classes, 1).unwrap();
            let b = mle_joint(&ds, &explicit, 1).unwrap();
            assert_eq!(a.phi_index, b.phi_index);
            assert!((a.log_likelihood - b.log_likelihood).abs() < 1e-8);
        }
    }

    #[test]
    fn realizable_selection_recovers_truth() {
        let mut hits = 0;
        for seed in 0..20 {
            let fam = generate_tabular_family(TabularFamilySpec::default(), 1000 + seed).unwrap();
            let classes = build_tabular_hypothesis_class(&fam, 10, seed).unwrap();
            let ds = tabular_sources(&fam, 2000, seed);
            let rep = mle_joint(&ds, &classes, 1).unwrap();
            // label permutations are likelihood-equivalent; index 0 is the identity
            hits += (rep.phi_index < PERMUTATIONS_3.len()) as usize;
        }
        assert!(hits >= 19, "{hits}/20");
    }

    #[test]
    fn average_error_zero_at_truth() {
        let fam = generate_tabular_family(TabularFamilySpec::default(), 6).unwrap();
        let classes = build_tabular_hypothesis_class(&fam, 0, 0).unwrap();
        let ds = tabular_sources(&fam, 30, 2);
        let step = StepRep {
            step: 1,
            phi_index: 0,
            tables: true_tabular_tables(&fam, 1),
            upsilon_index: None,
            log_likelihood: 0.0,
            candidate_scores: vec![],
        };
        assert!(average_mle_error(&step, &classes, &fam, &ds).unwrap() < 1e-24);
    }

    #[test]
    fn class_construction() {
        let fam = generate_comblock_family(5, 5, 0).unwrap();
        let classes = build_comblock_hypothesis_class(&fam, 0, 0);
        assert_eq!(classes.phi.len(), 6);
        assert_eq!(classes.dim(), 15);
        let t = &fam.target;
        for z in 0..3 {
            for h in 1..=5 {
                assert_eq!(classes.phi[0].decode(&t.noiseless_observation(z, h)), z);
            }
        }
        assert_eq!(build_comblock_hypothesis_class(&fam, 4, 1).phi.len(), 10);
        assert!((classes.log_upsilon(500) - 15.0 * 501f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn noisy_decoding_accuracy() {
        let fam = generate_comblock_family(5, 5, 0).unwrap();
        let classes = build_comblock_hypothesis_class(&fam, 0, 0);
        let t = &fam.target;
        let mut rng = seeded_rng(77, 0);
        let n = 10_000;
        let mut correct = 0;
        for i in 0..n {
            let z = i % 3;
            let h = 1 + i % 5;
            correct += (classes.phi[0].decode(&t.emit_observation(z, h, &mut rng)) == z) as usize;
        }
        assert!(correct as f64 / n as f64 >= 0.99, "{correct}");
    }

    #[test]
    fn learned_rep_json_round_trip() {
        let fam = generate_comblock_family(3, 2, 4).unwrap();
        let classes = build_comblock_hypothesis_class(&fam, 1, 0);
        let rep = learn_representation(&comblock_sources(&fam, 30, 0), &classes).unwrap();
        assert_eq!(LearnedRep::from_json(&rep.to_json().unwrap()).unwrap(), rep);
    }
}
