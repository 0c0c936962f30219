//! Neighborhood occupancy densities, the effective density solve and the
//! pointwise transfer-error bound `ε(s, a)` built on top of it.
//!
//! Every feature map in a hypothesis class is a one-hot map, so the L1
//! distance between two feature vectors is either 0 (same label) or 2. A
//! task's neighborhood density at a query is therefore a step function of the
//! radius, fully described by the per-map label histograms of its slice.

use std::collections::HashMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::datasets::{OfflineDataset, TransitionRecord};
use crate::error::{contract, Error, Result};
use crate::representation::{FeatureMap, HypothesisClasses};

/// L1 distance between two distinct one-hot vectors.
pub const ONE_HOT_GAP: f64 = 2.0;

const CONSTRAINT_SLACK: f64 = 1e-12;

/// `(1/N_S) · min_φ #{(s',a') in the slice : ‖φ(s,a) − φ(s',a')‖₁ ≤ ν}`,
/// computed directly from feature vectors.
pub fn neighborhood_density(
    slice: &[&TransitionRecord],
    phi: &[FeatureMap],
    obs: &[f64],
    action: usize,
    h: usize,
    nu: f64,
) -> f64 {
    if slice.is_empty() || phi.is_empty() {
        return 0.0;
    }
    let n = slice.len() as f64;
    phi.iter()
        .map(|map| {
            let q = map.features(obs, action, h);
            slice
                .iter()
                .filter(|r| {
                    let p = map.features(&r.obs, r.a, h);
                    let dist: f64 = q.iter().zip(&p).map(|(x, y)| (x - y).abs()).sum();
                    dist <= nu
                })
                .count()
        })
        .min()
        .map_or(0.0, |c| c as f64 / n)
}

/// `ν ↦ N_S · D^ν` for one task at one query, as a right-continuous step
/// function.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityProfile {
    n: usize,
    /// Strictly increasing radii with the count reached at each one.
    steps: Vec<(f64, usize)>,
}

impl DensityProfile {
    /// `per_map[j]` lists `(distance, count)` pairs for feature map `j`.
    pub fn from_counts(n: usize, per_map: &[Vec<(f64, usize)>]) -> Self {
        let mut radii: Vec<f64> = per_map.iter().flatten().map(|(d, _)| *d).collect();
        radii.sort_by(f64::total_cmp);
        radii.dedup();
        let count_at = |pairs: &[(f64, usize)], nu: f64| -> usize {
            pairs.iter().filter(|(d, _)| *d <= nu).map(|(_, c)| c).sum()
        };
        let steps = radii
            .into_iter()
            .map(|r| (r, per_map.iter().map(|p| count_at(p, r)).min().unwrap_or(0)))
            .collect();
        Self { n, steps }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn count_within(&self, nu: f64) -> usize {
        self.steps
            .iter()
            .take_while(|(r, _)| *r <= nu)
            .last()
            .map_or(0, |(_, c)| *c)
    }

    pub fn density(&self, nu: f64) -> f64 {
        self.count_within(nu) as f64 / self.n as f64
    }

    /// Smallest radius whose neighborhood holds at least `k` points under
    /// every feature map, i.e. `max_φ` of the `k`-th smallest distance.
    pub fn level_radius(&self, k: usize) -> f64 {
        self.steps
            .iter()
            .find(|(_, c)| *c >= k)
            .map_or(f64::INFINITY, |(r, _)| *r)
    }

    /// Radii at which the density changes, with the density reached there.
    /// Radii with zero density are dropped.
    pub fn breakpoints(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        let mut last = 0;
        for &(r, c) in &self.steps {
            if c > last {
                out.push((r, c as f64 / self.n as f64));
                last = c;
            }
        }
        out
    }
}

/// Label histograms of every source slice at one step, one per feature map.
#[derive(Debug, Clone)]
pub struct StepIndex {
    step: usize,
    n_source: usize,
    /// `counts[task][map][label]`.
    counts: Vec<Vec<Vec<usize>>>,
}

impl StepIndex {
    pub fn build(sources: &[OfflineDataset], phi: &[FeatureMap], h: usize) -> Result<Self> {
        if sources.is_empty() {
            return Err(contract("at least one source dataset is required"));
        }
        if phi.is_empty() {
            return Err(contract("feature class must be nonempty"));
        }
        let mut n_source = None;
        let mut counts = Vec::with_capacity(sources.len());
        for (task, ds) in sources.iter().enumerate() {
            let slice = ds.slice(h);
            if slice.is_empty() {
                return Err(Error::EmptyDataset { task, step: h });
            }
            match n_source {
                None => n_source = Some(slice.len()),
                Some(n) if n != slice.len() => {
                    return Err(contract(format!(
                        "source {task} has {} records at step {h}, expected {n}",
                        slice.len()
                    )))
                }
                _ => {}
            }
            counts.push(
                phi.iter()
                    .map(|map| {
                        let mut hist = vec![0; map.dim()];
                        for r in &slice {
                            hist[map.label(&r.obs, r.a, h)] += 1;
                        }
                        hist
                    })
                    .collect(),
            );
        }
        Ok(Self {
            step: h,
            n_source: n_source.expect("nonempty sources"),
            counts,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn n_source(&self) -> usize {
        self.n_source
    }

    pub fn num_tasks(&self) -> usize {
        self.counts.len()
    }

    /// Density profile of `task` at a query given by its label under each map.
    pub fn profile(&self, task: usize, labels: &[usize]) -> DensityProfile {
        let per_map: Vec<Vec<(f64, usize)>> = self.counts[task]
            .iter()
            .zip(labels)
            .map(|(hist, &q)| {
                let same = hist[q];
                vec![(0.0, same), (ONE_HOT_GAP, self.n_source - same)]
            })
            .collect();
        DensityProfile::from_counts(self.n_source, &per_map)
    }

    pub fn profiles(&self, labels: &[usize]) -> Vec<DensityProfile> {
        (0..self.num_tasks())
            .map(|i| self.profile(i, labels))
            .collect()
    }
}

/// Solution of the balancing problem at one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityQuery {
    pub radii: Vec<f64>,
    pub densities: Vec<f64>,
    /// Effective density `C / Σ ν_i`.
    pub d_h: f64,
    pub c: f64,
    /// Common level `k` whose radii were used (before any inflation).
    pub level: usize,
}

impl DensityQuery {
    pub fn radius_sum(&self) -> f64 {
        self.radii.iter().sum()
    }
}

/// Minimises `Σ ν_i` subject to `min_i D_i^{ν_i} · Σ ν_i ≥ C`.
///
/// Scans common levels `k = 1..N`: `ν_i(k)` is the smallest radius holding
/// `k` points for task `i`, and `P(k) = (k/N) Σ_i ν_i(k)`. At the first `k`
/// with `P(k) ≥ C` the optimum is either those radii or the level `k − 1`
/// radii inflated to `Σν = C·N/(k−1)`, whichever is smaller. Inflation goes
/// to the task with the most headroom below its next breakpoint (lowest
/// index on ties) and spills over to the next task at the cap.
pub fn effective_density(profiles: &[DensityProfile], c: f64) -> Result<DensityQuery> {
    if profiles.is_empty() {
        return Err(contract("effective density needs at least one task"));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(contract(format!(
            "density constant must be positive, got {c}"
        )));
    }
    let n = profiles[0].n();
    if n == 0 || profiles.iter().any(|p| p.n() != n) {
        return Err(contract("all tasks need the same nonzero sample count"));
    }
    let radii_at = |k: usize| -> Vec<f64> { profiles.iter().map(|p| p.level_radius(k)).collect() };
    let product = |k: usize, radii: &[f64]| k as f64 / n as f64 * radii.iter().sum::<f64>();

    let hit = (1..=n).find(|&k| product(k, &radii_at(k)) >= c);
    let (radii, level) = match hit {
        None => {
            let mut radii = radii_at(n);
            let extra = c - radii.iter().sum::<f64>();
            radii[0] += extra.max(0.0);
            (radii, n)
        }
        Some(1) => (radii_at(1), 1),
        Some(k) => {
            let upper = radii_at(k);
            let target = c * n as f64 / (k - 1) as f64;
            if target >= upper.iter().sum::<f64>() {
                (upper, k)
            } else {
                let mut radii = radii_at(k - 1);
                let mut extra = target - radii.iter().sum::<f64>();
                let mut order: Vec<usize> = (0..radii.len()).collect();
                order.sort_by(|&a, &b| {
                    let ha = upper[a] - radii[a];
                    let hb = upper[b] - radii[b];
                    hb.total_cmp(&ha).then(a.cmp(&b))
                });
                for i in order {
                    if extra <= 0.0 {
                        break;
                    }
                    let take = extra.min(upper[i] - radii[i]);
                    radii[i] += take;
                    extra -= take;
                }
                (radii, k - 1)
            }
        }
    };
    let densities: Vec<f64> = profiles
        .iter()
        .zip(&radii)
        .map(|(p, &r)| p.density(r))
        .collect();
    let sum: f64 = radii.iter().sum();
    let min_density = densities.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(
        min_density * sum >= c * (1.0 - CONSTRAINT_SLACK),
        "balancing constraint violated: {min_density} * {sum} < {c}"
    );
    Ok(DensityQuery {
        d_h: c / sum,
        radii,
        densities,
        c,
        level,
    })
}

/// Everything the pointwise bound depends on besides the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonParams {
    pub alpha_max: f64,
    pub num_sources: usize,
    pub n_source: usize,
    pub dim: usize,
    pub delta: f64,
    pub log_phi: f64,
    pub log_upsilon: f64,
}

impl EpsilonParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_sources == 0 || self.n_source == 0 || self.dim == 0 {
            return Err(contract("K, N_S and d must all be positive"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(contract(format!(
                "delta must lie in (0,1), got {}",
                self.delta
            )));
        }
        if !(self.alpha_max >= 0.0) || !self.alpha_max.is_finite() {
            return Err(contract("alpha_max must be a nonnegative finite number"));
        }
        if self.log_phi < 0.0 || self.log_upsilon < 0.0 {
            return Err(contract("class log-cardinalities must be nonnegative"));
        }
        Ok(())
    }

    /// `log(|Φ|/δ) + K log|Υ|`.
    fn complexity(&self) -> f64 {
        self.log_phi - self.delta.ln() + self.num_sources as f64 * self.log_upsilon
    }

    /// `C = (log(|Φ|/δ) + K log|Υ|) / (N_S · d)`.
    pub fn density_constant(&self) -> f64 {
        self.complexity() / (self.n_source * self.dim) as f64
    }

    /// `2 α_max √(K (log(2|Φ|/δ) + K log|Υ|) / (N_S D_h))`, clipped to 1.
    pub fn bound(&self, d_h: f64) -> EpsilonBound {
        let k = self.num_sources as f64;
        let inner = k * (std::f64::consts::LN_2 + self.complexity()) / (self.n_source as f64 * d_h);
        let raw = 2.0 * self.alpha_max * inner.sqrt();
        EpsilonBound {
            raw,
            value: raw.min(1.0),
            d_h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonBound {
    pub raw: f64,
    pub value: f64,
    pub d_h: f64,
}

pub fn epsilon_bound(d_h: f64, params: &EpsilonParams) -> Result<EpsilonBound> {
    if !(d_h > 0.0) {
        return Err(contract(format!(
            "effective density must be positive, got {d_h}"
        )));
    }
    params.validate()?;
    Ok(params.bound(d_h))
}

/// Root mean square of the pointwise bounds over the target slice.
pub fn epsilon_h(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|e| e * e).sum::<f64>() / values.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub density: DensityQuery,
    pub epsilon: EpsilonBound,
}

type Memo = RwLock<HashMap<Vec<usize>, Arc<OnceLock<QueryResult>>>>;

/// Lazily evaluated, memoised `ε(s, a)` over every step.
///
/// A query is keyed by its label under each map of the class, which is all
/// the densities depend on. Concurrent queries for the same key compute it
/// once.
#[derive(Debug)]
pub struct EpsilonModel {
    phi: Vec<FeatureMap>,
    params: EpsilonParams,
    indices: Vec<StepIndex>,
    memo: Vec<Memo>,
    computations: AtomicUsize,
}

impl EpsilonModel {
    pub fn new(
        sources: &[OfflineDataset],
        classes: &HypothesisClasses,
        alpha_max: f64,
        delta: f64,
    ) -> Result<Self> {
        let horizon = sources
            .first()
            .ok_or_else(|| contract("at least one source dataset is required"))?
            .header
            .horizon;
        let indices = (1..=horizon)
            .map(|h| StepIndex::build(sources, &classes.phi, h))
            .collect::<Result<Vec<_>>>()?;
        let n_source = indices[0].n_source();
        let params = EpsilonParams {
            alpha_max,
            num_sources: sources.len(),
            n_source,
            dim: classes.dim(),
            delta,
            log_phi: classes.log_phi(),
            log_upsilon: classes.log_upsilon(n_source),
        };
        params.validate()?;
        Ok(Self {
            phi: classes.phi.clone(),
            params,
            memo: (0..horizon).map(|_| RwLock::new(HashMap::new())).collect(),
            indices,
            computations: AtomicUsize::new(0),
        })
    }

    pub fn params(&self) -> &EpsilonParams {
        &self.params
    }

    pub fn horizon(&self) -> usize {
        self.indices.len()
    }

    pub fn class_size(&self) -> usize {
        self.phi.len()
    }

    pub fn density_constant(&self) -> f64 {
        self.params.density_constant()
    }

    /// Number of distinct keys evaluated so far.
    pub fn computations(&self) -> usize {
        self.computations.load(Ordering::Relaxed)
    }

    pub fn labels(&self, obs: &[f64], action: usize, h: usize) -> Vec<usize> {
        self.phi.iter().map(|m| m.label(obs, action, h)).collect()
    }

    pub fn query_labels(&self, h: usize, labels: &[usize]) -> Result<QueryResult> {
        if !(1..=self.horizon()).contains(&h) {
            return Err(contract(format!("step {h} outside 1..={}", self.horizon())));
        }
        if labels.len() != self.phi.len()
            || labels.iter().zip(&self.phi).any(|(l, m)| *l >= m.dim())
        {
            return Err(contract("query labels do not match the feature class"));
        }
        let cell = {
            let read = self.memo[h - 1].read().expect("memo lock");
            read.get(labels).cloned()
        };
        let cell = match cell {
            Some(c) => c,
            None => {
                let mut write = self.memo[h - 1].write().expect("memo lock");
                write.entry(labels.to_vec()).or_default().clone()
            }
        };
        let result = cell.get_or_init(|| {
            self.computations.fetch_add(1, Ordering::Relaxed);
            let profiles = self.indices[h - 1].profiles(labels);
            let density = effective_density(&profiles, self.params.density_constant())
                .expect("constant validated at construction");
            let epsilon = self.params.bound(density.d_h);
            QueryResult { density, epsilon }
        });
        Ok(result.clone())
    }

    pub fn query(&self, obs: &[f64], action: usize, h: usize) -> Result<QueryResult> {
        self.query_labels(h, &self.labels(obs, action, h))
    }

    pub fn epsilon(&self, obs: &[f64], action: usize, h: usize) -> Result<f64> {
        Ok(self.query(obs, action, h)?.epsilon.value)
    }

    /// `ε_h` over a target slice.
    pub fn epsilon_h(&self, slice: &[&TransitionRecord], h: usize) -> Result<f64> {
        let values = slice
            .iter()
            .map(|r| self.epsilon(&r.obs, r.a, h))
            .collect::<Result<Vec<_>>>()?;
        Ok(epsilon_h(&values))
    }

    /// Every memoised query as CSV rows `h, query_id, nu_1..nu_K, D_h, epsilon`,
    /// sorted by step then key. The query id joins the per-map labels.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let k = self.params.num_sources;
        let mut header = vec!["h".to_string(), "query_id".to_string()];
        header.extend((1..=k).map(|i| format!("nu_{i}")));
        header.extend(["D_h".to_string(), "epsilon".to_string()]);
        wtr.write_record(&header)?;
        for (h0, memo) in self.memo.iter().enumerate() {
            let read = memo.read().expect("memo lock");
            let mut rows: Vec<(&Vec<usize>, &QueryResult)> = read
                .iter()
                .filter_map(|(key, cell)| cell.get().map(|r| (key, r)))
                .collect();
            rows.sort_by(|a, b| a.0.cmp(b.0));
            for (key, r) in rows {
                let id: Vec<String> = key.iter().map(|l| l.to_string()).collect();
                let mut rec = vec![(h0 + 1).to_string(), id.join("-")];
                rec.extend(r.density.radii.iter().map(|v| v.to_string()));
                rec.push(r.density.d_h.to_string());
                rec.push(r.epsilon.value.to_string());
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Outcome of the harmonic-mean feasibility test at one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corollary1Outcome {
    pub feasible: bool,
    /// Witness radii and densities when feasible.
    pub radii: Option<Vec<f64>>,
    pub densities: Option<Vec<f64>>,
    /// Largest harmonic mean reachable with `(1/K) Σ ν_i ≤ ν'`.
    pub best_harmonic_mean: f64,
    pub rhs: f64,
    /// `2 α_max K √(d ν')`, meaningful when feasible.
    pub bound: f64,
}

/// Searches radii with `(1/K) Σ ν_i ≤ ν'` maximising the harmonic mean of the
/// per-task densities, restricted to each task's breakpoints (moving a radius
/// down to its breakpoint never lowers the density and only frees budget).
///
/// Per task the options are `(ν, 1/D)` pairs; tasks are merged one at a time
/// keeping only the Pareto front of `(Σν, Σ 1/D)`.
pub fn corollary1_check(
    profiles: &[DensityProfile],
    nu_prime: f64,
    params: &EpsilonParams,
) -> Result<Corollary1Outcome> {
    if !(nu_prime > 0.0 && nu_prime <= 1.0) {
        return Err(contract(format!("nu' must lie in (0,1], got {nu_prime}")));
    }
    params.validate()?;
    if profiles.len() != params.num_sources {
        return Err(contract("one profile per source task is required"));
    }
    let k = params.num_sources as f64;
    let budget = k * nu_prime * (1.0 + CONSTRAINT_SLACK);
    let rhs = params.complexity() / (params.n_source as f64 * params.dim as f64 * nu_prime);

    // (Σν, Σ1/D, chosen option per task)
    let mut front: Vec<(f64, f64, Vec<usize>)> = vec![(0.0, 0.0, Vec::new())];
    let options: Vec<Vec<(f64, f64)>> = profiles.iter().map(|p| p.breakpoints()).collect();
    for opts in &options {
        let mut next: Vec<(f64, f64, Vec<usize>)> = Vec::new();
        for (sum_nu, sum_inv, picks) in &front {
            for (j, &(nu, d)) in opts.iter().enumerate() {
                let s = sum_nu + nu;
                if s > budget {
                    continue;
                }
                let mut p = picks.clone();
                p.push(j);
                next.push((s, sum_inv + 1.0 / d, p));
            }
        }
        next.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut pruned: Vec<(f64, f64, Vec<usize>)> = Vec::new();
        for cand in next {
            if pruned.last().is_none_or(|last| cand.1 < last.1) {
                pruned.push(cand);
            }
        }
        front = pruned;
    }
    let best = front.iter().min_by(|a, b| a.1.total_cmp(&b.1));
    let bound = 2.0 * params.alpha_max * k * (params.dim as f64 * nu_prime).sqrt();
    Ok(match best {
        Some((_, sum_inv, picks)) => {
            let hm = k / sum_inv;
            let feasible = hm >= rhs;
            let radii: Vec<f64> = picks.iter().zip(&options).map(|(&j, o)| o[j].0).collect();
            let densities: Vec<f64> = picks.iter().zip(&options).map(|(&j, o)| o[j].1).collect();
            Corollary1Outcome {
                feasible,
                radii: feasible.then_some(radii),
                densities: feasible.then_some(densities),
                best_harmonic_mean: hm,
                rhs,
                bound,
            }
        }
        None => Corollary1Outcome {
            feasible: false,
            radii: None,
            densities: None,
            best_harmonic_mean: 0.0,
            rhs,
            bound,
        },
    })
}

/// Per-task bias/variance bound on the squared TV at a query:
/// `average_error / D^ν + 2 d ν`, with `+∞` when the neighborhood is empty.
pub fn local_error_rhs(average_error: f64, density: f64, nu: f64, dim: usize) -> f64 {
    let variance = if density > 0.0 {
        average_error / density
    } else {
        f64::INFINITY
    };
    variance + 2.0 * dim as f64 * nu
}
