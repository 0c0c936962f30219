//! Offline trajectory collection, storage and per-step slicing.
//!
//! Next states are always drawn from the environment kernel given only the
//! current latent and action, so every collected dataset is compliant no
//! matter how the behaviour policy was chosen.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::comblock::{is_good, ComblockTask, NUM_ACTIONS, NUM_LATENTS};
use crate::envs::{sample_categorical, seeded_rng, Environment};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub h: usize,
    pub obs: Vec<f64>,
    pub a: usize,
    pub next_obs: Vec<f64>,
    pub r: f64,
    /// Oracle latent annotations; learners never read these.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_next: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub task_id: usize,
    #[serde(rename = "N")]
    pub num_trajectories: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub obs_dim: usize,
    pub seed: u64,
    pub policy: String,
    #[serde(default)]
    pub oracle_annotated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Vec<TransitionRecord>>,
}

/// Per-step action distribution. Policies see the observation and, for
/// oracle collection policies only, the latent state.
pub trait BehaviorPolicy: Sync {
    fn action_probs(&self, obs: &[f64], latent: usize, h: usize) -> Vec<f64>;
    fn describe(&self) -> String;
}

/// Latent-indexed stochastic policy, `probs[h-1][z][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTablePolicy {
    pub probs: Vec<Vec<Vec<f64>>>,
    pub description: String,
}

impl LatentTablePolicy {
    pub fn uniform(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            probs: vec![vec![vec![1.0 / num_actions as f64; num_actions]; num_states]; horizon],
            description: "uniform".into(),
        }
    }

    pub fn deterministic(table: &[Vec<usize>], num_actions: usize, description: &str) -> Self {
        Self {
            probs: table
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&a| {
                            (0..num_actions)
                                .map(|b| if a == b { 1.0 } else { 0.0 })
                                .collect()
                        })
                        .collect()
                })
                .collect(),
            description: description.into(),
        }
    }
}

impl BehaviorPolicy for LatentTablePolicy {
    fn action_probs(&self, _obs: &[f64], latent: usize, h: usize) -> Vec<f64> {
        self.probs[h - 1][latent].clone()
    }

    fn describe(&self) -> String {
        self.description.clone()
    }
}

pub const DEFAULT_EPSILON_EXPLORE: f64 = 0.5;

/// Optimal action with probability `1 − ε` at good latents (plus the uniform
/// share), uniform at the bad latent.
pub fn exploratory_policy(task: &ComblockTask, epsilon_explore: f64) -> Result<LatentTablePolicy> {
    if !(0.0..=1.0).contains(&epsilon_explore) {
        return Err(Error::Contract(format!(
            "epsilon_explore {epsilon_explore} outside [0,1]"
        )));
    }
    let uniform = 1.0 / NUM_ACTIONS as f64;
    let probs = (1..=task.horizon())
        .map(|h| {
            (0..NUM_LATENTS)
                .map(|z| {
                    let mut row = vec![uniform; NUM_ACTIONS];
                    if is_good(z) {
                        let opt = task.optimal_action(z, h).expect("good latent");
                        for (a, p) in row.iter_mut().enumerate() {
                            *p = epsilon_explore * uniform
                                + if a == opt { 1.0 - epsilon_explore } else { 0.0 };
                        }
                    }
                    row
                })
                .collect()
        })
        .collect();
    Ok(LatentTablePolicy {
        probs,
        description: format!("exploratory(epsilon={epsilon_explore})"),
    })
}

fn rollout<E: Environment + ?Sized, P: BehaviorPolicy + ?Sized>(
    env: &E,
    policy: &P,
    rng: &mut ChaCha8Rng,
) -> Vec<TransitionRecord> {
    let horizon = env.horizon();
    let mut z = env.reset(rng);
    let mut obs = env.observe(z, 1, rng);
    let mut records = Vec::with_capacity(horizon);
    for h in 1..=horizon {
        let a = sample_categorical(&policy.action_probs(&obs, z, h), rng);
        let (z_next, r) = env.step(z, a, h, rng);
        let next_obs = env.observe(z_next, h + 1, rng);
        records.push(TransitionRecord {
            h,
            obs: std::mem::take(&mut obs),
            a,
            next_obs: next_obs.clone(),
            r,
            z: Some(z),
            z_next: Some(z_next),
        });
        obs = next_obs;
        z = z_next;
    }
    records
}

/// Rolls `policy` for `num_trajectories` episodes. Trajectory `τ` draws from
/// its own substream `(seed, τ)`, so the result does not depend on how the
/// work is scheduled.
pub fn collect<E: Environment + ?Sized, P: BehaviorPolicy + ?Sized>(
    env: &E,
    policy: &P,
    num_trajectories: usize,
    seed: u64,
    task_id: usize,
) -> OfflineDataset {
    let trajectories = (0..num_trajectories)
        .into_par_iter()
        .map(|tau| rollout(env, policy, &mut seeded_rng(seed, tau as u64)))
        .collect();
    OfflineDataset {
        header: DatasetHeader {
            task_id,
            num_trajectories,
            horizon: env.horizon(),
            obs_dim: env.obs_dim(),
            seed,
            policy: policy.describe(),
            oracle_annotated: true,
        },
        trajectories,
    }
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.header.horizon
    }

    /// One record per trajectory at step `h`, in trajectory order.
    pub fn slice(&self, h: usize) -> Vec<&TransitionRecord> {
        assert!(
            (1..=self.horizon()).contains(&h),
            "step {h} outside 1..={}",
            self.horizon()
        );
        self.trajectories.iter().map(|t| &t[h - 1]).collect()
    }

    /// First `n` trajectories.
    pub fn truncated(&self, n: usize) -> OfflineDataset {
        let trajectories: Vec<_> = self.trajectories.iter().take(n).cloned().collect();
        OfflineDataset {
            header: DatasetHeader {
                num_trajectories: trajectories.len(),
                ..self.header.clone()
            },
            trajectories,
        }
    }

    pub fn without_annotations(&self) -> OfflineDataset {
        let mut out = self.clone();
        out.header.oracle_annotated = false;
        for r in out.trajectories.iter_mut().flatten() {
            r.z = None;
            r.z_next = None;
        }
        out
    }

    /// Shape, step numbering, chaining and annotation-flag invariants.
    pub fn validate(&self) -> Result<()> {
        let h_max = self.horizon();
        if self.trajectories.len() != self.header.num_trajectories {
            return Err(Error::Format(
                "trajectory count disagrees with header".into(),
            ));
        }
        for (tau, traj) in self.trajectories.iter().enumerate() {
            if traj.len() != h_max {
                return Err(Error::Format(format!(
                    "trajectory {tau} has {} records",
                    traj.len()
                )));
            }
            for (i, rec) in traj.iter().enumerate() {
                if rec.h != i + 1 {
                    return Err(Error::Format(format!(
                        "trajectory {tau} record {i} has step {}",
                        rec.h
                    )));
                }
                if rec.obs.len() != self.header.obs_dim || rec.next_obs.len() != self.header.obs_dim
                {
                    return Err(Error::Format(format!(
                        "trajectory {tau} step {} has wrong obs_dim",
                        rec.h
                    )));
                }
                if rec.z.is_some() != self.header.oracle_annotated
                    || rec.z_next.is_some() != self.header.oracle_annotated
                {
                    return Err(Error::Format(
                        "latent annotations disagree with header flag".into(),
                    ));
                }
                if i + 1 < traj.len() && rec.next_obs != traj[i + 1].obs {
                    return Err(Error::Format(format!(
                        "trajectory {tau} breaks chaining at step {}",
                        rec.h
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sidecar header path for a dataset written at `path`.
    pub fn header_path(path: &Path) -> PathBuf {
        path.with_extension("header.json")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for traj in &self.trajectories {
            serde_json::to_writer(&mut out, traj)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        std::fs::write(
            Self::header_path(path),
            serde_json::to_string_pretty(&self.header)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let header: DatasetHeader =
            serde_json::from_str(&std::fs::read_to_string(Self::header_path(path))?)?;
        let mut trajectories = Vec::with_capacity(header.num_trajectories);
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            trajectories.push(serde_json::from_str(&line)?);
        }
        let ds = Self {
            header,
            trajectories,
        };
        ds.validate()?;
        Ok(ds)
    }
}
