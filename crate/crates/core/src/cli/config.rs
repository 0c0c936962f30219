use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pipeline::{ComblockSettings, TabularSweepSettings};
use crate::planning::{PlannerConfig, UcbOptions};

/// Everything a run needs, read from a JSON file. Missing fields take the
/// defaults of the comblock benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "K")]
    pub num_sources: usize,
    #[serde(rename = "N_S")]
    pub n_source: Vec<usize>,
    pub n: Vec<usize>,
    pub seeds: Vec<u64>,
    pub noise_std: f64,
    pub epsilon_explore: f64,
    pub num_decoys: usize,
    pub eval_episodes: usize,
    pub planner: PlannerConfig,
    pub ucb: UcbOptions,
    pub tabular: TabularSweepSettings,
    pub validation_seeds: Vec<u64>,
    /// Where outputs go. Not part of the hashed content.
    #[serde(skip_serializing)]
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let comblock = ComblockSettings::default();
        Self {
            horizon: comblock.horizon,
            num_sources: comblock.num_sources,
            n_source: vec![500, 1000, 1500],
            n: vec![150, 200, 250],
            seeds: (0..10).collect(),
            noise_std: comblock.noise_std,
            epsilon_explore: comblock.epsilon_explore,
            num_decoys: comblock.num_decoys,
            eval_episodes: comblock.eval_episodes,
            planner: comblock.planner,
            ucb: comblock.ucb,
            tabular: TabularSweepSettings::default(),
            validation_seeds: (0..100).collect(),
            out: PathBuf::from("out"),
        }
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn check_list<T: Ord + Copy>(name: &str, items: &[T]) -> Result<()> {
    if items.is_empty() {
        return Err(config_error(format!("{name} must not be empty")));
    }
    if items.iter().collect::<BTreeSet<_>>().len() != items.len() {
        return Err(config_error(format!("{name} must not repeat values")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(config_error("H must be at least 1"));
        }
        if self.num_sources == 0 {
            return Err(config_error("K must be at least 1"));
        }
        check_list("N_S", &self.n_source)?;
        check_list("n", &self.n)?;
        check_list("seeds", &self.seeds)?;
        check_list("validation_seeds", &self.validation_seeds)?;
        if self.n_source.contains(&0) || self.n.contains(&0) {
            return Err(config_error("dataset sizes must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(config_error("noise_std must be a finite number ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.epsilon_explore) {
            return Err(config_error("epsilon_explore must lie in [0,1]"));
        }
        if self.eval_episodes == 0 {
            return Err(config_error("eval_episodes must be positive"));
        }
        if self.ucb.window == 0 || self.ucb.episode_cap < self.ucb.window {
            return Err(config_error("ucb needs 1 ≤ window ≤ episode_cap"));
        }
        self.planner
            .validate()
            .map_err(|e| config_error(format!("planner: {e}")))?;
        let tab = &self.tabular;
        if tab.n_source == 0 || tab.n_target == 0 {
            return Err(config_error("tabular dataset sizes must be positive"));
        }
        if tab.family.dim != 3 {
            return Err(config_error("tabular validation family needs d = 3"));
        }
        if !(tab.planner.delta > 0.0 && tab.planner.delta <= 1.0) {
            return Err(config_error("tabular delta must lie in (0,1]"));
        }
        Ok(())
    }

    pub fn settings(&self) -> ComblockSettings {
        ComblockSettings {
            horizon: self.horizon,
            num_sources: self.num_sources,
            noise_std: self.noise_std,
            epsilon_explore: self.epsilon_explore,
            num_decoys: self.num_decoys,
            eval_episodes: self.eval_episodes,
            planner: self.planner,
            ucb: self.ucb,
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            ExperimentConfig {
                num_sources: 0,
                ..Default::default()
            },
            ExperimentConfig {
                seeds: vec![],
                ..Default::default()
            },
            ExperimentConfig {
                seeds: vec![1, 2, 1],
                ..Default::default()
            },
            ExperimentConfig {
                n: vec![],
                ..Default::default()
            },
            ExperimentConfig {
                validation_seeds: vec![],
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"K": 3, "seeds": [4, 5]}"#).unwrap();
        assert_eq!(cfg.num_sources, 3);
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.horizon, 5);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            seeds: vec![0],
            ..Default::default()
        };
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
