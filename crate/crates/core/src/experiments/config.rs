use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::baselines::{SwitchBackOptions, VslPolicy};
use crate::drl::{DdqnConfig, RewardConfig};
use crate::sim::{FormationStrategy, IdmParams, LoadingOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingConfig {
    /// m
    pub length: f64,
    /// s
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadingConfig {
    pub target: usize,
    /// Steps simulated at the target count before any removal.
    pub settle_steps: u64,
    pub min_interval_steps: u64,
    pub max_steps: u64,
}

impl LoadingConfig {
    pub fn options(&self) -> LoadingOptions {
        LoadingOptions { min_interval_steps: self.min_interval_steps, max_steps: self.max_steps }
    }
}

/// Departures applied after loading; entries are removed `interval_steps` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemovalConfig {
    pub schedule: Vec<usize>,
    pub interval_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavConfig {
    /// Fraction of the remaining vehicles converted to CAVs (rounded).
    pub mpr: f64,
    pub formation: FormationStrategy,
}

/// Incremental unloading used by the hysteresis and speed-limit sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HysteresisConfig {
    /// Steps between single-vehicle removals.
    pub removal_interval_steps: u64,
    /// Unloading stops once this many vehicles remain.
    pub final_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub max_episode_steps: u64,
    pub success_terminates: bool,
    pub speed_jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Horizon of greedy and IDM-only rollouts.
    pub steps: u64,
    /// Trailing fraction of a rollout averaged as its steady state.
    pub tail_fraction: f64,
    /// Episodes between training checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

/// Budget profile: `full` uses the large network and 1M-step budget, `desk`
/// the reduced one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Full,
    Desk,
}

impl FromStr for Profile {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Profile::Full),
            "desk" => Ok(Profile::Desk),
            other => Err(ExperimentError::Config(format!("unknown profile '{other}' (expected full or desk)"))),
        }
    }
}

/// Everything one experiment run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub label: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub ring: RingConfig,
    pub idm: IdmParams,
    pub loading: LoadingConfig,
    pub removal: RemovalConfig,
    pub cav: CavConfig,
    pub hysteresis: HysteresisConfig,
    pub env: EnvConfig,
    pub reward: RewardConfig,
    pub ddqn: DdqnConfig,
    pub evaluation: EvaluationConfig,
    pub vsl: VslPolicy,
    pub switch_back: SwitchBackOptions,
}

pub const PRESETS: [&str; 4] = ["mpr33", "mpr15", "mpr66", "two-step"];

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::preset("mpr33", Profile::Desk).expect("built-in preset")
    }
}

impl ScenarioConfig {
    /// Built-in scenarios: `mpr33` (remove 17, 17 CAVs), `mpr15` (remove 9,
    /// 9 CAVs), `mpr66` (remove 17, 34 CAVs), `two-step` (remove 17 then 12,
    /// 13 CAVs).
    pub fn preset(name: &str, profile: Profile) -> Result<Self, ExperimentError> {
        let (schedule, mpr) = match name {
            "mpr33" => (vec![17], 17.0 / 51.0),
            "mpr15" => (vec![9], 9.0 / 59.0),
            "mpr66" => (vec![17], 34.0 / 51.0),
            "two-step" => (vec![17, 12], 13.0 / 39.0),
            other => {
                return Err(ExperimentError::Config(format!(
                    "unknown preset '{other}' (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        let mut cfg = Self {
            label: name.to_string(),
            seed: 1,
            output_dir: None,
            ring: RingConfig { length: 1000.0, dt: 0.1 },
            idm: IdmParams::default(),
            loading: LoadingConfig { target: 68, settle_steps: 3000, min_interval_steps: 50, max_steps: 500_000 },
            removal: RemovalConfig { schedule, interval_steps: 3000 },
            cav: CavConfig { mpr, formation: FormationStrategy::Uniform },
            hysteresis: HysteresisConfig { removal_interval_steps: 600, final_count: 2 },
            env: EnvConfig { max_episode_steps: 3000, success_terminates: true, speed_jitter: 0.0 },
            reward: RewardConfig::default(),
            ddqn: DdqnConfig::full(),
            evaluation: EvaluationConfig { steps: 6000, tail_fraction: 0.5, checkpoint_every: 500 },
            vsl: VslPolicy::default(),
            switch_back: SwitchBackOptions::default(),
        };
        cfg.apply_profile(profile);
        Ok(cfg)
    }

    /// Replaces the learner budget and episode length with the profile's.
    pub fn apply_profile(&mut self, profile: Profile) {
        match profile {
            Profile::Full => {
                self.ddqn = DdqnConfig::full();
                self.env.max_episode_steps = 3000;
                self.evaluation.checkpoint_every = 500;
            }
            Profile::Desk => {
                self.ddqn = DdqnConfig::desk();
                self.env.max_episode_steps = 300;
                self.evaluation.checkpoint_every = 100;
            }
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |m: String| Err(ExperimentError::Config(m));
        if !(self.ring.length > 0.0 && self.ring.dt > 0.0) {
            return fail("ring length and dt must be positive".into());
        }
        self.idm.validate()?;
        let removed: usize = self.removal.schedule.iter().sum();
        if removed >= self.loading.target {
            return fail(format!("removal schedule removes {removed} of {} vehicles", self.loading.target));
        }
        if !(0.0..=1.0).contains(&self.cav.mpr) {
            return fail(format!("mpr {} outside [0, 1]", self.cav.mpr));
        }
        if self.hysteresis.removal_interval_steps == 0 || self.hysteresis.final_count == 0 {
            return fail("hysteresis interval and final count must be positive".into());
        }
        if !(self.evaluation.tail_fraction > 0.0 && self.evaluation.tail_fraction <= 1.0) {
            return fail("evaluation.tail_fraction must lie in (0, 1]".into());
        }
        if self.env.max_episode_steps == 0 {
            return fail("env.max_episode_steps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.env.speed_jitter) {
            return fail("env.speed_jitter must lie in [0, 1)".into());
        }
        self.ddqn.validate()?;
        self.vsl.validate(self.idm.desired_speed)?;
        Ok(())
    }

    /// Vehicles left after the removal schedule.
    pub fn remaining_vehicles(&self) -> usize {
        self.loading.target - self.removal.schedule.iter().sum::<usize>()
    }

    pub fn cav_count(&self) -> usize {
        (self.cav.mpr * self.remaining_vehicles() as f64).round() as usize
    }

    /// Learner settings with the scenario seed applied.
    pub fn ddqn_config(&self) -> DdqnConfig {
        DdqnConfig { seed: self.seed, ..self.ddqn.clone() }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_their_scenarios() {
        let counts: Vec<(usize, usize)> = PRESETS
            .iter()
            .map(|p| {
                let c = ScenarioConfig::preset(p, Profile::Desk).unwrap();
                c.validate().unwrap();
                (c.remaining_vehicles(), c.cav_count())
            })
            .collect();
        assert_eq!(counts, vec![(51, 17), (59, 9), (51, 34), (39, 13)]);
        assert!(ScenarioConfig::preset("mpr50", Profile::Desk).is_err());
    }

    #[test]
    fn toml_round_trip() {
        for p in PRESETS {
            for profile in [Profile::Full, Profile::Desk] {
                let mut cfg = ScenarioConfig::preset(p, profile).unwrap();
                cfg.output_dir = Some("runs/x".into());
                let text = cfg.to_toml();
                let back = ScenarioConfig::from_toml(&text).unwrap();
                assert_eq!(back, cfg);
                assert_eq!(back.to_toml(), text);
            }
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ScenarioConfig::default().to_toml().replace("settle_steps", "setle_steps");
        let err = ScenarioConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("setle_steps"), "{err}");
    }

    #[test]
    fn invalid_schedule_rejected() {
        let mut cfg = ScenarioConfig::default();
        cfg.removal.schedule = vec![40, 28];
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::default();
        cfg.cav.mpr = 1.5;
        assert!(cfg.validate().is_err());
    }
}
