use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DrlError;
use crate::metrics::{measure, Phase};
use crate::sim::{RingSnapshot, RingState};

/// CAV acceleration commands (m/s²) indexed by action.
pub const ACTION_ACCELS: [f64; 3] = [-1.0, 0.0, 1.0];

pub fn accel_for_action(action: usize) -> Result<f64, DrlError> {
    ACTION_ACCELS.get(action).copied().ok_or(DrlError::BadAction(action))
}

/// Episode-level reward terms added on top of the per-step mean speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub collision_penalty: f64,
    pub success_bonus: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { collision_penalty: -3000.0, success_bonus: 1000.0 }
    }
}

/// Everything needed to rebuild a training episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    /// Post-removal ring with the CAV formation applied.
    pub snapshot: RingSnapshot,
    /// veh/h; exceeding it is a success.
    pub success_flow_threshold: f64,
    pub max_episode_steps: u64,
    /// Divides the mean speed to form the observation.
    pub speed_normalizer: f64,
    pub reward: RewardConfig,
    pub success_terminates: bool,
    /// Relative uniform speed perturbation applied on reset; 0 disables it.
    pub speed_jitter: f64,
    pub jitter_seed: u64,
}

impl EnvSpec {
    pub fn new(snapshot: RingSnapshot, success_flow_threshold: f64, max_episode_steps: u64) -> Self {
        let speed_normalizer = snapshot.idm.desired_speed;
        Self {
            snapshot,
            success_flow_threshold,
            max_episode_steps,
            speed_normalizer,
            reward: RewardConfig::default(),
            success_terminates: true,
            speed_jitter: 0.0,
            jitter_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DrlError> {
        if !(self.success_flow_threshold > 0.0 && self.success_flow_threshold.is_finite()) {
            return Err(DrlError::Config("success_flow_threshold must be positive".into()));
        }
        if !(self.speed_normalizer > 0.0 && self.speed_normalizer.is_finite()) {
            return Err(DrlError::Config("speed_normalizer must be positive".into()));
        }
        if self.max_episode_steps == 0 {
            return Err(DrlError::Config("max_episode_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.speed_jitter) {
            return Err(DrlError::Config("speed_jitter must lie in [0, 1)".into()));
        }
        self.snapshot.restore()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// veh/h after the step.
    pub flow: f64,
    /// m/s after the step.
    pub mean_speed: f64,
    pub collision: bool,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub state: Vec<f64>,
    pub reward: f64,
    /// The episode is over (terminal event or step limit).
    pub done: bool,
    /// The episode ended in a true terminal state; its value is not bootstrapped.
    pub terminal: bool,
    pub info: StepInfo,
}

/// Episodic environment with a discrete action set.
pub trait Environment {
    fn observation_dim(&self) -> usize;
    fn action_count(&self) -> usize;
    fn reset(&mut self) -> Result<Vec<f64>, DrlError>;
    fn step(&mut self, action: usize) -> Result<StepResult, DrlError>;
}

/// The ring road seen through the loop's average speed; the chosen
/// acceleration is executed by every CAV.
#[derive(Debug, Clone)]
pub struct TrafficEnv {
    spec: EnvSpec,
    ring: Option<RingState>,
    steps: u64,
    finished: bool,
    succeeded: bool,
    jitter_rng: ChaCha8Rng,
}

impl TrafficEnv {
    pub fn new(spec: EnvSpec) -> Result<Self, DrlError> {
        spec.validate()?;
        let jitter_rng = ChaCha8Rng::seed_from_u64(spec.jitter_seed);
        Ok(Self { spec, ring: None, steps: 0, finished: true, succeeded: false, jitter_rng })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// The current ring, if an episode has been started.
    pub fn ring(&self) -> Option<&RingState> {
        self.ring.as_ref()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn observe(&self, ring: &RingState) -> Vec<f64> {
        vec![(ring.mean_speed() / self.spec.speed_normalizer).clamp(0.0, 1.0)]
    }
}

impl Environment for TrafficEnv {
    fn observation_dim(&self) -> usize {
        1
    }

    fn action_count(&self) -> usize {
        ACTION_ACCELS.len()
    }

    fn reset(&mut self) -> Result<Vec<f64>, DrlError> {
        let mut ring = self.spec.snapshot.restore()?;
        if self.spec.speed_jitter > 0.0 {
            let j = self.spec.speed_jitter;
            let v_max = ring.idm.desired_speed;
            for v in &mut ring.vehicles {
                v.speed = (v.speed * (1.0 + self.jitter_rng.random_range(-j..=j))).clamp(0.0, v_max);
            }
        }
        let state = self.observe(&ring);
        self.ring = Some(ring);
        self.steps = 0;
        self.finished = false;
        self.succeeded = false;
        Ok(state)
    }

    fn step(&mut self, action: usize) -> Result<StepResult, DrlError> {
        if self.finished {
            return Err(DrlError::EpisodeOver);
        }
        let accel = accel_for_action(action)?;
        let ring = self.ring.as_mut().ok_or(DrlError::EpisodeOver)?;
        let collision = ring.step(accel).is_some();
        let sample = measure(ring, Phase::Controlled);
        self.steps += 1;

        let mut reward = sample.mean_speed;
        let mut terminal = false;
        let mut success = false;
        if collision {
            reward += self.spec.reward.collision_penalty;
            terminal = true;
        } else if !self.succeeded && sample.flow > self.spec.success_flow_threshold {
            reward += self.spec.reward.success_bonus;
            self.succeeded = true;
            success = true;
            terminal = self.spec.success_terminates;
        }
        let done = terminal || self.steps >= self.spec.max_episode_steps;
        self.finished = done;
        let ring = self.ring.as_ref().expect("ring present during an episode");
        Ok(StepResult {
            state: self.observe(ring),
            reward,
            done,
            terminal,
            info: StepInfo { flow: sample.flow, mean_speed: sample.mean_speed, collision, success },
        })
    }
}
