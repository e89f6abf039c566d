//! Double-DQN under centralized training and centralized execution: one
//! network observes the loop's average speed and picks one acceleration that
//! every CAV executes.

mod env;
mod replay;
mod train;

pub use env::{accel_for_action, EnvSpec, Environment, RewardConfig, StepInfo, StepResult, TrafficEnv, ACTION_ACCELS};
pub use replay::{ReplayBuffer, Transition};
pub use train::{ddqn_targets, evaluate, train, train_with_hook, DdqnConfig, EpisodeRecord, EvalOutcome, TrainOutcome};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::{argmax, NeuralError};
use crate::sim::SimError;

#[derive(Debug, Error)]
pub enum DrlError {
    #[error("episode already finished; call reset first")]
    EpisodeOver,
    #[error("action index {0} is not one of 0, 1, 2")]
    BadAction(usize),
    #[error("replay buffer holds {occupancy} transitions, cannot sample {batch}")]
    UnderFilled { occupancy: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("environment snapshot: {0}")]
    Snapshot(#[from] SimError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// Linear ε decay from `start` to `end` over `decay_steps`, constant after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.05, decay_steps: 1_000_000 }
    }
}

impl EpsilonSchedule {
    pub fn epsilon_at(&self, step: u64) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        let f = step as f64 / self.decay_steps as f64;
        self.start * (1.0 - f) + self.end * f
    }
}

/// ε-greedy choice: uniform random with probability `epsilon`, else the
/// greedy action with ties broken toward the lowest index.
pub fn select_action<R: Rng + ?Sized>(q_values: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        rng.random_range(0..q_values.len())
    } else {
        argmax(q_values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn greedy_picks_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(&[0.1, 0.9, 0.3], 0.0, &mut rng), 1);
        assert_eq!(select_action(&[0.5, 0.5, 0.1], 0.0, &mut rng), 0);
    }

    #[test]
    fn full_exploration_is_uniform() {
        // multinomial: each count ~ N(n/3, n·(1/3)(2/3)); accept within 3σ
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[select_action(&[0.0, 10.0, 0.0], 1.0, &mut rng)] += 1;
        }
        let mean = n as f64 / 3.0;
        let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn epsilon_endpoints_and_monotone() {
        let s = EpsilonSchedule { start: 1.0, end: 0.05, decay_steps: 1000 };
        assert_eq!(s.epsilon_at(0), 1.0);
        assert_eq!(s.epsilon_at(1000), 0.05);
        assert_eq!(s.epsilon_at(10_000), 0.05);
        let mut prev = f64::INFINITY;
        for step in 0..1200 {
            let e = s.epsilon_at(step);
            assert!(e <= prev);
            prev = e;
        }
    }
}
