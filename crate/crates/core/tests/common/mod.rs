#![allow(dead_code)]

use ringflow::drl::{DdqnConfig, DrlError, Environment, EpsilonSchedule, StepInfo, StepResult};
use ringflow::neural::{LrSchedule, MlpSpec};

/// Two states, two actions: action `a` moves to state `a` and pays
/// `REWARDS[s][a]`. Continuing task cut into fixed-length episodes.
pub struct ToyMdp {
    pub state: usize,
    pub steps: u64,
    pub episode_len: u64,
}

pub const TOY_REWARDS: [[f64; 2]; 2] = [[0.3, 0.0], [0.0, 0.5]];

impl ToyMdp {
    pub fn new(episode_len: u64) -> Self {
        Self { state: 0, steps: 0, episode_len }
    }
}

impl Environment for ToyMdp {
    fn observation_dim(&self) -> usize {
        1
    }

    fn action_count(&self) -> usize {
        2
    }

    fn reset(&mut self) -> Result<Vec<f64>, DrlError> {
        self.state = 0;
        self.steps = 0;
        Ok(vec![0.0])
    }

    fn step(&mut self, action: usize) -> Result<StepResult, DrlError> {
        if action > 1 {
            return Err(DrlError::BadAction(action));
        }
        let reward = TOY_REWARDS[self.state][action];
        self.state = action;
        self.steps += 1;
        Ok(StepResult {
            state: vec![self.state as f64],
            reward,
            done: self.steps >= self.episode_len,
            terminal: false,
            info: StepInfo { flow: 0.0, mean_speed: 0.0, collision: false, success: false },
        })
    }
}

/// Optimal action values by value iteration, iterated to a fixed point.
pub fn toy_q_star(gamma: f64) -> [[f64; 2]; 2] {
    let mut v = [0.0f64; 2];
    loop {
        let q = [0, 1].map(|s| [0, 1].map(|a| TOY_REWARDS[s][a] + gamma * v[a]));
        let next = [q[0][0].max(q[0][1]), q[1][0].max(q[1][1])];
        if (next[0] - v[0]).abs() < 1e-14 && (next[1] - v[1]).abs() < 1e-14 {
            return q;
        }
        v = next;
    }
}

/// Learner settings that solve the toy MDP within a 20k-step budget.
pub fn toy_config(seed: u64) -> DdqnConfig {
    DdqnConfig {
        episodes: 1000,
        total_train_steps: 20_000,
        target_sync_period: 200,
        min_buffer_before_learning: 500,
        epsilon: EpsilonSchedule { start: 1.0, end: 0.05, decay_steps: 10_000 },
        lr: LrSchedule { base: 0.001, final_lr: 0.0, total_steps: 20_000 },
        net: MlpSpec { input_dim: 1, hidden_dims: vec![32, 32], output_dim: 2 },
        reward_scale: 1.0,
        seed,
        ..DdqnConfig::desk()
    }
}

#[test]
fn value_iteration_oracle_by_hand() {
    // V(1) = 0.5 / 0.1 = 5; V(0) = max(0.3 / 0.1, 0.9 · 5) = 4.5
    let q = toy_q_star(0.9);
    let expect = [[0.3 + 0.9 * 4.5, 0.9 * 5.0], [0.9 * 4.5, 0.5 + 0.9 * 5.0]];
    for s in 0..2 {
        for a in 0..2 {
            assert!((q[s][a] - expect[s][a]).abs() < 1e-9);
        }
    }
}
