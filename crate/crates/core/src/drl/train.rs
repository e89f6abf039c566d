use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    accel_for_action, select_action, DrlError, EnvSpec, Environment, EpsilonSchedule, ReplayBuffer, Transition,
};
use crate::metrics::{FdTrace, Phase};
use crate::neural::{argmax, AdamState, LrSchedule, MlpSpec, QNetwork};
use crate::sim::{CollisionReport, TrajectoryLog};

/// Learner hyperparameters. Training stops at `episodes` or
/// `total_train_steps`, whichever comes first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdqnConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub episodes: u64,
    pub total_train_steps: u64,
    /// Learner updates between hard copies of the online net into the target net.
    pub target_sync_period: u64,
    /// Number of stacked observations per state; only 1 is supported.
    pub window_length: usize,
    pub min_buffer_before_learning: usize,
    pub replay_capacity: usize,
    pub epsilon: EpsilonSchedule,
    pub lr: LrSchedule,
    pub net: MlpSpec,
    /// Multiplies rewards before they enter the replay buffer so Q-values stay
    /// near unit scale; episode records always report unscaled rewards.
    pub reward_scale: f64,
    /// Set from the scenario seed at run time rather than from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DdqnConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl DdqnConfig {
    /// Full-size network and step budget.
    pub fn full() -> Self {
        Self {
            gamma: 0.9,
            batch_size: 32,
            episodes: 5000,
            total_train_steps: 1_000_000,
            target_sync_period: 1000,
            window_length: 1,
            min_buffer_before_learning: 1000,
            replay_capacity: 100_000,
            epsilon: EpsilonSchedule { start: 1.0, end: 0.05, decay_steps: 500_000 },
            lr: LrSchedule { base: 0.001, final_lr: 0.0, total_steps: 1_000_000 },
            net: MlpSpec::default(),
            reward_scale: 0.001,
            seed: 0,
        }
    }

    /// Reduced network and budget for desktop-scale runs.
    pub fn desk() -> Self {
        Self {
            episodes: 500,
            total_train_steps: 150_000,
            target_sync_period: 250,
            epsilon: EpsilonSchedule { start: 1.0, end: 0.05, decay_steps: 10_000 },
            lr: LrSchedule { base: 0.001, final_lr: 0.0, total_steps: 150_000 },
            net: MlpSpec::desk(),
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<(), DrlError> {
        let fail = |m: &str| Err(DrlError::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail("gamma must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.batch_size > self.replay_capacity {
            return fail("batch_size must be positive and at most replay_capacity");
        }
        if self.target_sync_period == 0 {
            return fail("target_sync_period must be positive");
        }
        if self.window_length != 1 {
            return fail("window_length other than 1 is not supported");
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return fail("reward_scale must be positive");
        }
        let eps = &self.epsilon;
        if !(0.0..=1.0).contains(&eps.start) || !(0.0..=1.0).contains(&eps.end) || eps.end > eps.start {
            return fail("epsilon must decay within [0, 1]");
        }
        if !(self.lr.base >= 0.0 && self.lr.final_lr >= 0.0 && self.lr.final_lr <= self.lr.base) {
            return fail("learning rate must be non-negative and non-increasing");
        }
        self.net.validate()?;
        Ok(())
    }
}

/// Double-DQN regression targets: the online net picks the next action, the
/// target net values it. Terminal transitions do not bootstrap.
pub fn ddqn_targets(
    batch: &[&Transition],
    online: &QNetwork,
    target: &QNetwork,
    gamma: f64,
) -> Result<Vec<f64>, DrlError> {
    batch
        .iter()
        .map(|t| {
            if t.done {
                return Ok(t.reward);
            }
            let pick = argmax(&online.forward(&t.next_state)?);
            Ok(t.reward + gamma * target.forward(&t.next_state)?[pick])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub steps: u64,
    pub cumulative_reward: f64,
    pub collided: bool,
    pub succeeded: bool,
}

impl EpisodeRecord {
    pub const TABLE_HEADER: &'static str = "episode,steps,cumulative_reward,collided,succeeded";

    pub fn write_table<W: Write>(records: &[EpisodeRecord], mut out: W) -> io::Result<()> {
        writeln!(out, "{}", Self::TABLE_HEADER)?;
        for r in records {
            writeln!(out, "{},{},{},{},{}", r.episode, r.steps, r.cumulative_reward, r.collided, r.succeeded)?;
        }
        out.flush()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: QNetwork,
    pub optimizer: AdamState,
    pub episodes: Vec<EpisodeRecord>,
    pub env_steps: u64,
    pub learner_steps: u64,
}

/// Trains a Q-network on `env`; see [`train_with_hook`].
pub fn train<E: Environment>(env: &mut E, config: &DdqnConfig) -> Result<TrainOutcome, DrlError> {
    train_with_hook(env, config, |_, _, _| Ok(()))
}

/// Trains a Q-network, calling `hook` after every episode with the finished
/// record and the current learner state (used for periodic checkpoints).
/// Fully determined by `config.seed`.
pub fn train_with_hook<E, F>(env: &mut E, config: &DdqnConfig, mut hook: F) -> Result<TrainOutcome, DrlError>
where
    E: Environment,
    F: FnMut(&EpisodeRecord, &QNetwork, &AdamState) -> Result<(), DrlError>,
{
    config.validate()?;
    if config.net.input_dim != env.observation_dim() || config.net.output_dim != env.action_count() {
        return Err(DrlError::Config(format!(
            "network maps {} inputs to {} outputs, environment has {} observations and {} actions",
            config.net.input_dim,
            config.net.output_dim,
            env.observation_dim(),
            env.action_count()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut online = QNetwork::init(&config.net, config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?;
    let mut target = online.clone();
    let mut optimizer = AdamState::new(&online);
    let mut buffer = ReplayBuffer::new(config.replay_capacity);
    let learn_after = config.min_buffer_before_learning.max(config.batch_size);

    let mut records = Vec::new();
    let mut env_steps = 0u64;
    let mut learner_steps = 0u64;
    let mut states = Vec::with_capacity(config.batch_size * config.net.input_dim);
    let mut actions = Vec::with_capacity(config.batch_size);

    for episode in 0..config.episodes {
        if env_steps >= config.total_train_steps {
            break;
        }
        let mut state = env.reset()?;
        let mut record = EpisodeRecord { episode, steps: 0, cumulative_reward: 0.0, collided: false, succeeded: false };
        loop {
            let q = online.forward(&state)?;
            let action = select_action(&q, config.epsilon.epsilon_at(env_steps), &mut rng);
            let result = env.step(action)?;
            record.steps += 1;
            record.cumulative_reward += result.reward;
            record.collided |= result.info.collision;
            record.succeeded |= result.info.success;
            env_steps += 1;
            buffer.push(Transition {
                state: std::mem::take(&mut state),
                action,
                reward: result.reward * config.reward_scale,
                next_state: result.state.clone(),
                done: result.terminal,
            });
            state = result.state;

            if buffer.len() >= learn_after {
                let batch = buffer.sample(config.batch_size, &mut rng)?;
                let targets = ddqn_targets(&batch, &online, &target, config.gamma)?;
                states.clear();
                actions.clear();
                for t in &batch {
                    states.extend_from_slice(&t.state);
                    actions.push(t.action);
                }
                let (loss, grads) = online.loss_and_gradients(&states, &actions, &targets)?;
                if !loss.is_finite() {
                    return Err(DrlError::Diverged { step: env_steps, loss });
                }
                optimizer.step(&mut online, &grads, config.lr.lr_at(env_steps))?;
                learner_steps += 1;
                if learner_steps.is_multiple_of(config.target_sync_period) {
                    target.copy_from(&online);
                }
            }
            if result.done || env_steps >= config.total_train_steps {
                break;
            }
        }
        hook(&record, &online, &optimizer)?;
        records.push(record);
    }
    Ok(TrainOutcome { network: online, optimizer, episodes: records, env_steps, learner_steps })
}

/// Result of a greedy rollout.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    /// One sample per executed step.
    pub trace: FdTrace,
    /// Initial state plus every executed step.
    pub trajectory: TrajectoryLog,
    pub collision: Option<CollisionReport>,
    /// First step whose flow exceeded the success threshold.
    pub first_success_step: Option<u64>,
    pub actions: Vec<usize>,
}

/// Greedy (ε = 0) rollout of `policy` from the spec's snapshot for `steps`
/// steps. Unlike training episodes, success does not stop the rollout; a
/// collision does.
pub fn evaluate(policy: &QNetwork, spec: &EnvSpec, steps: u64) -> Result<EvalOutcome, DrlError> {
    spec.validate()?;
    if policy.spec().input_dim != 1 || policy.spec().output_dim != super::ACTION_ACCELS.len() {
        return Err(DrlError::Config("policy does not match the traffic environment".into()));
    }
    let mut ring = spec.snapshot.restore()?;
    let mut trace = FdTrace::new(Phase::Controlled);
    let mut trajectory = TrajectoryLog::new();
    trajectory.record(&ring);
    let mut first_success_step = None;
    let mut collision = None;
    let mut actions = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let state = [(ring.mean_speed() / spec.speed_normalizer).clamp(0.0, 1.0)];
        let action = argmax(&policy.forward(&state)?);
        actions.push(action);
        collision = ring.step(accel_for_action(action)?);
        trace.record(&ring);
        trajectory.record(&ring);
        if collision.is_some() {
            break;
        }
        let flow = trace.last().map_or(0.0, |s| s.flow);
        if first_success_step.is_none() && flow > spec.success_flow_threshold {
            first_success_step = Some(ring.step_count);
        }
    }
    Ok(EvalOutcome { trace, trajectory, collision, first_success_step, actions })
}
