//! Comparison controllers: unassisted IDM recovery, a tiered variable speed
//! limit, and the CAV-to-human switch-back experiment.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drl::{accel_for_action, DrlError, EnvSpec};
use crate::metrics::{measure, FdTrace, Phase};
use crate::neural::{argmax, QNetwork};
use crate::sim::{CollisionReport, RingSnapshot, RingState, SimError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid speed-limit policy: {0}")]
    InvalidPolicy(String),
    #[error("policy collided at step {} before reaching its flow peak", .0.step)]
    CollisionBeforePeak(CollisionReport),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Drl(#[from] DrlError),
}

/// Rolls the ring forward with every vehicle human-driven. One sample per step.
pub fn run_idm_recovery(snapshot: &RingSnapshot, steps: u64) -> Result<FdTrace, BaselineError> {
    let mut ring = snapshot.restore()?;
    ring.revert_to_human();
    let mut trace = FdTrace::new(Phase::Unloading);
    for _ in 0..steps {
        let collided = ring.step(0.0).is_some();
        trace.record(&ring);
        if collided {
            break;
        }
    }
    Ok(trace)
}

/// Loop measurement a speed-limit rule is keyed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VslMeasure {
    /// A rule fires when the loop mean speed (m/s) is below its threshold.
    MeanSpeed,
    /// A rule fires when the loop density (veh/km) is at or above its threshold.
    Density,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VslRule {
    pub threshold: f64,
    /// m/s
    pub limit: f64,
}

/// Tiered speed limit. Rules are listed from mildest to most severe
/// congestion; the most severe firing rule sets the limit, and v0 applies
/// when none fires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VslPolicy {
    pub measure: VslMeasure,
    pub rules: Vec<VslRule>,
    /// Steps between re-evaluations.
    pub cadence_steps: u64,
}

impl Default for VslPolicy {
    /// 30 m/s at mean speeds ≥ 15, 20 m/s at ≥ 8, 13 m/s below, re-evaluated
    /// every 60 s.
    fn default() -> Self {
        Self {
            measure: VslMeasure::MeanSpeed,
            rules: vec![VslRule { threshold: 15.0, limit: 20.0 }, VslRule { threshold: 8.0, limit: 13.0 }],
            cadence_steps: 600,
        }
    }
}

impl VslPolicy {
    pub fn validate(&self, v0: f64) -> Result<(), BaselineError> {
        let fail = |m: String| Err(BaselineError::InvalidPolicy(m));
        if self.cadence_steps == 0 {
            return fail("cadence_steps must be positive".into());
        }
        for r in &self.rules {
            if !(r.limit > 0.0 && r.limit <= v0) {
                return fail(format!("limit {} outside (0, {v0}]", r.limit));
            }
            if !r.threshold.is_finite() {
                return fail("thresholds must be finite".into());
            }
        }
        let ordered = self.rules.windows(2).all(|w| match self.measure {
            VslMeasure::MeanSpeed => w[1].threshold < w[0].threshold,
            VslMeasure::Density => w[1].threshold > w[0].threshold,
        });
        if !ordered {
            return fail("thresholds must be strictly ordered from mildest to most severe".into());
        }
        Ok(())
    }

    /// Limit selected for the ring's current state.
    pub fn limit_for(&self, ring: &RingState) -> f64 {
        let sample = measure(ring, Phase::Unloading);
        self.rules
            .iter()
            .rev()
            .find(|r| match self.measure {
                VslMeasure::MeanSpeed => sample.mean_speed < r.threshold,
                VslMeasure::Density => sample.density >= r.threshold,
            })
            .map_or(ring.idm.desired_speed, |r| r.limit)
    }
}

/// Re-evaluates a [`VslPolicy`] on its cadence and holds the active limit.
#[derive(Debug, Clone)]
pub struct VslController {
    policy: VslPolicy,
    active: f64,
    since_eval: u64,
}

impl VslController {
    pub fn new(policy: VslPolicy, ring: &RingState) -> Result<Self, BaselineError> {
        policy.validate(ring.idm.desired_speed)?;
        Ok(Self { policy, active: ring.idm.desired_speed, since_eval: u64::MAX })
    }

    /// Advances the ring one step under the speed limit and returns the limit
    /// that was in force.
    pub fn step(&mut self, ring: &mut RingState) -> (f64, Option<CollisionReport>) {
        if self.since_eval >= self.policy.cadence_steps {
            self.active = self.policy.limit_for(ring);
            self.since_eval = 0;
        }
        self.since_eval += 1;
        (self.active, ring.step_with_desired_speed(0.0, self.active))
    }
}

#[derive(Debug, Clone)]
pub struct VslRun {
    pub trace: FdTrace,
    /// Speed limit in force during each step.
    pub limits: Vec<f64>,
}

/// Runs `steps` steps of the ring under the speed-limit policy.
pub fn apply_vsl(ring: &mut RingState, policy: &VslPolicy, steps: u64) -> Result<VslRun, BaselineError> {
    let mut controller = VslController::new(policy.clone(), ring)?;
    let mut trace = FdTrace::new(Phase::Unloading);
    let mut limits = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let (limit, collision) = controller.step(ring);
        limits.push(limit);
        trace.record(ring);
        if collision.is_some() {
            break;
        }
    }
    Ok(VslRun { trace, limits })
}

/// Switch-back trigger and continuation length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchBackOptions {
    pub extra_steps: u64,
    /// Trailing window over which the running maximum must stall.
    pub window: u64,
    /// Fraction of the running maximum the current flow must reach.
    pub fraction: f64,
    /// Longest policy rollout searched for the peak.
    pub max_steps: u64,
}

impl Default for SwitchBackOptions {
    fn default() -> Self {
        Self { extra_steps: 200, window: 100, fraction: 0.99, max_steps: 6000 }
    }
}

#[derive(Debug, Clone)]
pub struct SwitchBack {
    /// Ring step count at the branch point.
    pub branch_step: u64,
    /// State both branches start from.
    pub snapshot: RingSnapshot,
    /// Branch sample followed by `extra_steps` under the policy.
    pub cav: FdTrace,
    /// Branch sample followed by `extra_steps` with every vehicle human.
    pub reverted: FdTrace,
}

fn greedy_accel(policy: &QNetwork, ring: &RingState, normalizer: f64) -> Result<f64, BaselineError> {
    let state = [(ring.mean_speed() / normalizer).clamp(0.0, 1.0)];
    Ok(accel_for_action(argmax(&policy.forward(&state).map_err(DrlError::from)?))?)
}

/// Rolls the greedy policy until its flow peaks, then continues two branches
/// from that state: one still under the policy, one reverted to IDM.
///
/// The peak is the first step, at least `window` steps in, where flow reaches
/// `fraction` of its running maximum and that maximum grew by less than
/// `1 / fraction` over the trailing `window` steps. If no step qualifies
/// within `max_steps`, the first global flow maximum of the rollout is used.
pub fn run_switch_back(
    policy: &QNetwork,
    spec: &EnvSpec,
    options: SwitchBackOptions,
) -> Result<SwitchBack, BaselineError> {
    let start = spec.snapshot.restore()?;
    let v_norm = spec.speed_normalizer;

    let mut ring = start.clone();
    let mut flows = Vec::new();
    let mut running_max = Vec::new();
    let mut branch = None;
    for t in 0..options.max_steps as usize {
        if let Some(c) = ring.step(greedy_accel(policy, &ring, v_norm)?) {
            return Err(BaselineError::CollisionBeforePeak(c));
        }
        let q = measure(&ring, Phase::Controlled).flow;
        let m = running_max.last().map_or(q, |&m: &f64| m.max(q));
        flows.push(q);
        running_max.push(m);
        let w = options.window as usize;
        if t >= w && q >= options.fraction * m && running_max[t - w] >= options.fraction * m {
            branch = Some(ring.clone());
            break;
        }
    }
    let branch_ring = match branch {
        Some(r) => r,
        None => {
            // first occurrence of the largest flow, as a step count
            let target =
                flows.iter().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &q)| {
                        if q > best.1 {
                            (i + 1, q)
                        } else {
                            best
                        }
                    },
                );
            let mut ring = start;
            for _ in 0..target.0 {
                ring.step(greedy_accel(policy, &ring, v_norm)?);
            }
            ring
        }
    };

    let snapshot = RingSnapshot::capture(&branch_ring);
    let mut cav_ring = branch_ring.clone();
    let mut cav = FdTrace::new(Phase::Controlled);
    cav.record(&cav_ring);
    for _ in 0..options.extra_steps {
        let collided = cav_ring.step(greedy_accel(policy, &cav_ring, v_norm)?).is_some();
        cav.record(&cav_ring);
        if collided {
            break;
        }
    }
    let mut human_ring = branch_ring;
    human_ring.revert_to_human();
    let mut reverted = FdTrace::new(Phase::Unloading);
    reverted.record(&human_ring);
    for _ in 0..options.extra_steps {
        let collided = human_ring.step(0.0).is_some();
        reverted.record(&human_ring);
        if collided {
            break;
        }
    }
    Ok(SwitchBack { branch_step: snapshot.step_count, snapshot, cav, reverted })
}

/// One line of the comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSummary {
    pub scenario: String,
    pub branch: String,
    pub peak_flow: f64,
    pub final_flow: f64,
    pub peak_mean_speed: f64,
}

impl BranchSummary {
    pub fn from_trace(scenario: &str, branch: &str, trace: &FdTrace) -> Self {
        let peak = trace.samples.iter().map(|s| s.flow).fold(0.0, f64::max);
        let speed = trace.samples.iter().map(|s| s.mean_speed).fold(0.0, f64::max);
        Self {
            scenario: scenario.into(),
            branch: branch.into(),
            peak_flow: peak,
            final_flow: trace.last().map_or(0.0, |s| s.flow),
            peak_mean_speed: speed,
        }
    }

    pub fn write_report<W: Write>(rows: &[BranchSummary], mut out: W) -> io::Result<()> {
        writeln!(out, "scenario,branch,peak_flow_veh_h,final_flow_veh_h,peak_mean_speed_mps")?;
        for r in rows {
            writeln!(out, "{},{},{},{},{}", r.scenario, r.branch, r.peak_flow, r.final_flow, r.peak_mean_speed)?;
        }
        out.flush()
    }
}
