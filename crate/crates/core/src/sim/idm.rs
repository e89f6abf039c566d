use serde::{Deserialize, Serialize};

use super::SimError;

/// Intelligent Driver Model parameters shared by every human-driven vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmParams {
    /// Desired (free-road) speed v0, m/s. Also the hard speed cap for every vehicle.
    pub desired_speed: f64,
    /// Safe time headway T, s.
    pub time_headway: f64,
    /// Maximum acceleration, m/s².
    pub max_accel: f64,
    /// Comfortable deceleration, m/s².
    pub comfortable_decel: f64,
    /// Acceleration exponent δ.
    pub accel_exponent: f64,
    /// Jam distance s0, m.
    pub min_gap: f64,
    pub vehicle_length: f64,
    /// Physical braking limit applied to human drivers in the simulator, m/s².
    /// The IDM law itself is unbounded in deceleration.
    #[serde(default = "default_max_decel")]
    pub max_decel: f64,
}

fn default_max_decel() -> f64 {
    9.0
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            desired_speed: 30.0,
            time_headway: 1.5,
            max_accel: 1.0,
            comfortable_decel: 2.0,
            accel_exponent: 4.0,
            min_gap: 2.0,
            vehicle_length: 5.0,
            max_decel: default_max_decel(),
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let fields = [
            ("desired_speed", self.desired_speed),
            ("time_headway", self.time_headway),
            ("max_accel", self.max_accel),
            ("comfortable_decel", self.comfortable_decel),
            ("accel_exponent", self.accel_exponent),
            ("min_gap", self.min_gap),
            ("vehicle_length", self.vehicle_length),
            ("max_decel", self.max_decel),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(SimError::InvalidParams(format!("{name} must be finite and > 0, got {value}")));
            }
        }
        if self.accel_exponent < 1.0 {
            return Err(SimError::InvalidParams(format!("accel_exponent must be >= 1, got {}", self.accel_exponent)));
        }
        Ok(())
    }

    /// Desired dynamic gap s*(v, Δv). The dynamic part is floored at zero so a
    /// leader pulling away never produces a braking term.
    pub fn desired_gap(&self, speed: f64, approach_rate: f64) -> f64 {
        let dynamic = speed * self.time_headway
            + speed * approach_rate / (2.0 * (self.max_accel * self.comfortable_decel).sqrt());
        self.min_gap + dynamic.max(0.0)
    }

    /// IDM acceleration for a follower at `speed` behind a leader at `leader_speed`
    /// with bumper-to-bumper `gap`, using `desired_speed` as v0.
    pub fn acceleration_with_v0(
        &self,
        speed: f64,
        leader_speed: f64,
        gap: f64,
        desired_speed: f64,
    ) -> Result<f64, SimError> {
        if gap.is_nan() || gap <= 0.0 {
            return Err(SimError::AlreadyColliding { gap });
        }
        let free = 1.0 - (speed / desired_speed).powf(self.accel_exponent);
        let interaction = (self.desired_gap(speed, speed - leader_speed) / gap).powi(2);
        Ok(self.max_accel * (free - interaction))
    }

    /// Free-road acceleration (no leader in range).
    pub fn free_acceleration(&self, speed: f64, desired_speed: f64) -> f64 {
        self.max_accel * (1.0 - (speed / desired_speed).powf(self.accel_exponent))
    }

    /// Steady-state speed for a homogeneous platoon with bumper gap `gap`:
    /// the root of `1 - (v/v0)^δ - ((s0 + vT)/gap)^2 = 0` on `[0, v0]`.
    pub fn equilibrium_speed(&self, gap: f64) -> f64 {
        if gap <= self.min_gap {
            return 0.0;
        }
        let residual = |v: f64| {
            1.0 - (v / self.desired_speed).powf(self.accel_exponent)
                - ((self.min_gap + v * self.time_headway) / gap).powi(2)
        };
        let (mut lo, mut hi) = (0.0, self.desired_speed);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if residual(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// IDM acceleration of `follower` given its leader and the bumper gap between them.
pub fn idm_acceleration(
    follower: &super::VehicleState,
    leader: &super::VehicleState,
    gap: f64,
    params: &IdmParams,
) -> Result<f64, SimError> {
    params.acceleration_with_v0(follower.speed, leader.speed, gap, params.desired_speed)
}
