use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{IdmParams, SimError, VehicleKind, VehicleState};
use crate::metrics::{FdTrace, Phase};

/// Insertion cadence for [`RingState::load_vehicles_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadingOptions {
    /// Steps that must elapse after an insertion before the next one.
    pub min_interval_steps: u64,
    /// Give up if the target is not reached within this many steps.
    pub max_steps: u64,
}

impl Default for LoadingOptions {
    fn default() -> Self {
        Self { min_interval_steps: 50, max_steps: 500_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub step: u64,
    pub follower_id: u32,
    pub leader_id: u32,
    /// Bumper-to-bumper gap after the offending update (≤ 0).
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormationStrategy {
    Uniform,
    Platoon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RemovalPolicy {
    Random { seed: u64 },
    EveryKth,
}

/// The simulation's single source of truth: loop geometry, parameters,
/// vehicles sorted by position, and the step clock.
#[derive(Debug, Clone, PartialEq)]
pub struct RingState {
    pub length: f64,
    pub dt: f64,
    pub idm: IdmParams,
    pub vehicles: Vec<VehicleState>,
    pub step_count: u64,
    pub rng_seed: u64,
    pub(crate) next_id: u32,
    pub(crate) collision: Option<CollisionReport>,
}

impl RingState {
    pub fn new(length: f64, dt: f64, idm: IdmParams) -> Result<Self, SimError> {
        if !(length.is_finite() && length > 0.0) {
            return Err(SimError::InvalidRing(format!("length must be > 0, got {length}")));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(SimError::InvalidRing(format!("dt must be > 0, got {dt}")));
        }
        idm.validate()?;
        Ok(Self { length, dt, idm, vehicles: Vec::new(), step_count: 0, rng_seed: 0, next_id: 0, collision: None })
    }

    /// Ring of `n` identical vehicles at equal spacing, all at the IDM
    /// equilibrium speed for that spacing.
    pub fn equilibrium(length: f64, dt: f64, idm: IdmParams, n: usize) -> Result<Self, SimError> {
        let mut ring = Self::new(length, dt, idm)?;
        if n == 0 {
            return Ok(ring);
        }
        let spacing = length / n as f64;
        let speed = if n == 1 { idm.desired_speed } else { idm.equilibrium_speed(spacing - idm.vehicle_length) };
        for i in 0..n {
            ring.push_vehicle(VehicleKind::Human, i as f64 * spacing, speed)?;
        }
        Ok(ring)
    }

    /// Adds a vehicle and keeps the collection sorted. Returns its id.
    pub fn push_vehicle(&mut self, kind: VehicleKind, position: f64, speed: f64) -> Result<u32, SimError> {
        if !(position.is_finite() && speed.is_finite() && speed >= 0.0) {
            return Err(SimError::InvalidRing(format!("bad vehicle position {position} / speed {speed}")));
        }
        let id = self.next_id;
        self.next_id += 1;
        let vehicle = VehicleState {
            id,
            kind,
            position: position.rem_euclid(self.length),
            speed: speed.min(self.idm.desired_speed),
            last_accel: 0.0,
        };
        let at = self.vehicles.partition_point(|v| v.position <= vehicle.position);
        self.vehicles.insert(at, vehicle);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    /// Whether a collision has ended this run.
    pub fn is_terminal(&self) -> bool {
        self.collision.is_some()
    }

    pub fn collision(&self) -> Option<&CollisionReport> {
        self.collision.as_ref()
    }

    pub fn mean_speed(&self) -> f64 {
        if self.vehicles.is_empty() {
            0.0
        } else {
            self.vehicles.iter().map(|v| v.speed).sum::<f64>() / self.vehicles.len() as f64
        }
    }

    pub fn cav_count(&self) -> usize {
        self.vehicles.iter().filter(|v| v.kind == VehicleKind::Cav).count()
    }

    /// Most vehicles that fit at jam spacing `s0 + vehicle_length`.
    pub fn capacity(&self) -> usize {
        (self.length / (self.idm.min_gap + self.idm.vehicle_length)).floor() as usize
    }

    fn gap_by_index(&self, i: usize) -> f64 {
        let n = self.vehicles.len();
        let leader = &self.vehicles[(i + 1) % n];
        (leader.position - self.vehicles[i].position).rem_euclid(self.length) - self.idm.vehicle_length
    }

    /// Bumper-to-bumper distance from vehicle `id` to the next vehicle ahead.
    pub fn gap_to_leader(&self, id: u32) -> Result<f64, SimError> {
        if self.vehicles.len() < 2 {
            return Err(SimError::NoLeader);
        }
        let i = self.index_of(id)?;
        Ok(self.gap_by_index(i))
    }

    pub fn index_of(&self, id: u32) -> Result<usize, SimError> {
        self.vehicles.iter().position(|v| v.id == id).ok_or(SimError::UnknownVehicle(id))
    }

    /// Advances one time step with every CAV executing `cav_accel`.
    pub fn step(&mut self, cav_accel: f64) -> Option<CollisionReport> {
        let v0 = self.idm.desired_speed;
        self.step_with_desired_speed(cav_accel, v0)
    }

    /// Like [`step`](Self::step) but human drivers aim for `desired_speed`
    /// (capped at the IDM v0) instead of v0. Used by speed-limit controllers.
    ///
    /// A terminal ring is not advanced; its original report is returned.
    pub fn step_with_desired_speed(&mut self, cav_accel: f64, desired_speed: f64) -> Option<CollisionReport> {
        if let Some(report) = self.collision {
            return Some(report);
        }
        let n = self.vehicles.len();
        let dt = self.dt;
        let v_max = self.idm.desired_speed;
        let v0 = desired_speed.min(v_max);

        let gaps: Vec<f64> = if n >= 2 { (0..n).map(|i| self.gap_by_index(i)).collect() } else { Vec::new() };
        let mut accels = Vec::with_capacity(n);
        for (i, me) in self.vehicles.iter().enumerate() {
            let a = match me.kind {
                VehicleKind::Cav => cav_accel,
                VehicleKind::Human if n < 2 => self.idm.free_acceleration(me.speed, v0),
                VehicleKind::Human => {
                    let leader = &self.vehicles[(i + 1) % n];
                    // A non-positive gap only exists after a reported collision,
                    // which never reaches this point.
                    self.idm
                        .acceleration_with_v0(me.speed, leader.speed, gaps[i].max(f64::MIN_POSITIVE), v0)
                        .unwrap_or(-self.idm.max_decel)
                        .max(-self.idm.max_decel)
                }
            };
            accels.push(a);
        }

        let mut moves = Vec::with_capacity(n);
        for (vehicle, &a) in self.vehicles.iter_mut().zip(&accels) {
            let v = vehicle.speed;
            let raw = v + a * dt;
            let (v_new, dx) = if raw < 0.0 {
                // stops inside the step
                (0.0, if a < 0.0 { -v * v / (2.0 * a) } else { 0.0 })
            } else if raw > v_max {
                (v_max, 0.5 * (v + v_max) * dt)
            } else {
                (raw, v * dt + 0.5 * a * dt * dt)
            };
            vehicle.speed = v_new;
            vehicle.last_accel = a;
            moves.push(dx);
        }

        self.step_count += 1;
        let mut report = None;
        if n >= 2 {
            for i in 0..n {
                let j = (i + 1) % n;
                let gap = gaps[i] + moves[j] - moves[i];
                if gap <= 0.0 {
                    report = Some(CollisionReport {
                        step: self.step_count,
                        follower_id: self.vehicles[i].id,
                        leader_id: self.vehicles[j].id,
                        gap,
                    });
                    break;
                }
            }
        }
        for (vehicle, dx) in self.vehicles.iter_mut().zip(&moves) {
            vehicle.position = (vehicle.position + dx).rem_euclid(self.length);
        }
        if report.is_none() {
            // Cyclic order is intact; restore ascending order by rotation.
            if let Some(first) =
                self.vehicles.iter().enumerate().min_by(|a, b| a.1.position.total_cmp(&b.1.position)).map(|(i, _)| i)
            {
                self.vehicles.rotate_left(first);
            }
        } else {
            self.vehicles.sort_by(|a, b| a.position.total_cmp(&b.position));
        }
        self.collision = report;
        report
    }

    /// Inserts vehicles at position 0 until `target_count` are on the loop,
    /// stepping the simulation (all vehicles human-driven) between insertions.
    /// Uses [`LoadingOptions::default`].
    pub fn load_vehicles(&mut self, target_count: usize) -> Result<FdTrace, SimError> {
        self.load_vehicles_with(target_count, LoadingOptions::default())
    }

    /// Loading with an explicit insertion cadence. Returns the per-step
    /// loading-phase trace.
    ///
    /// A vehicle enters at position 0 with the speed of the vehicle ahead (v0 on
    /// an empty loop) when the follower-to-leader spacing around position 0
    /// exceeds `s0 + length + v·T`, position 0 lies at or past the middle of that gap,
    /// and the follower keeps at least `s0` plus `T` times its closing speed.
    pub fn load_vehicles_with(&mut self, target_count: usize, options: LoadingOptions) -> Result<FdTrace, SimError> {
        let capacity = self.capacity();
        if target_count > capacity {
            return Err(SimError::Capacity { requested: target_count, capacity });
        }
        let mut trace = FdTrace::new(Phase::Loading);
        let start = self.step_count;
        let mut since_insert = u64::MAX;
        while self.vehicles.len() < target_count {
            if self.is_terminal() {
                return Err(SimError::InvalidRing("collision during loading".into()));
            }
            if since_insert >= options.min_interval_steps {
                if let Some(speed) = self.insertion_speed() {
                    self.push_vehicle(VehicleKind::Human, 0.0, speed)?;
                    since_insert = 0;
                    if self.vehicles.len() >= target_count {
                        break;
                    }
                }
            }
            self.step(0.0);
            since_insert = since_insert.saturating_add(1);
            trace.record(self);
            if self.step_count - start > options.max_steps {
                return Err(SimError::LoadingStalled {
                    reached: self.vehicles.len(),
                    requested: target_count,
                    steps: self.step_count - start,
                });
            }
        }
        Ok(trace)
    }

    /// Speed for a vehicle inserted at position 0 right now, or `None` when the
    /// local gap is too short.
    fn insertion_speed(&self) -> Option<f64> {
        let p = &self.idm;
        let (Some(leader), Some(follower)) = (self.vehicles.first(), self.vehicles.last()) else {
            return Some(p.desired_speed);
        };
        let speed = leader.speed;
        // clear space ahead of and behind a vehicle whose front bumper sits at 0
        let ahead = leader.position - p.vehicle_length;
        let behind = self.length - follower.position - p.vehicle_length;
        // front-to-front spacing between follower and leader
        let spacing = ahead + behind + 2.0 * p.vehicle_length;
        let closing = (follower.speed - speed).max(0.0);
        let ok = spacing > p.min_gap + p.vehicle_length + speed * p.time_headway
            && ahead >= behind
            && behind > p.min_gap + closing * p.time_headway;
        ok.then_some(speed)
    }

    /// Deletes exactly `count` vehicles; survivors keep their order.
    pub fn remove_vehicles(&mut self, count: usize, policy: RemovalPolicy) -> Result<(), SimError> {
        let n = self.vehicles.len();
        if count == 0 {
            return Ok(());
        }
        if count >= n {
            return Err(SimError::RemovalUnderflow { requested: count, available: n });
        }
        let mut doomed = vec![false; n];
        match policy {
            RemovalPolicy::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for i in index::sample(&mut rng, n, count) {
                    doomed[i] = true;
                }
            }
            RemovalPolicy::EveryKth => {
                for i in spread_indices(n, count) {
                    doomed[i] = true;
                }
            }
        }
        let mut flags = doomed.into_iter();
        self.vehicles.retain(|_| !flags.next().unwrap_or(false));
        Ok(())
    }

    /// Marks exactly `cav_count` vehicles as CAVs and all others as human.
    pub fn apply_formation(&mut self, cav_count: usize, strategy: FormationStrategy) -> Result<(), SimError> {
        let n = self.vehicles.len();
        if cav_count > n {
            return Err(SimError::TooManyCavs { requested: cav_count, available: n });
        }
        self.revert_to_human();
        let chosen: Vec<usize> = match strategy {
            FormationStrategy::Uniform => spread_indices(n, cav_count),
            FormationStrategy::Platoon => (0..cav_count).collect(),
        };
        for i in chosen {
            self.vehicles[i].kind = VehicleKind::Cav;
        }
        Ok(())
    }

    pub fn revert_to_human(&mut self) {
        for v in &mut self.vehicles {
            v.kind = VehicleKind::Human;
        }
    }

    /// Checks the structural invariants a deserialized ring must satisfy.
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.length.is_finite() && self.length > 0.0 && self.dt.is_finite() && self.dt > 0.0) {
            return Err(SimError::InvalidRing("length and dt must be positive".into()));
        }
        self.idm.validate()?;
        let mut prev = f64::NEG_INFINITY;
        for v in &self.vehicles {
            if !(v.position >= 0.0 && v.position < self.length) {
                return Err(SimError::InvalidRing(format!("vehicle {} position {} off the loop", v.id, v.position)));
            }
            if !(v.speed >= 0.0 && v.speed <= self.idm.desired_speed) {
                return Err(SimError::InvalidRing(format!("vehicle {} speed {} out of bounds", v.id, v.speed)));
            }
            if v.position < prev {
                return Err(SimError::InvalidRing("vehicles not sorted by position".into()));
            }
            prev = v.position;
        }
        let mut ids: Vec<u32> = self.vehicles.iter().map(|v| v.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SimError::InvalidRing("duplicate vehicle id".into()));
        }
        Ok(())
    }
}

/// `count` indices out of `n` whose consecutive (cyclic) differences differ by at most one.
fn spread_indices(n: usize, count: usize) -> Vec<usize> {
    (0..count).map(|i| i * n / count).collect()
}
