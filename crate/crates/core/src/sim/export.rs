use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::{IdmParams, RingState, SimError, VehicleState};

pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

/// Serializable ring document: geometry, IDM parameters and the vehicle list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingSnapshot {
    pub format_version: u32,
    pub length: f64,
    pub dt: f64,
    pub step_count: u64,
    pub rng_seed: u64,
    pub next_id: u32,
    pub idm: IdmParams,
    pub vehicles: Vec<VehicleState>,
}

impl RingSnapshot {
    pub fn capture(ring: &RingState) -> Self {
        Self {
            format_version: SNAPSHOT_FORMAT_VERSION,
            length: ring.length,
            dt: ring.dt,
            step_count: ring.step_count,
            rng_seed: ring.rng_seed,
            next_id: ring.next_id,
            idm: ring.idm,
            vehicles: ring.vehicles.clone(),
        }
    }

    /// Rebuilds a validated, non-terminal ring.
    pub fn restore(&self) -> Result<RingState, SimError> {
        if self.format_version != SNAPSHOT_FORMAT_VERSION {
            return Err(SimError::Snapshot(format!(
                "unsupported format version {} (expected {SNAPSHOT_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut ring = RingState::new(self.length, self.dt, self.idm)?;
        ring.vehicles = self.vehicles.clone();
        ring.step_count = self.step_count;
        ring.rng_seed = self.rng_seed;
        ring.next_id = self.next_id;
        ring.validate()?;
        if ring.vehicles.iter().any(|v| v.id >= self.next_id) {
            return Err(SimError::Snapshot("vehicle id not below next_id".into()));
        }
        Ok(ring)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Snapshot(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TrajectoryRow {
    step: u64,
    vehicle: VehicleState,
}

/// Per-vehicle trajectory rows accumulated over a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    rows: Vec<TrajectoryRow>,
}

impl TrajectoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, ring: &RingState) {
        self.rows.extend(ring.vehicles.iter().map(|&vehicle| TrajectoryRow { step: ring.step_count, vehicle }));
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `(step, id, kind, position, speed)` for every row, in recording order.
    pub fn points(&self) -> impl Iterator<Item = (u64, u32, super::VehicleKind, f64, f64)> + '_ {
        self.rows.iter().map(|r| (r.step, r.vehicle.id, r.vehicle.kind, r.vehicle.position, r.vehicle.speed))
    }

    pub fn write_table<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "step,vehicle_id,kind,position_m,speed_mps,accel_mps2")?;
        for r in &self.rows {
            let v = &r.vehicle;
            writeln!(out, "{},{},{},{},{},{}", r.step, v.id, v.kind.as_str(), v.position, v.speed, v.last_accel)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{FormationStrategy, VehicleKind};

    #[test]
    fn snapshot_round_trip_is_exact() {
        let mut ring = RingState::equilibrium(1000.0, 0.1, IdmParams::default(), 37).unwrap();
        ring.apply_formation(9, FormationStrategy::Uniform).unwrap();
        for _ in 0..123 {
            ring.step(0.3);
        }
        let text = RingSnapshot::capture(&ring).to_json();
        let back = RingSnapshot::from_json(&text).unwrap().restore().unwrap();
        assert_eq!(back, ring);
    }

    #[test]
    fn corrupt_snapshots_are_rejected() {
        let ring = RingState::equilibrium(1000.0, 0.1, IdmParams::default(), 3).unwrap();
        let mut snap = RingSnapshot::capture(&ring);
        snap.format_version = 99;
        assert!(snap.restore().is_err());
        let mut snap = RingSnapshot::capture(&ring);
        snap.vehicles[1].position = 2000.0;
        assert!(snap.restore().is_err());
        let mut snap = RingSnapshot::capture(&ring);
        snap.vehicles.swap(0, 2);
        assert!(snap.restore().is_err());
        assert!(RingSnapshot::from_json("{\"format_version\": 1}").is_err());
        assert!(RingSnapshot::from_json("not json").is_err());
    }

    #[test]
    fn trajectory_table_layout() {
        let mut ring = RingState::new(1000.0, 0.1, IdmParams::default()).unwrap();
        ring.push_vehicle(VehicleKind::Cav, 10.0, 5.0).unwrap();
        let mut log = TrajectoryLog::new();
        log.record(&ring);
        let mut buf = Vec::new();
        log.write_table(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "step,vehicle_id,kind,position_m,speed_mps,accel_mps2\n0,0,cav,10,5,0\n");
    }
}
