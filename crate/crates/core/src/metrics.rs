//! Loop-wide macroscopic measurements and fundamental-diagram traces.
//!
//! Densities are veh/km, flows veh/h, speeds m/s. Every sample is an
//! instantaneous space-mean over the whole loop, so `q = k·u` holds by
//! construction.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::RingState;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("time headway is undefined at zero flow")]
    ZeroFlow,
    #[error("density {density} veh/km lies outside the trace range [{min}, {max}]")]
    OutOfRange { density: f64, min: f64, max: f64 },
    #[error("trace is empty")]
    EmptyTrace,
    #[error("unknown phase label {0:?}")]
    UnknownPhase(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Loading,
    Unloading,
    Controlled,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Loading => "loading",
            Phase::Unloading => "unloading",
            Phase::Controlled => "controlled",
        })
    }
}

impl FromStr for Phase {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loading" => Ok(Phase::Loading),
            "unloading" => Ok(Phase::Unloading),
            "controlled" => Ok(Phase::Controlled),
            other => Err(MetricsError::UnknownPhase(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdSample {
    /// veh/km
    pub density: f64,
    /// veh/h
    pub flow: f64,
    /// m/s
    pub mean_speed: f64,
    pub phase: Phase,
    pub step: u64,
}

/// Space-mean loop measurement. An empty loop yields the all-zero sample.
pub fn measure(ring: &RingState, phase: Phase) -> FdSample {
    let n = ring.vehicles.len();
    let step = ring.step_count;
    if n == 0 {
        return FdSample { density: 0.0, flow: 0.0, mean_speed: 0.0, phase, step };
    }
    let density = n as f64 / ring.length * 1000.0;
    let mean_speed = ring.mean_speed();
    FdSample { density, flow: density * mean_speed * 3.6, mean_speed, phase, step }
}

/// Loop-average time headway in seconds, `3600 / q`.
pub fn mean_time_headway(sample: &FdSample) -> Result<f64, MetricsError> {
    if sample.flow > 0.0 {
        Ok(3600.0 / sample.flow)
    } else {
        Err(MetricsError::ZeroFlow)
    }
}

/// Time-ordered sequence of samples with a phase label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdTrace {
    pub phase: Phase,
    pub samples: Vec<FdSample>,
}

impl FdTrace {
    pub fn new(phase: Phase) -> Self {
        Self { phase, samples: Vec::new() }
    }

    pub fn from_samples(phase: Phase, samples: Vec<FdSample>) -> Self {
        Self { phase, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Appends a sample. Samples whose step does not advance past the last one
    /// are dropped so the trace stays strictly increasing in step.
    pub fn push(&mut self, sample: FdSample) {
        if self.samples.last().is_none_or(|last| sample.step > last.step) {
            self.samples.push(sample);
        }
    }

    pub fn record(&mut self, ring: &RingState) {
        self.push(measure(ring, self.phase));
    }

    pub fn last(&self) -> Option<&FdSample> {
        self.samples.last()
    }

    /// Mean flow per distinct density, sorted by density.
    pub fn density_profile(&self) -> Vec<(f64, f64)> {
        let mut sorted: Vec<(f64, f64)> = self.samples.iter().map(|s| (s.density, s.flow)).collect();
        average_ties(&mut sorted)
    }

    /// Mean speed over the final `fraction` of samples (at least one sample).
    pub fn tail_mean_speed(&self, fraction: f64) -> Option<f64> {
        tail_mean(&self.samples, fraction, |s| s.mean_speed)
    }

    pub fn tail_mean_flow(&self, fraction: f64) -> Option<f64> {
        tail_mean(&self.samples, fraction, |s| s.flow)
    }

    /// Keeps every `factor`-th sample (the first sample is always kept).
    pub fn decimated(&self, factor: usize) -> FdTrace {
        let factor = factor.max(1);
        FdTrace { phase: self.phase, samples: self.samples.iter().step_by(factor).copied().collect() }
    }

    pub fn write_table<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "step,phase,density_veh_km,flow_veh_h,mean_speed_mps")?;
        for s in &self.samples {
            writeln!(out, "{},{},{},{},{}", s.step, s.phase, s.density, s.flow, s.mean_speed)?;
        }
        Ok(())
    }
}

fn tail_mean(samples: &[FdSample], fraction: f64, f: impl Fn(&FdSample) -> f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let take = ((samples.len() as f64 * fraction).ceil() as usize).clamp(1, samples.len());
    let tail = &samples[samples.len() - take..];
    Some(tail.iter().map(f).sum::<f64>() / take as f64)
}

/// Sorts `(density, flow)` pairs by density and averages flows at equal density.
fn average_ties(points: &mut [(f64, f64)]) -> Vec<(f64, f64)> {
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < points.len() {
        let k = points[i].0;
        let mut j = i;
        let mut sum = 0.0;
        while j < points.len() && points[j].0 == k {
            sum += points[j].1;
            j += 1;
        }
        out.push((k, sum / (j - i) as f64));
        i = j;
    }
    out
}

/// Sample with the highest flow; the earliest one wins ties.
pub fn peak_flow(trace: &FdTrace) -> Result<FdSample, MetricsError> {
    let mut best: Option<&FdSample> = None;
    for s in &trace.samples {
        if best.is_none_or(|b| s.flow > b.flow) {
            best = Some(s);
        }
    }
    best.copied().ok_or(MetricsError::EmptyTrace)
}

/// Piecewise-linear interpolation over density-sorted points.
fn interpolate(points: &[(f64, f64)], density: f64) -> Result<f64, MetricsError> {
    let (Some(first), Some(last)) = (points.first(), points.last()) else {
        return Err(MetricsError::EmptyTrace);
    };
    if density < first.0 || density > last.0 {
        return Err(MetricsError::OutOfRange { density, min: first.0, max: last.0 });
    }
    let idx = points.partition_point(|p| p.0 < density);
    if points[idx].0 == density {
        return Ok(points[idx].1);
    }
    let (k0, q0) = points[idx - 1];
    let (k1, q1) = points[idx];
    Ok(q0 + (q1 - q0) * (density - k0) / (k1 - k0))
}

/// The part of a trace used for branch comparison: a loading trace is cut at
/// its flow peak (the rising sub-branch); other phases are used whole.
fn branch_points(trace: &FdTrace) -> Result<Vec<(f64, f64)>, MetricsError> {
    if trace.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    let mut points: Vec<(f64, f64)> = match trace.phase {
        Phase::Loading => {
            let peak = peak_flow(trace)?;
            trace.samples.iter().filter(|s| s.density <= peak.density).map(|s| (s.density, s.flow)).collect()
        }
        _ => trace.samples.iter().map(|s| (s.density, s.flow)).collect(),
    };
    Ok(average_ties(&mut points))
}

/// Flow difference `q_loading(k) - q_unloading(k)` at density `k`.
pub fn hysteresis_gap(loading: &FdTrace, unloading: &FdTrace, density: f64) -> Result<f64, MetricsError> {
    let a = interpolate(&branch_points(loading)?, density)?;
    let b = interpolate(&branch_points(unloading)?, density)?;
    Ok(a - b)
}

/// Per-density comparison of two branches at every density present in both.
/// Returns `(density, flow_a, flow_b)` triples sorted by density.
pub fn matched_densities(a: &FdTrace, b: &FdTrace) -> Vec<(f64, f64, f64)> {
    let pa = a.density_profile();
    let pb = b.density_profile();
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < pa.len() && j < pb.len() {
        match pa[i].0.total_cmp(&pb[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push((pa[i].0, pa[i].1, pb[j].1));
                i += 1;
                j += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{IdmParams, RingState, VehicleKind};
    use proptest::prelude::*;

    fn sample(density: f64, flow: f64, step: u64, phase: Phase) -> FdSample {
        FdSample { density, flow, mean_speed: if density > 0.0 { flow / density / 3.6 } else { 0.0 }, phase, step }
    }

    fn trace(phase: Phase, pts: &[(f64, f64)]) -> FdTrace {
        FdTrace::from_samples(phase, pts.iter().enumerate().map(|(i, &(k, q))| sample(k, q, i as u64, phase)).collect())
    }

    fn ring_with_speeds(n: usize, speed: f64) -> RingState {
        let mut ring = RingState::new(1000.0, 0.1, IdmParams::default()).unwrap();
        let spacing = 1000.0 / n.max(1) as f64;
        for i in 0..n {
            ring.push_vehicle(VehicleKind::Human, i as f64 * spacing, speed).unwrap();
        }
        ring
    }

    #[test]
    fn empty_loop_measures_zero() {
        let s = measure(&ring_with_speeds(0, 0.0), Phase::Loading);
        assert_eq!((s.density, s.flow, s.mean_speed), (0.0, 0.0, 0.0));
    }

    #[test]
    fn uniform_speed_measurement() {
        let s = measure(&ring_with_speeds(50, 10.0), Phase::Loading);
        assert!((s.density - 50.0).abs() < 1e-12);
        assert!((s.flow - 1800.0).abs() < 1e-9);
        let jam = measure(&ring_with_speeds(68, 0.0), Phase::Unloading);
        assert!((jam.density - 68.0).abs() < 1e-12);
        assert_eq!(jam.flow, 0.0);
    }

    #[test]
    fn headway_from_flow() {
        let h = |q| mean_time_headway(&sample(50.0, q, 0, Phase::Loading)).unwrap();
        assert!((h(1800.0) - 2.0).abs() < 1e-12);
        assert!((h(3600.0) - 1.0).abs() < 1e-12);
        assert!((h(1412.0) - 2.549).abs() < 1e-3);
        assert_eq!(mean_time_headway(&sample(50.0, 0.0, 0, Phase::Loading)), Err(MetricsError::ZeroFlow));
    }

    #[test]
    fn hysteresis_gap_interpolates() {
        let l = trace(Phase::Loading, &[(10.0, 600.0), (20.0, 1200.0)]);
        let u = trace(Phase::Unloading, &[(10.0, 400.0), (20.0, 800.0)]);
        assert!((hysteresis_gap(&l, &u, 15.0).unwrap() - 300.0).abs() < 1e-12);
        assert_eq!(hysteresis_gap(&l, &l.clone(), 12.5).unwrap(), 0.0);
        assert!(matches!(hysteresis_gap(&l, &u, 25.0), Err(MetricsError::OutOfRange { .. })));
    }

    #[test]
    fn loading_branch_is_cut_at_its_peak() {
        let l = trace(Phase::Loading, &[(10.0, 600.0), (30.0, 1500.0), (50.0, 1100.0)]);
        let u = trace(Phase::Unloading, &[(10.0, 500.0), (50.0, 900.0)]);
        assert!(hysteresis_gap(&l, &u, 20.0).is_ok());
        assert!(matches!(hysteresis_gap(&l, &u, 40.0), Err(MetricsError::OutOfRange { .. })));
    }

    #[test]
    fn density_ties_are_averaged() {
        let t = trace(Phase::Unloading, &[(20.0, 100.0), (10.0, 50.0), (20.0, 300.0)]);
        assert_eq!(t.density_profile(), vec![(10.0, 50.0), (20.0, 200.0)]);
    }

    #[test]
    fn peak_flow_cases() {
        let single = trace(Phase::Loading, &[(10.0, 600.0)]);
        assert_eq!(peak_flow(&single).unwrap().flow, 600.0);
        let t = trace(Phase::Loading, &[(10.0, 600.0), (30.0, 1500.0), (50.0, 1100.0)]);
        let p = peak_flow(&t).unwrap();
        assert_eq!((p.density, p.flow), (30.0, 1500.0));
        let tie = trace(Phase::Loading, &[(20.0, 900.0), (40.0, 900.0)]);
        assert_eq!(peak_flow(&tie).unwrap().density, 20.0);
        assert_eq!(peak_flow(&FdTrace::new(Phase::Loading)), Err(MetricsError::EmptyTrace));
    }

    #[test]
    fn push_keeps_steps_strictly_increasing() {
        let mut t = FdTrace::new(Phase::Loading);
        t.push(sample(1.0, 1.0, 3, Phase::Loading));
        t.push(sample(1.0, 1.0, 3, Phase::Loading));
        t.push(sample(1.0, 1.0, 2, Phase::Loading));
        t.push(sample(1.0, 1.0, 4, Phase::Loading));
        assert_eq!(t.samples.iter().map(|s| s.step).collect::<Vec<_>>(), vec![3, 4]);
    }

    #[test]
    fn phase_labels_round_trip() {
        for p in [Phase::Loading, Phase::Unloading, Phase::Controlled] {
            assert_eq!(p.to_string().parse::<Phase>().unwrap(), p);
        }
        assert!("bogus".parse::<Phase>().is_err());
    }

    proptest! {
        #[test]
        fn flow_identity_and_headway(speeds in proptest::collection::vec(0.0f64..30.0, 1..80)) {
            let mut ring = RingState::new(1000.0, 0.1, IdmParams::default()).unwrap();
            let spacing = 1000.0 / speeds.len() as f64;
            for (i, v) in speeds.iter().enumerate() {
                ring.push_vehicle(VehicleKind::Human, i as f64 * spacing, *v).unwrap();
            }
            let s = measure(&ring, Phase::Controlled);
            let q = s.density * s.mean_speed * 3.6;
            prop_assert!((s.flow - q).abs() <= 1e-9 * q.abs().max(1e-300));
            prop_assert!(s.density >= 0.0 && s.flow >= 0.0);
            if s.flow > 0.0 {
                let h = mean_time_headway(&s).unwrap();
                prop_assert!((h * s.flow - 3600.0).abs() < 1e-9);
            }
        }

        #[test]
        fn hysteresis_gap_is_antisymmetric(
            qa in proptest::collection::vec(0.0f64..2500.0, 5),
            qb in proptest::collection::vec(0.0f64..2500.0, 5),
            k in 10.0f64..50.0,
        ) {
            let ks = [10.0, 20.0, 30.0, 40.0, 50.0];
            let pa: Vec<_> = ks.iter().copied().zip(qa).collect();
            let pb: Vec<_> = ks.iter().copied().zip(qb).collect();
            let a = trace(Phase::Unloading, &pa);
            let b = trace(Phase::Unloading, &pb);
            let ab = hysteresis_gap(&a, &b, k).unwrap();
            let ba = hysteresis_gap(&b, &a, k).unwrap();
            prop_assert!((ab + ba).abs() < 1e-9);
        }
    }
}
