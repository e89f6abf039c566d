//! Minimum number of CAVs needed to restore a previous loop-average headway.
//!
//! After vehicles leave, the average time headway of the remaining `N` grows
//! from `h_prev` to `h_cur`. If `n` of them are CAVs driving at a tighter
//! headway `h_cav`, the blended average is `((N - n)·h_cur + n·h_cav) / N`;
//! solving for the blend to equal `h_prev` gives
//! `n = N·(h_prev - h_cur) / (h_cav - h_cur)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadwayScenario {
    /// Average time headway before the departure, s.
    pub prev_headway: f64,
    /// Average time headway after the departure, s.
    pub cur_headway: f64,
    /// Vehicles remaining on the road.
    pub total_vehicles: u32,
    /// Desired time headway of a CAV, s.
    pub cav_headway: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum MprError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("CAV headway equals the current headway; no CAV count changes the average")]
    Degenerate,
    #[error("infeasible: {raw:.6} CAVs required but only {total} vehicles present")]
    Infeasible { raw: f64, total: u32 },
    #[error("infeasible: CAV headway {cav_headway} s moves the average away from the target (raw {raw:.6})")]
    WrongDirection { raw: f64, cav_headway: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CavRequirement {
    pub raw: f64,
    pub count: u32,
}

impl HeadwayScenario {
    pub fn new(prev_headway: f64, cur_headway: f64, total_vehicles: u32, cav_headway: f64) -> Result<Self, MprError> {
        let s = Self { prev_headway, cur_headway, total_vehicles, cav_headway };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), MprError> {
        for (name, h) in [("prev", self.prev_headway), ("current", self.cur_headway), ("CAV", self.cav_headway)] {
            if !(h.is_finite() && h > 0.0) {
                return Err(MprError::Invalid(format!("{name} headway must be positive, got {h}")));
            }
        }
        if self.total_vehicles == 0 {
            return Err(MprError::Invalid("total vehicle count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Solves for the CAV count that restores `prev_headway`.
///
/// The integer count is the ceiling of the raw value, so the blended headway
/// meets or beats the target. Raw values within floating-point noise of an
/// integer are snapped to it first (e.g. 10.000000000000007 counts as 10).
pub fn required_cavs(s: &HeadwayScenario) -> Result<CavRequirement, MprError> {
    s.validate()?;
    if s.prev_headway == s.cur_headway {
        return Ok(CavRequirement { raw: 0.0, count: 0 });
    }
    if s.cav_headway == s.cur_headway {
        return Err(MprError::Degenerate);
    }
    let n = f64::from(s.total_vehicles);
    let raw = n * (s.prev_headway - s.cur_headway) / (s.cav_headway - s.cur_headway);
    if raw < 0.0 {
        return Err(MprError::WrongDirection { raw, cav_headway: s.cav_headway });
    }
    if raw > n {
        return Err(MprError::Infeasible { raw, total: s.total_vehicles });
    }
    let nearest = raw.round();
    let snapped = if (raw - nearest).abs() <= 1e-9 * raw.abs().max(1.0) { nearest } else { raw.ceil() };
    let count = snapped.clamp(0.0, n) as u32;
    Ok(CavRequirement { raw, count })
}

/// Blended average headway with `count` CAVs out of `total_vehicles`.
pub fn verify_headway(s: &HeadwayScenario, count: u32) -> f64 {
    let n = f64::from(s.total_vehicles);
    let c = f64::from(count.min(s.total_vehicles));
    ((n - c) * s.cur_headway + s.cav_headway * c) / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scenario(n: u32, prev: f64, cur: f64, cav: f64) -> HeadwayScenario {
        HeadwayScenario::new(prev, cur, n, cav).unwrap()
    }

    #[test]
    fn unchanged_headway_needs_no_cavs() {
        let r = required_cavs(&scenario(60, 2.5, 2.5, 2.0)).unwrap();
        assert_eq!((r.raw, r.count), (0.0, 0));
        let r = required_cavs(&scenario(60, 2.5, 2.5, 2.5)).unwrap();
        assert_eq!(r.count, 0);
    }

    #[test]
    fn exact_integer_case() {
        // 60·(2.5 - 2.6)/(2.0 - 2.6) = 10; back-substitution: (50·2.6 + 10·2.0)/60 = 2.5
        let s = scenario(60, 2.5, 2.6, 2.0);
        let r = required_cavs(&s).unwrap();
        assert!((r.raw - 10.0).abs() < 1e-12);
        assert_eq!(r.count, 10);
        assert!((verify_headway(&s, 10) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn departure_of_one_vehicle_example() {
        let s = scenario(67, 2.549, 2.5779, 2.0);
        let r = required_cavs(&s).unwrap();
        let oracle = 67.0 * (2.549 - 2.5779) / (2.0 - 2.5779);
        assert!((r.raw - oracle).abs() < 1e-12);
        assert!((r.raw - 3.35).abs() < 0.01);
        assert_eq!(r.count, 4);
    }

    #[test]
    fn error_cases() {
        assert_eq!(required_cavs(&scenario(60, 2.5, 2.6, 2.6)), Err(MprError::Degenerate));
        assert!(matches!(required_cavs(&scenario(10, 1.0, 2.6, 2.0)), Err(MprError::Infeasible { .. })));
        assert!(matches!(required_cavs(&scenario(10, 2.5, 2.6, 3.0)), Err(MprError::WrongDirection { .. })));
        assert!(HeadwayScenario::new(0.0, 2.6, 10, 2.0).is_err());
        assert!(HeadwayScenario::new(2.5, 2.6, 0, 2.0).is_err());
    }

    #[test]
    fn verify_endpoints() {
        let s = scenario(60, 2.5, 2.6, 2.0);
        assert_eq!(verify_headway(&s, 0), 2.6);
        assert!((verify_headway(&s, 60) - 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn ceiling_meets_target_and_floor_does_not_beat_it(
            n in 1u32..200,
            cur in 1.0f64..4.0,
            cav in 0.5f64..3.0,
            frac in 0.0f64..1.0,
        ) {
            prop_assume!(cav < cur - 1e-6);
            // choose a reachable previous headway between cav and cur
            let prev = cur - frac * (cur - cav);
            let s = scenario(n, prev, cur, cav);
            let r = required_cavs(&s).unwrap();
            let tol = 1e-9;
            prop_assert!(verify_headway(&s, r.count) <= prev + tol);
            prop_assert!(prev <= verify_headway(&s, r.raw.floor() as u32) + tol);
            // algebraic back-substitution at the raw value
            let blended = ((f64::from(n) - r.raw) * cur + cav * r.raw) / f64::from(n);
            prop_assert!((blended - prev).abs() < 1e-12 * prev.max(1.0) * 10.0);
        }

        #[test]
        fn verify_is_affine_and_monotone(n in 2u32..200, cur in 0.5f64..4.0, cav in 0.5f64..4.0) {
            let s = scenario(n, cur, cur, cav);
            let slope = (cav - cur) / f64::from(n);
            for c in 0..n {
                let d = verify_headway(&s, c + 1) - verify_headway(&s, c);
                prop_assert!((d - slope).abs() < 1e-12);
            }
        }
    }
}
