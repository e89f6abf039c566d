//! Ring-road traffic microsimulation coupled with a Double-DQN controller that
//! shapes traffic by broadcasting one acceleration command to every connected
//! automated vehicle (CAV) on the loop.

pub mod baselines;
pub mod drl;
pub mod experiments;
pub mod metrics;
pub mod mpr;
pub mod neural;
pub mod sim;
