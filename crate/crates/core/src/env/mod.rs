//! Benchmark environments.

pub mod bus;
pub mod wildfire;
