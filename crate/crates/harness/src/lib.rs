//! Scenario harness for the Aegon protocol: a loopback world of broker, toy
//! publisher, platform, simulated devices and auditor under one manual
//! clock, the built-in scenarios, and the latency benchmark.

pub mod bench;
pub mod publisher;
pub mod scenarios;
pub mod world;

pub use bench::{run_bench, BenchReport, Profile};
pub use scenarios::{run_all, run_scenario, scenario_names, Kind, ScenarioReport, UnknownScenario};
pub use world::{World, WorldConfig};
