//! Scenarios shared by the criterion benchmarks.

use uplat::{Discipline, TestConfig};

/// The saturated single-device scenario: 10 Mbps, four load flows.
pub fn saturated(discipline: Discipline, seed: u64) -> TestConfig {
    TestConfig {
        discipline,
        seed,
        label: format!("{discipline}-{seed}"),
        ..TestConfig::default()
    }
}

/// A fleet small enough to run inside a benchmark iteration.
pub fn small_fleet(devices: u32) -> uplat::FleetConfig {
    let mut cfg = uplat::FleetConfig { devices, ..uplat::FleetConfig::default() };
    cfg.template.probe_duration = uplat::SimTime::from_secs(2);
    cfg
}
