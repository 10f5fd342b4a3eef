//! Shared fixtures for the benchmarks.

use smart_core::dataset::Vocabularies;
use smart_core::synth::{generate_map, generate_scenario, MapKind, MapSpec, TrafficSpec};
use smart_core::Scenario;

/// A straight-road scenario with `agents` vehicles, roomy enough for 32.
pub fn scenario(agents: usize, seed: u64) -> Scenario {
    let mut spec = MapSpec::new(MapKind::Straight, 4, seed);
    spec.length = 800.0;
    let map = generate_map(&spec).expect("valid map spec");
    generate_scenario(&map, &TrafficSpec::new(agents, seed)).expect("scenario fits the map")
}

/// Vocabularies built from `scenarios` at the default sizes.
pub fn vocabularies(scenarios: &[Scenario]) -> Vocabularies {
    Vocabularies::build(scenarios, 512, 1024, 0).expect("vocabularies build")
}
