//! Network graph, hydraulic traces and initial conditions.

mod hydraulics;
mod initial;
mod topology;

pub use hydraulics::{load_hydraulics, HydraulicStep, HydraulicTrace, CONTINUITY_TOLERANCE};
pub use initial::{load_initial_state, InitialSection, InitialValue, SpeciesInitialState};
pub use topology::{
    check_network, load_network, BoosterSpec, LinkRef, LinkSpec, NetworkFile, NetworkTopology,
    NodeRef, NodeSpec, PipeSpec, ReservoirSpec, Species, TankSpec,
};

/// Outcome of [`validate_scenario`]. An empty finding list means the scenario is
/// consistent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub findings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Collects every violated invariant of a network, trace and initial state.
///
/// Takes the raw network sections so that broken references can be reported
/// instead of failing early. Trace and initial-state checks need a resolvable
/// graph and are skipped when the network itself has findings.
pub fn validate_scenario(
    network: &NetworkFile,
    trace: &HydraulicTrace,
    init: &SpeciesInitialState,
) -> ValidationReport {
    let mut findings = check_network(network);
    if findings.is_empty() {
        let topo = NetworkTopology::new(network.clone()).expect("checked above");
        findings.extend(trace.findings(&topo));
        findings.extend(init.findings(&topo));
    }
    ValidationReport { findings }
}
